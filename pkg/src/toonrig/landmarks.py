"""Named 2D keypoints grouped by facial component."""
import json
from pathlib import Path

import numpy as np

from .errors import LandmarkError

CONTOUR = "contour"


class LandmarkSet:
    """Ordered landmark ids with pixel positions on a square canvas.

    Positions are kept in pixels (origin top-left, y down); ``normalized``
    gives the [0, 1] view used by the regressor.
    """

    def __init__(self, ids, xy, groups, size):
        self.ids = tuple(ids)
        self.xy = np.asarray(xy, dtype=np.float64).reshape(len(self.ids), 2)
        self.groups = {i: groups[i] for i in self.ids if i in groups}
        self.size = float(size)
        if len(set(self.ids)) != len(self.ids):
            dup = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise LandmarkError(f"duplicate landmark ids: {dup}")
        missing = [i for i in self.ids if i not in self.groups]
        if missing:
            raise LandmarkError(f"landmarks without a group: {missing}")
        if self.size <= 0:
            raise LandmarkError("image size must be positive")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (self.ids == other.ids and self.size == other.size
                and self.groups == other.groups and np.array_equal(self.xy, other.xy))

    def __repr__(self):
        return f"LandmarkSet({len(self)} points, size={self.size:g})"

    @property
    def normalized(self):
        return self.xy / self.size

    def index(self, landmark_id):
        return self.ids.index(landmark_id)

    def group_names(self):
        seen = []
        for i in self.ids:
            g = self.groups[i]
            if g not in seen:
                seen.append(g)
        return seen

    def group_ids(self, group):
        return [i for i in self.ids if self.groups[i] == group]

    def group_points(self, group):
        idx = [k for k, i in enumerate(self.ids) if self.groups[i] == group]
        if not idx:
            raise LandmarkError(f"landmark group '{group}' is absent")
        return self.xy[idx]

    def point(self, landmark_id):
        return self.xy[self.index(landmark_id)]

    def subset(self, ids):
        idx = [self.index(i) for i in ids]
        return LandmarkSet(ids, self.xy[idx], {i: self.groups[i] for i in ids}, self.size)

    def with_xy(self, xy, size=None):
        return LandmarkSet(self.ids, xy, self.groups, self.size if size is None else size)

    def transformed(self, fn, size=None):
        """Apply ``fn`` (N x 2 -> N x 2 array) to every point."""
        return self.with_xy(fn(self.xy), size)

    def check_normalized(self):
        n = self.normalized
        if np.any(n < 0) or np.any(n > 1):
            bad = [self.ids[k] for k in np.where(np.any((n < 0) | (n > 1), axis=1))[0]]
            raise LandmarkError(f"landmarks outside the image: {bad[:5]}")

    def to_dict(self):
        groups = {}
        for i in self.ids:
            groups.setdefault(self.groups[i], []).append(i)
        return {
            "image_size": self.size,
            "points": {i: [float(x), float(y)] for i, (x, y) in zip(self.ids, self.xy)},
            "groups": groups,
        }

    @classmethod
    def from_dict(cls, data):
        try:
            size = data["image_size"]
            points = data["points"]
            groups = data["groups"]
        except KeyError as exc:
            raise LandmarkError(f"landmark document lacks field {exc}") from None
        if isinstance(size, (list, tuple)):
            if len(size) != 2 or size[0] != size[1]:
                raise LandmarkError(f"image_size must be square, got {size}")
            size = size[0]
        membership = {}
        for group, members in groups.items():
            for m in members:
                if m in membership:
                    raise LandmarkError(f"landmark '{m}' listed in groups '{membership[m]}' and '{group}'")
                membership[m] = group
        unknown = [m for m in membership if m not in points]
        if unknown:
            raise LandmarkError(f"groups reference unknown landmarks: {unknown[:5]}")
        ids = list(points)
        xy = [points[i] for i in ids]
        return cls(ids, xy, membership, size)


def load_landmarks(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LandmarkError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return LandmarkSet.from_dict(data)


def save_landmarks(landmarks, path):
    Path(path).write_text(json.dumps(landmarks.to_dict(), indent=1), encoding="utf-8")
