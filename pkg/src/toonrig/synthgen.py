"""Synthetic (landmarks, weights) corpus generated from marker renders."""
import hashlib
import json
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import AssociationError, DatasetError
from .raster import luminance, render_markers
from .rig import AXES, WEIGHT_LIMIT, ParamVector

MAGIC = b"TRDSET\x00\x01"
VERSION = 1
_HEADER = struct.Struct("<8sH32sQIIII")
MAX_DROP_RATE = 0.01
_EIGHT = np.ones((3, 3), dtype=bool)


class Blob(NamedTuple):
    centroid: tuple  # (x, y) in pixel-index coordinates: pixel (c, r) has center (c, r)
    area: int


def sample_params(rig, n, seed):
    """``n`` weight vectors drawn i.i.d. uniform on [-30, 30]."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    values = rng.uniform(-WEIGHT_LIMIT, WEIGHT_LIMIT, size=(n, len(rig.component_ids) * len(AXES)))
    return [ParamVector.from_array(rig.component_ids, row) for row in values]


def detect_blobs(image, threshold=200.0):
    """8-connected bright regions, largest first."""
    # luma is a convex combination of RGB, so it can only exceed the
    # threshold where the brightest channel does
    peak = np.maximum(image[..., 0], image[..., 1])
    np.maximum(peak, image[..., 2], out=peak)
    bright = peak > threshold
    rows, cols = np.nonzero(bright)
    if rows.size == 0:
        return []
    bright[rows, cols] = luminance(image[rows, cols]) > threshold
    labels, count = ndimage.label(bright, structure=_EIGHT)
    if count == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    areas = np.bincount(lab, minlength=count + 1)[1:]
    sx = np.bincount(lab, weights=cols, minlength=count + 1)[1:]
    sy = np.bincount(lab, weights=rows, minlength=count + 1)[1:]
    cx = sx / areas
    cy = sy / areas
    order = np.lexsort((cx, cy, -areas))
    return [Blob((float(cx[i]), float(cy[i])), int(areas[i])) for i in order]


def associate_landmarks(blobs, template):
    """Give each blob the template id that minimizes total squared distance."""
    if len(blobs) != len(template):
        raise AssociationError(len(blobs), len(template))
    # blob centroids are index coordinates; geometry puts pixel centers at +0.5
    pts = np.array([b.centroid for b in blobs], dtype=np.float64) + 0.5
    diff = template.xy[:, None, :] - pts[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    rows, cols = linear_sum_assignment(cost)
    xy = np.empty_like(template.xy)
    xy[rows] = pts[cols]
    return template.with_xy(xy)


@dataclass(eq=False)
class Dataset:
    landmarks: np.ndarray  # (n, L, 2) float32, normalized
    params: np.ndarray  # (n, P) float32, unnormalized weights
    landmark_ids: tuple
    component_ids: tuple
    rig_fingerprint: str
    seed: int
    canvas_size: int
    dropped: int = 0

    def __len__(self):
        return len(self.params)

    @property
    def samples(self):
        for lm, p in zip(self.landmarks, self.params):
            yield lm, ParamVector.from_array(self.component_ids, p)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.landmark_ids == other.landmark_ids and self.component_ids == other.component_ids
                and self.rig_fingerprint == other.rig_fingerprint and self.seed == other.seed
                and self.canvas_size == other.canvas_size and self.dropped == other.dropped
                and np.array_equal(self.landmarks, other.landmarks) and np.array_equal(self.params, other.params))

    def subset(self, index):
        return Dataset(self.landmarks[index], self.params[index], self.landmark_ids, self.component_ids,
                       self.rig_fingerprint, self.seed, self.canvas_size, self.dropped)


def recover_landmarks(rig, params):
    """Marker render -> blobs -> identities, for one weight vector."""
    img = render_markers(rig, params)
    return associate_landmarks(detect_blobs(img), rig.template_landmarks)


def _recover_chunk(args):
    rig, rows = args
    out = []
    for row in rows:
        p = ParamVector.from_array(rig.component_ids, row)
        try:
            out.append(recover_landmarks(rig, p).normalized)
        except AssociationError:
            out.append(None)
    return out


def build_dataset(rig, n, seed, workers=1, chunk=250):
    """Sample weights, render their markers and recover the landmarks.

    Results are assembled in sample order so the output does not depend on
    ``workers``. Samples whose blobs cannot be matched are dropped; more than
    1 % drops is an error.
    """
    params = np.array([p.to_array(rig.component_ids) for p in sample_params(rig, n, seed)])
    chunks = [(rig, params[i:i + chunk]) for i in range(0, n, chunk)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = [r for part in pool.map(_recover_chunk, chunks) for r in part]
    else:
        results = [r for c in chunks for r in _recover_chunk(c)]
    keep = [i for i, r in enumerate(results) if r is not None]
    dropped = n - len(keep)
    if dropped > MAX_DROP_RATE * n:
        raise DatasetError(f"{dropped} of {n} samples dropped (markers collide); limit is {MAX_DROP_RATE:.0%}")
    lms = np.array([results[i] for i in keep], dtype=np.float32).reshape(len(keep), len(rig.template_landmarks), 2)
    return Dataset(
        landmarks=lms,
        params=params[keep].astype(np.float32),
        landmark_ids=rig.template_landmarks.ids,
        component_ids=rig.component_ids,
        rig_fingerprint=rig.fingerprint(),
        seed=int(seed),
        canvas_size=rig.canvas_size,
        dropped=dropped,
    )


def save_dataset(ds, path):
    """Binary records plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    n, L = len(ds), len(ds.landmark_ids)
    P = len(ds.component_ids) * len(AXES)
    header = _HEADER.pack(MAGIC, VERSION, bytes.fromhex(ds.rig_fingerprint), ds.seed, n, L, P, ds.dropped)
    records = np.concatenate([ds.landmarks.reshape(n, 2 * L), ds.params.reshape(n, P)], axis=1)
    body = records.astype("<f4").tobytes()
    path.write_bytes(header + body)
    meta = {
        "format": "toonrig-dataset",
        "version": VERSION,
        "rig_fingerprint": ds.rig_fingerprint,
        "seed": ds.seed,
        "samples": n,
        "dropped": ds.dropped,
        "landmark_count": L,
        "param_count": P,
        "canvas_size": ds.canvas_size,
        "landmark_ids": list(ds.landmark_ids),
        "component_ids": list(ds.component_ids),
        "axes": list(AXES),
        "sha256": hashlib.sha256(header + body).hexdigest(),
    }
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_dataset(path):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, version, fp, seed, n, L, P, dropped = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise DatasetError(f"{path}: not a toonrig dataset (magic {magic!r}, version {version})")
    side = Path(str(path) + ".json")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"missing sidecar {side}") from None
    if meta["rig_fingerprint"] != fp.hex() or meta["samples"] != n:
        raise DatasetError(f"{side} disagrees with {path}")
    expected = _HEADER.size + n * (2 * L + P) * 4
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(raw)}")
    rec = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, 2 * L + P).astype(np.float32)
    return Dataset(
        landmarks=rec[:, :2 * L].reshape(n, L, 2).copy(),
        params=rec[:, 2 * L:].copy(),
        landmark_ids=tuple(meta["landmark_ids"]),
        component_ids=tuple(meta["component_ids"]),
        rig_fingerprint=fp.hex(),
        seed=seed,
        canvas_size=meta["canvas_size"],
        dropped=dropped,
    )
