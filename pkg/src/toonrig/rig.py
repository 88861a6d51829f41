"""Blendshape rig data model and linear composition of component weights."""
import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParamError, RigError
from .landmarks import CONTOUR, LandmarkSet

AXES = ("x", "y", "scale")
WEIGHT_LIMIT = 30.0
BASE_FACE = "base_face"
DEFAULT_COMPONENTS = ("left_eyebrow", "right_eyebrow", "left_eye", "right_eye", "nose", "mouth")


class ParamVector(Mapping):
    """Blendshape weights keyed by ``(component_id, axis)``.

    Weights are stored unnormalized. Construction does not range-check so that
    :func:`validate_params` can report violations; composition does.
    """

    def __init__(self, entries):
        self._entries = {}
        for (cid, axis), w in dict(entries).items():
            if axis not in AXES:
                raise ParamError(f"unknown axis '{axis}' for component '{cid}'")
            self._entries[(cid, axis)] = float(w)

    def __getitem__(self, key):
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if isinstance(other, ParamVector):
            return self._entries == other._entries
        return NotImplemented

    def __hash__(self):
        return hash(frozenset(self._entries.items()))

    def __repr__(self):
        body = ", ".join(f"{c}.{a}={w:+.2f}" for (c, a), w in self._entries.items() if w)
        return f"ParamVector({body or 'neutral'})"

    @classmethod
    def zeros(cls, component_ids):
        return cls({(c, a): 0.0 for c in component_ids for a in AXES})

    @classmethod
    def from_array(cls, component_ids, values):
        values = np.asarray(values, dtype=np.float64).reshape(len(component_ids), len(AXES))
        return cls({(c, a): values[i, j] for i, c in enumerate(component_ids) for j, a in enumerate(AXES)})

    def to_array(self, component_ids):
        return np.array([self._entries.get((c, a), 0.0) for c in component_ids for a in AXES])

    def components(self):
        seen = []
        for c, _ in self._entries:
            if c not in seen:
                seen.append(c)
        return seen

    def replace(self, component, axis, value):
        entries = dict(self._entries)
        entries[(component, axis)] = value
        return ParamVector(entries)

    def scaled(self, factor):
        return ParamVector({k: w * factor for k, w in self._entries.items()})

    def __add__(self, other):
        keys = list(self._entries) + [k for k in other if k not in self._entries]
        return ParamVector({k: self.get(k, 0.0) + other.get(k, 0.0) for k in keys})

    def to_dict(self):
        out = {}
        for (c, a), w in self._entries.items():
            out.setdefault(c, {})[a] = w
        return out

    @classmethod
    def from_dict(cls, data):
        entries = {}
        for c, axes in data.items():
            for a, w in axes.items():
                entries[(c, a)] = w
        return cls(entries)


@dataclass(frozen=True)
class Gains:
    dx_max: float
    dy_max: float
    s_max: float


@dataclass(frozen=True, eq=False)
class Layer:
    id: str
    vertices: np.ndarray
    triangles: np.ndarray
    texture_rect: tuple

    @property
    def rest_bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def uv(self):
        """Atlas coordinates of each vertex: rest bbox mapped linearly onto the texture rect."""
        x0, y0, x1, y1 = self.rest_bbox
        rx, ry, rw, rh = self.texture_rect
        sx = rw / (x1 - x0)
        sy = rh / (y1 - y0)
        return np.column_stack([rx + (self.vertices[:, 0] - x0) * sx, ry + (self.vertices[:, 1] - y0) * sy])

    def to_dict(self):
        return {
            "id": self.id,
            "vertices": self.vertices.tolist(),
            "triangles": self.triangles.tolist(),
            "texture_rect": list(self.texture_rect),
        }


@dataclass(frozen=True, eq=False)
class Component(Layer):
    anchor: np.ndarray = None
    gains: Gains = None
    landmark_ids: tuple = ()

    def displacement(self, wx, wy, ws, points):
        """Blendshape displacement of ``points`` (N x 2, rest positions) for one component."""
        points = np.asarray(points, dtype=np.float64)
        d = (ws / WEIGHT_LIMIT) * self.gains.s_max * (points - self.anchor)
        d[:, 0] += (wx / WEIGHT_LIMIT) * self.gains.dx_max
        d[:, 1] += (wy / WEIGHT_LIMIT) * self.gains.dy_max
        return d

    def to_dict(self):
        d = super().to_dict()
        d["anchor"] = [float(v) for v in self.anchor]
        d["gains"] = {"dx_max": self.gains.dx_max, "dy_max": self.gains.dy_max, "s_max": self.gains.s_max}
        d["landmark_ids"] = list(self.landmark_ids)
        return d


@dataclass(frozen=True, eq=False)
class Rig:
    canvas_size: int
    components: tuple
    base_face: Layer
    template_landmarks: LandmarkSet
    z_order: tuple
    extra_layers: tuple = field(default=())

    def __post_init__(self):
        check_rig(self)

    @property
    def component_ids(self):
        return tuple(c.id for c in self.components)

    @property
    def feature_layer_ids(self):
        return self.component_ids

    @property
    def layers(self):
        out = {self.base_face.id: self.base_face}
        out.update((c.id, c) for c in self.components)
        out.update((l.id, l) for l in self.extra_layers)
        return out

    def component(self, cid):
        for c in self.components:
            if c.id == cid:
                return c
        raise RigError(f"unknown component '{cid}'")

    def with_layer(self, layer, z_index):
        """Copy of the rig with an extra (non-component) layer inserted into the z-order."""
        if layer.id in self.layers:
            extras = tuple(l for l in self.extra_layers if l.id != layer.id) + (layer,)
            z = [i for i in self.z_order if i != layer.id]
        else:
            extras = self.extra_layers + (layer,)
            z = list(self.z_order)
        z.insert(len(z) if z_index is None else z_index, layer.id)
        return Rig(self.canvas_size, self.components, self.base_face, self.template_landmarks, tuple(z), extras)

    def to_dict(self):
        return {
            "canvas_size": self.canvas_size,
            "base_face": self.base_face.to_dict(),
            "components": [c.to_dict() for c in self.components],
            "layers": [l.to_dict() for l in self.extra_layers],
            "template_landmarks": self.template_landmarks.to_dict(),
            "z_order": list(self.z_order),
        }

    def __eq__(self, other):
        if not isinstance(other, Rig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def fingerprint(self):
        """Hash of the landmark-relevant geometry, in canvas-normalized units.

        Texture placement and extra layers (hair) are excluded, so a packaged rig
        keeps the fingerprint of the template it was fitted with.
        """
        s = float(self.canvas_size)

        def q(values):
            return [round(float(v) / s, 9) for v in np.ravel(values)]

        doc = {
            "components": [
                {
                    "id": c.id,
                    "vertices": q(c.vertices),
                    "triangles": c.triangles.ravel().tolist(),
                    "anchor": q(c.anchor),
                    "gains": [round(c.gains.dx_max / s, 9), round(c.gains.dy_max / s, 9), round(c.gains.s_max, 9)],
                    "landmark_ids": list(c.landmark_ids),
                }
                for c in self.components
            ],
            "landmarks": {
                "ids": list(self.template_landmarks.ids),
                "xy": q(self.template_landmarks.xy),
                "groups": [self.template_landmarks.groups[i] for i in self.template_landmarks.ids],
            },
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_layer(layer, path):
    v, t = layer.vertices, layer.triangles
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise RigError(f"{path}.vertices: need at least 3 two-dimensional vertices, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise RigError(f"{path}.vertices: non-finite coordinate")
    if t.ndim != 2 or t.shape[1] != 3 or len(t) < 1:
        raise RigError(f"{path}.triangles: need at least one index triple")
    if t.min() < 0 or t.max() >= len(v):
        raise RigError(f"{path}.triangles: index out of range 0..{len(v) - 1}")
    x0, y0, x1, y1 = layer.rest_bbox
    if x1 <= x0 or y1 <= y0:
        raise RigError(f"{path}.vertices: degenerate rest bounding box")
    rect = layer.texture_rect
    if len(rect) != 4 or rect[2] <= 0 or rect[3] <= 0 or rect[0] < 0 or rect[1] < 0:
        raise RigError(f"{path}.texture_rect: invalid rectangle {list(rect)}")


def check_rig(rig):
    """Raise :class:`RigError` naming the field path of the first violated invariant."""
    if rig.canvas_size <= 0:
        raise RigError("canvas_size: must be positive")
    ids = [rig.base_face.id] + [c.id for c in rig.components] + [l.id for l in rig.extra_layers]
    seen = set()
    for i in ids:
        if i in seen:
            raise RigError(f"duplicate layer id '{i}'")
        seen.add(i)
    _check_layer(rig.base_face, "base_face")
    lm_ids = set(rig.template_landmarks.ids)
    for k, c in enumerate(rig.components):
        path = f"components[{k}]({c.id})"
        _check_layer(c, path)
        g = c.gains
        if not (g.dx_max > 0 and g.dy_max > 0 and g.s_max > 0):
            raise RigError(f"{path}.gains: must be strictly positive")
        if c.anchor is None or np.shape(c.anchor) != (2,):
            raise RigError(f"{path}.anchor: must be a 2D point")
        missing = [i for i in c.landmark_ids if i not in lm_ids]
        if missing:
            raise RigError(f"{path}.landmark_ids: not in template_landmarks: {missing}")
        for i in c.landmark_ids:
            if rig.template_landmarks.groups[i] != c.id:
                raise RigError(f"{path}.landmark_ids: '{i}' grouped under '{rig.template_landmarks.groups[i]}'")
    for k, l in enumerate(rig.extra_layers):
        _check_layer(l, f"layers[{k}]({l.id})")
    comp_ids = {c.id for c in rig.components}
    for i in lm_ids:
        g = rig.template_landmarks.groups[i]
        if g != CONTOUR and g not in comp_ids:
            raise RigError(f"template_landmarks: '{i}' grouped under unknown component '{g}'")
    if sorted(rig.z_order) != sorted(ids):
        raise RigError(f"z_order: must be a permutation of layer ids {sorted(ids)}, got {list(rig.z_order)}")
    base_pos = rig.z_order.index(rig.base_face.id)
    for c in rig.components:
        if rig.z_order.index(c.id) < base_pos:
            raise RigError(f"z_order: feature layer '{c.id}' is behind the base face")


def make_component(cid, vertices, triangles, texture_rect, gains, landmark_ids, anchor=None):
    vertices = np.asarray(vertices, dtype=np.float64)
    if anchor is None and vertices.ndim == 2 and len(vertices):
        anchor = vertices.mean(axis=0)
    return Component(
        id=cid,
        vertices=vertices,
        triangles=np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
        texture_rect=tuple(int(v) for v in texture_rect),
        anchor=None if anchor is None else np.asarray(anchor, dtype=np.float64),
        gains=gains,
        landmark_ids=tuple(landmark_ids),
    )


def make_layer(lid, vertices, triangles, texture_rect):
    return Layer(
        id=lid,
        vertices=np.asarray(vertices, dtype=np.float64),
        triangles=np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
        texture_rect=tuple(int(v) for v in texture_rect),
    )


# -- parameters -------------------------------------------------------------


def validate_params(params, rig):
    """Return a list of violation strings; empty means the vector is valid for ``rig``."""
    problems = []
    comp_ids = rig.component_ids
    for c in comp_ids:
        for a in AXES:
            if (c, a) not in params:
                problems.append(f"missing entry ({c}, {a})")
    for (c, a), w in params.items():
        if c not in comp_ids:
            problems.append(f"unknown component entry ({c}, {a})")
            continue
        if not np.isfinite(w) or abs(w) > WEIGHT_LIMIT:
            problems.append(f"out of range ({c}, {a}, {w:g}, bound {WEIGHT_LIMIT:g})")
    return problems


def _check_params(params, rig):
    comp_ids = set(rig.component_ids)
    for (c, a), w in params.items():
        if c not in comp_ids:
            raise ParamError(f"unknown component '{c}' in params")
        if not np.isfinite(w) or abs(w) > WEIGHT_LIMIT:
            raise ParamError(f"weight ({c}, {a}) = {w:g} outside [-{WEIGHT_LIMIT:g}, {WEIGHT_LIMIT:g}]")


def compose_geometry(rig, params):
    """Deformed vertex positions for every layer.

    Missing entries count as zero. Non-component layers are returned unchanged.
    """
    _check_params(params, rig)
    out = {rig.base_face.id: rig.base_face.vertices.copy()}
    for c in rig.components:
        wx = params.get((c.id, "x"), 0.0)
        wy = params.get((c.id, "y"), 0.0)
        ws = params.get((c.id, "scale"), 0.0)
        if wx == 0 and wy == 0 and ws == 0:
            out[c.id] = c.vertices.copy()
        else:
            out[c.id] = c.vertices + c.displacement(wx, wy, ws, c.vertices)
    for l in rig.extra_layers:
        out[l.id] = l.vertices.copy()
    return out


def displaced_landmarks(rig, params, ids=None):
    """Template landmarks moved with their component's displacement field."""
    _check_params(params, rig)
    tl = rig.template_landmarks
    sub = tl if ids is None else tl.subset(ids)
    xy = sub.xy.copy()
    for c in rig.components:
        idx = [k for k, i in enumerate(sub.ids) if sub.groups[i] == c.id]
        if not idx:
            continue
        wx = params.get((c.id, "x"), 0.0)
        wy = params.get((c.id, "y"), 0.0)
        ws = params.get((c.id, "scale"), 0.0)
        xy[idx] = sub.xy[idx] + c.displacement(wx, wy, ws, sub.xy[idx])
    return sub.with_xy(xy)


# -- file format -------------------------------------------------------------


def _layer_from_dict(d, path):
    try:
        return make_layer(d["id"], d["vertices"], d["triangles"], d["texture_rect"])
    except KeyError as exc:
        raise RigError(f"{path}: missing field {exc}") from None


def rig_from_dict(data):
    try:
        canvas = int(data["canvas_size"])
        comps = []
        seen = set()
        for k, d in enumerate(data["components"]):
            path = f"components[{k}]"
            if d.get("id") in seen:
                raise RigError(f"{path}: duplicate component id '{d['id']}'")
            seen.add(d.get("id"))
            try:
                g = d["gains"]
                comps.append(make_component(
                    d["id"], d["vertices"], d["triangles"], d["texture_rect"],
                    Gains(float(g["dx_max"]), float(g["dy_max"]), float(g["s_max"])),
                    d.get("landmark_ids", []), anchor=d.get("anchor"),
                ))
            except KeyError as exc:
                raise RigError(f"{path}: missing field {exc}") from None
            except ValueError as exc:
                if isinstance(exc, RigError):
                    raise
                raise RigError(f"{path}: {exc}") from None
        base = _layer_from_dict(data["base_face"], "base_face")
        extras = tuple(_layer_from_dict(d, f"layers[{k}]") for k, d in enumerate(data.get("layers", [])))
        lms = LandmarkSet.from_dict(data["template_landmarks"])
        z = tuple(data["z_order"])
    except KeyError as exc:
        raise RigError(f"rig document lacks field {exc}") from None
    return Rig(canvas, tuple(comps), base, lms, z, extras)


def load_rig(path):
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return rig_from_dict(data)


def save_rig(rig, path):
    Path(path).write_text(json.dumps(rig.to_dict(), indent=1), encoding="utf-8")
