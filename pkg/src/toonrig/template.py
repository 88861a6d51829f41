"""Default face template: rig geometry, a procedurally painted atlas, and
self-reconstruction portraits rendered from the template itself.

All layout constants are expressed at a 1024 px reference canvas and scaled
linearly; power-of-two canvas sizes therefore scale exactly.
"""
import numpy as np

from .landmarks import CONTOUR, LandmarkSet
from .raster import blank, composite_over, render
from .rig import (BASE_FACE, DEFAULT_COMPONENTS, Gains, Rig, displaced_landmarks,
                  make_component, make_layer)

REFERENCE = 1024

SKIN = (245, 205, 175, 255)
BLUSH = (238, 178, 160, 255)
BROW = (90, 60, 40, 255)
SCLERA = (250, 250, 248, 255)
EYE_LINE = (50, 38, 36, 255)
IRIS = (110, 70, 40, 255)
PUPIL = (20, 15, 15, 255)
NOSE_SHADE = (226, 178, 150, 255)
NOSTRIL = (150, 100, 90, 255)
LIPS = (200, 70, 80, 255)
LIP_LINE = (120, 30, 40, 255)
HAIR = (70, 45, 30, 255)
BACKDROP = (200, 215, 230, 255)

FACE_CENTER = (512.0, 560.0)
FACE_AXES = (330.0, 430.0)
N_CONTOUR = 24

# component id -> (center, rect size) at the reference scale
LAYOUT = {
    "left_eyebrow": ((654.0, 370.0), (200, 60)),
    "right_eyebrow": ((370.0, 370.0), (200, 60)),
    "left_eye": ((654.0, 510.0), (180, 100)),
    "right_eye": ((370.0, 510.0), (180, 100)),
    "nose": ((512.0, 640.0), (120, 140)),
    "mouth": ((512.0, 820.0), (240, 100)),
}

BROW_AXES = (80.0, 12.0)
EYE_AXES = (70.0, 32.0)
IRIS_RADIUS = 24.0
PUPIL_RADIUS = 10.0
NOSE_OUTLINE = [(0, -60), (-18, -20), (-38, 28), (-26, 48), (0, 54), (26, 48), (38, 28), (18, -20)]
MOUTH_AXES = (100.0, 34.0)


def _ellipse_points(n, axes, phase=0.0):
    t = phase + 2 * np.pi * np.arange(n) / n
    return np.column_stack([axes[0] * np.cos(t), axes[1] * np.sin(t)])


def _landmark_offsets(cid):
    """Landmark offsets from the component center, reference scale."""
    if cid.endswith("eyebrow"):
        ax, ay = BROW_AXES
        return np.array([(-ax, 0), (-ax / 2, -ay), (ax / 2, -ay), (ax, 0), (ax / 2, ay), (-ax / 2, ay)], dtype=float)
    if cid.endswith("eye"):
        return _ellipse_points(12, EYE_AXES)
    if cid == "nose":
        return np.array(NOSE_OUTLINE, dtype=float)
    if cid == "mouth":
        inner = np.array([(-55, 0), (0, -12), (55, 0), (0, 12)], dtype=float)
        return np.vstack([_ellipse_points(12, MOUTH_AXES), inner])
    raise KeyError(cid)


def _grid_mesh(x0, y0, w, h, n=3):
    xs = np.linspace(x0, x0 + w, n)
    ys = np.linspace(y0, y0 + h, n)
    verts = np.array([(x, y) for y in ys for x in xs])
    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            tris += [(a, a + 1, a + n), (a + 1, a + n + 1, a + n)]
    return verts, np.array(tris)


def _pack_rects(sizes, x0, gap):
    """Shelf-pack rectangles into a column starting at ``x0``."""
    placed = {}
    x, y, shelf_w = x0 + gap, gap, 0
    for cid, (w, h) in sizes.items():
        placed[cid] = (x, y, w, h)
        y += h + gap
        shelf_w = max(shelf_w, w)
    return placed, shelf_w + 2 * gap


def component_geometry(canvas_size=REFERENCE):
    k = canvas_size / REFERENCE
    out = {}
    for cid in DEFAULT_COMPONENTS:
        (cx, cy), (w, h) = LAYOUT[cid]
        out[cid] = {
            "center": np.array([cx * k, cy * k]),
            "size": (int(round(w * k)), int(round(h * k))),
            "landmarks": np.array([cx * k, cy * k]) + _landmark_offsets(cid) * k,
        }
    return out


def default_rig(canvas_size=REFERENCE):
    """Six-component face rig on a square canvas of ``canvas_size`` px."""
    s = int(canvas_size)
    k = s / REFERENCE
    geo = component_geometry(s)
    gains = Gains(0.02 * s, 0.02 * s, 0.30)

    ids, xy, groups = [], [], {}
    contour = np.array(FACE_CENTER) * k + _ellipse_points(N_CONTOUR, FACE_AXES, -np.pi / 2) * k
    for n, p in enumerate(contour):
        lid = f"contour_{n:02d}"
        ids.append(lid)
        xy.append(p)
        groups[lid] = CONTOUR
    comp_lm = {}
    for cid in DEFAULT_COMPONENTS:
        comp_lm[cid] = []
        for n, p in enumerate(geo[cid]["landmarks"]):
            lid = f"{cid}_{n:02d}"
            ids.append(lid)
            xy.append(p)
            groups[lid] = cid
            comp_lm[cid].append(lid)
    landmarks = LandmarkSet(ids, np.array(xy), groups, s)

    sizes = {cid: geo[cid]["size"] for cid in DEFAULT_COMPONENTS}
    rects, _ = _pack_rects(sizes, s, max(2, int(8 * k)))
    components = []
    for cid in DEFAULT_COMPONENTS:
        w, h = geo[cid]["size"]
        cx, cy = geo[cid]["center"]
        x0, y0 = cx - w / 2, cy - h / 2
        verts, tris = _grid_mesh(x0, y0, w, h)
        components.append(make_component(cid, verts, tris, rects[cid], gains, comp_lm[cid]))
    base_verts = np.array([(0, 0), (s, 0), (s, s), (0, s)], dtype=float)
    base = make_layer(BASE_FACE, base_verts, [(0, 1, 2), (0, 2, 3)], (0, 0, s, s))
    z = (BASE_FACE,) + tuple(DEFAULT_COMPONENTS)
    return Rig(s, tuple(components), base, landmarks, z)


def atlas_size(rig):
    w = max(l.texture_rect[0] + l.texture_rect[2] for l in rig.layers.values())
    h = max(l.texture_rect[1] + l.texture_rect[3] for l in rig.layers.values())
    return w, h


# -- painting ----------------------------------------------------------------


def _centers(h, w):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _fill(img, region, color):
    img[region] = color


def _inside_polygon(xs, ys, poly):
    """Even-odd point-in-polygon test, vectorized over pixel centers."""
    inside = np.zeros(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cond = (y1 > ys) != (y2 > ys)
        with np.errstate(divide="ignore", invalid="ignore"):
            xcross = (x2 - x1) * (ys - y1) / (y2 - y1) + x1
        inside ^= cond & (xs < xcross)
    return inside


def _paint_component(cid, w, h, k):
    img = blank(w, h)
    xs, ys = _centers(h, w)
    u = xs - w / 2
    v = ys - h / 2
    if cid.endswith("eyebrow"):
        ax, ay = BROW_AXES[0] * k, BROW_AXES[1] * k
        _fill(img, (u / ax) ** 2 + (v / ay) ** 2 <= 1, BROW)
    elif cid.endswith("eye"):
        ax, ay = EYE_AXES[0] * k, EYE_AXES[1] * k
        rr = (u / ax) ** 2 + (v / ay) ** 2
        _fill(img, rr <= 1, EYE_LINE)
        inner = ((u / (ax - 3 * k)) ** 2 + (v / (ay - 3 * k)) ** 2) <= 1
        _fill(img, inner, SCLERA)
        d = np.hypot(u, v)
        _fill(img, inner & (d <= IRIS_RADIUS * k), IRIS)
        _fill(img, d <= PUPIL_RADIUS * k, PUPIL)
        _fill(img, np.hypot(u + 7 * k, v + 8 * k) <= 4 * k, SCLERA)
    elif cid == "nose":
        poly = np.array(NOSE_OUTLINE, dtype=float) * k
        _fill(img, _inside_polygon(u, v, poly), NOSE_SHADE)
        for sx in (-1, 1):
            _fill(img, ((u - sx * 14 * k) / (8 * k)) ** 2 + ((v - 38 * k) / (5 * k)) ** 2 <= 1, NOSTRIL)
    elif cid == "mouth":
        ax, ay = MOUTH_AXES[0] * k, MOUTH_AXES[1] * k
        _fill(img, (u / ax) ** 2 + (v / ay) ** 2 <= 1, LIPS)
        _fill(img, (u / (80 * k)) ** 2 + (v / (3 * k)) ** 2 <= 1, LIP_LINE)
    return img


def _paint_base_face(s, k):
    img = blank(s, s)
    xs, ys = _centers(s, s)
    cx, cy = FACE_CENTER[0] * k, FACE_CENTER[1] * k
    face = ((xs - cx) / (FACE_AXES[0] * k)) ** 2 + ((ys - cy) / (FACE_AXES[1] * k)) ** 2 <= 1
    _fill(img, face, SKIN)
    for sx in (-1, 1):
        blush = np.hypot(xs - (cx + sx * 200 * k), ys - 680 * k) <= 45 * k
        _fill(img, face & blush, BLUSH)
    return img


def default_atlas(rig):
    """Texture atlas for :func:`default_rig`: clean skin plus one sprite per component."""
    s = rig.canvas_size
    k = s / REFERENCE
    w, h = atlas_size(rig)
    atlas = blank(w, h)
    atlas[0:s, 0:s] = _paint_base_face(s, k)
    for c in rig.components:
        x, y, rw, rh = c.texture_rect
        atlas[y:y + rh, x:x + rw] = _paint_component(c.id, rw, rh, k)
    return atlas


# -- self-reconstruction fixtures -------------------------------------------


def hair_mask(canvas_size):
    """A cap of hair over the forehead, clear of every feature's reach."""
    k = canvas_size / REFERENCE
    xs, ys = _centers(canvas_size, canvas_size)
    cap = ((xs - 512 * k) / (370 * k)) ** 2 + ((ys - 380 * k) / (300 * k)) ** 2 <= 1
    face = ((xs - FACE_CENTER[0] * k) / (FACE_AXES[0] * k)) ** 2 + ((ys - FACE_CENTER[1] * k) / (FACE_AXES[1] * k)) ** 2 <= 1
    return cap & ((ys < 250 * k) | ~face) & (ys < 560 * k)


def iris_footprint(rig, params, cid):
    """Canvas pixels covered by the iris of eye ``cid`` at ``params``."""
    c = rig.component(cid)
    s = rig.canvas_size
    k = s / REFERENCE
    wx, wy, ws = (params.get((cid, a), 0.0) for a in ("x", "y", "scale"))
    center = c.anchor + c.displacement(wx, wy, ws, c.anchor[None, :])[0]
    radius = IRIS_RADIUS * k * (1 + ws / 30 * c.gains.s_max)
    xs, ys = _centers(s, s)
    return np.hypot(xs - center[0], ys - center[1]) <= radius


def self_reconstruction_portrait(rig, atlas, params, with_hair=True, backdrop=BACKDROP):
    """Render the template at ``params`` as an opaque portrait.

    Returns (portrait, landmarks, hair_mask) where the landmarks are the exact
    displaced template landmarks and the mask is ``None`` without hair.
    """
    s = rig.canvas_size
    img = render(rig, atlas, params)
    out = composite_over(blank(s, s, backdrop), img)
    mask = None
    if with_hair:
        mask = hair_mask(s)
        out[mask] = HAIR
    return out, displaced_landmarks(rig, params), mask
