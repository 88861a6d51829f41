"""Portrait-to-template alignment: eye leveling, similarity fits and texture pulls."""
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, LandmarkError
from .landmarks import CONTOUR, LandmarkSet
from .raster import blank


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) p + translation."""

    rotation: float = 0.0
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.scale > 0:
            raise AlignmentError(f"similarity scale must be positive, got {self.scale}")

    @property
    def linear(self):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    @property
    def translation(self):
        return np.array([self.tx, self.ty])

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.linear.T + self.translation

    def inverse(self):
        inv_lin = np.linalg.inv(self.linear)
        t = -inv_lin @ self.translation
        return SimilarityTransform(-self.rotation, 1.0 / self.scale, float(t[0]), float(t[1]))

    def then(self, other):
        """``other`` applied after ``self``."""
        t = other.linear @ self.translation + other.translation
        return SimilarityTransform(self.rotation + other.rotation, self.scale * other.scale, float(t[0]), float(t[1]))


def fit_similarity(src, dst):
    """Least-squares rotation + uniform scale + translation taking ``src`` onto ``dst``.

    Closed form for 2D: with centered points, the optimal rotation angle is
    atan2(sum cross, sum dot) and the scale is the projection length over the
    source variance. Reflections are excluded by construction.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AlignmentError(f"point sets must both be N x 2, got {src.shape} and {dst.shape}")
    if len(src) < 2:
        raise AlignmentError("need at least two point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    b = dst - mu_d
    var = float(np.sum(a * a))
    if var <= 1e-12 * max(1.0, float(np.abs(src).max()) ** 2):
        raise AlignmentError("degenerate source points (all coincident)")
    dot = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    cross = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    theta = np.arctan2(cross, dot)
    scale = np.hypot(dot, cross) / var
    if scale <= 0:
        raise AlignmentError("source and target are uncorrelated; no similarity fit")
    c, s = np.cos(theta), np.sin(theta)
    t = mu_d - scale * np.array([c * mu_s[0] - s * mu_s[1], s * mu_s[0] + c * mu_s[1]])
    return SimilarityTransform(float(theta), float(scale), float(t[0]), float(t[1]))


def residual(transform, src, dst):
    d = transform.apply(src) - np.asarray(dst, dtype=np.float64)
    return float(np.sum(d * d))


# -- resampling --------------------------------------------------------------


def sample_bilinear(image, xs, ys):
    """Sample RGBA at continuous coordinates; outside the image counts as transparent.

    Interpolation runs on premultiplied color so transparent texels do not
    darken edges.
    """
    h, w = image.shape[:2]
    src = image.astype(np.float64)
    alpha = src[..., 3:4] / 255.0
    pre = np.concatenate([src[..., :3] * alpha, src[..., 3:4]], axis=-1)
    fx = np.asarray(xs, dtype=np.float64) - 0.5
    fy = np.asarray(ys, dtype=np.float64) - 0.5
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    tx = (fx - x0)[..., None]
    ty = (fy - y0)[..., None]
    out = np.zeros(fx.shape + (4,))
    for dy, wy in ((0, 1 - ty), (1, ty)):
        for dx, wx in ((0, 1 - tx), (1, tx)):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            val = np.zeros(fx.shape + (4,))
            val[ok] = pre[yi[ok], xi[ok]]
            out += wx * wy * val
    a = out[..., 3:4]
    rgb = np.where(a > 0, out[..., :3] * 255.0 / np.where(a > 0, a, 1.0), 0.0)
    res = np.concatenate([rgb, a], axis=-1)
    return np.clip(np.floor(res + 0.5), 0, 255).astype(np.uint8)


def warp_image(image, out_w, out_h, inverse, origin=(0.0, 0.0)):
    """Pull ``image`` into an ``out_w`` x ``out_h`` grid.

    Output pixel (c, r) has center ``origin + (c + 0.5, r + 0.5)`` in the
    destination frame; ``inverse`` maps destination points to source points.
    """
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    pts = np.column_stack([xs.ravel() + 0.5 + origin[0], ys.ravel() + 0.5 + origin[1]])
    src = inverse.apply(pts)
    return sample_bilinear(image, src[:, 0], src[:, 1]).reshape(out_h, out_w, 4)


def convex_hull(points):
    """Counter-clockwise hull (monotone chain)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64))))
    if len(pts) < 3:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def polygon_region(poly, xs, ys, margin):
    """Points inside the convex polygon ``poly`` or within ``margin`` of its boundary."""
    n = len(poly)
    inside = np.ones(xs.shape, dtype=bool)
    dist = np.full(xs.shape, np.inf)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        ex, ey = x2 - x1, y2 - y1
        inside &= (ex * (ys - y1) - ey * (xs - x1)) >= 0
        seg = ex * ex + ey * ey
        t = np.clip(((xs - x1) * ex + (ys - y1) * ey) / seg, 0, 1) if seg > 0 else 0.0
        dist = np.minimum(dist, np.hypot(xs - (x1 + t * ex), ys - (y1 + t * ey)))
    return inside | (dist <= margin)


def crop_region(points, xs, ys, margin, box=False):
    pts = np.asarray(points, dtype=np.float64)
    if box:
        lo = pts.min(axis=0) - margin
        hi = pts.max(axis=0) + margin
        return (xs >= lo[0]) & (xs <= hi[0]) & (ys >= lo[1]) & (ys <= hi[1])
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise AlignmentError("crop polygon is degenerate")
    return polygon_region(hull, xs, ys, margin)


def default_margin(canvas_size):
    return 4.0 * canvas_size / 1024.0


# -- portrait alignment ------------------------------------------------------


@dataclass
class AlignedPortrait:
    image: np.ndarray
    landmarks: LandmarkSet
    rotation_applied: float
    transform: SimilarityTransform  # input frame -> aligned frame


def eye_centers(landmarks, left="left_eye", right="right_eye"):
    try:
        return landmarks.group_points(left).mean(axis=0), landmarks.group_points(right).mean(axis=0)
    except LandmarkError as exc:
        raise AlignmentError(f"eye leveling needs both eye groups: {exc}") from None


def eye_level(image, landmarks):
    """Rotate the portrait about the eye midpoint so both eye centroids share a row.

    The output canvas grows to hold the whole rotated image; uncovered pixels are
    transparent. Eye groups are taken in image order (leftmost first) so the
    angle is well defined whichever side is called ``left``.
    """
    a, b = eye_centers(landmarks)
    if a[0] > b[0]:
        a, b = b, a
    theta = float(np.arctan2(b[1] - a[1], b[0] - a[0]))
    if abs(theta) < 1e-12:
        return AlignedPortrait(image.copy(), landmarks, 0.0, SimilarityTransform())
    mid = (a + b) / 2
    c, s = np.cos(-theta), np.sin(-theta)
    lin = np.array([[c, -s], [s, c]])
    rot = SimilarityTransform(-theta, 1.0, *(mid - lin @ mid))
    h, w = image.shape[:2]
    corners = rot.apply(np.array([(0, 0), (w, 0), (w, h), (0, h)], dtype=np.float64))
    lo = np.floor(corners.min(axis=0) + 1e-9)
    hi = np.ceil(corners.max(axis=0) - 1e-9)
    shift = SimilarityTransform(0.0, 1.0, -lo[0], -lo[1])
    full = rot.then(shift)
    out_w, out_h = int(hi[0] - lo[0]), int(hi[1] - lo[1])
    out = warp_image(image, out_w, out_h, full.inverse())
    size = max(out_w, out_h)
    return AlignedPortrait(out, landmarks.transformed(full.apply, size=size), theta, full)


def _texel_grid(layer):
    """Canvas rest-frame coordinates of every texel center of ``layer``'s rect."""
    x0, y0, x1, y1 = layer.rest_bbox
    rx, ry, rw, rh = layer.texture_rect
    ys, xs = np.mgrid[0:rh, 0:rw]
    cx = x0 + (xs + 0.5) * (x1 - x0) / rw
    cy = y0 + (ys + 0.5) * (y1 - y0) / rh
    return cx, cy


def extract_component_texture(portrait, component, rig, margin_px=None):
    """Pull one feature out of the aligned portrait into its texture rect.

    Returns ``(patch, (x, y), transform)``: the RGBA patch, its atlas origin,
    and the portrait->template similarity used.
    """
    ids = list(component.landmark_ids)
    missing = [i for i in ids if i not in portrait.landmarks.groups]
    if missing:
        raise AlignmentError(f"portrait lacks landmarks of '{component.id}': {missing[:3]}")
    src = np.array([portrait.landmarks.point(i) for i in ids])
    dst = np.array([rig.template_landmarks.point(i) for i in ids])
    t = fit_similarity(src, dst)
    margin = default_margin(rig.canvas_size) if margin_px is None else margin_px
    cx, cy = _texel_grid(component)
    pts = t.inverse().apply(np.column_stack([cx.ravel(), cy.ravel()]))
    patch = sample_bilinear(portrait.image, pts[:, 0], pts[:, 1]).reshape(cx.shape + (4,))
    keep = crop_region(dst, cx, cy, margin, box=component.id.endswith("eyebrow"))
    patch[~keep] = 0
    rx, ry, _, _ = component.texture_rect
    return patch, (rx, ry), t


def contour_transform(landmarks, rig):
    ids = rig.template_landmarks.group_ids(CONTOUR)
    missing = [i for i in ids if i not in landmarks.groups]
    if not ids or missing:
        raise AlignmentError(f"landmark group '{CONTOUR}' is absent or incomplete")
    src = np.array([landmarks.point(i) for i in ids])
    dst = np.array([rig.template_landmarks.point(i) for i in ids])
    return fit_similarity(src, dst)


def map_base_face(portrait, rig, margin_px=None):
    """Warp the whole face into the base-face rect using the contour fit.

    Pixels beyond the contour polygon (plus margin) become transparent.
    Returns ``(texture, transform)``.
    """
    t = contour_transform(portrait.landmarks, rig)
    base = rig.base_face
    cx, cy = _texel_grid(base)
    pts = t.inverse().apply(np.column_stack([cx.ravel(), cy.ravel()]))
    tex = sample_bilinear(portrait.image, pts[:, 0], pts[:, 1]).reshape(cx.shape + (4,))
    margin = default_margin(rig.canvas_size) if margin_px is None else margin_px
    keep = crop_region(rig.template_landmarks.group_points(CONTOUR), cx, cy, margin)
    tex[~keep] = 0
    return tex, t


def place_patch(atlas, patch, origin):
    out = atlas.copy()
    x, y = origin
    h, w = patch.shape[:2]
    out[y:y + h, x:x + w] = patch
    return out


def empty_like_rect(layer):
    _, _, w, h = layer.texture_rect
    return blank(w, h)
