"""Deterministic software renderer for layered, texture-mapped meshes.

Images are ``uint8`` arrays of shape (H, W, 4), straight (non-premultiplied)
RGBA. Masks are ``bool`` arrays of shape (H, W). Geometry uses continuous
canvas coordinates in which pixel (col, row) covers [col, col+1) x [row, row+1)
and is sampled at its center (col + 0.5, row + 0.5).
"""
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import RasterError
from .rig import compose_geometry, displaced_landmarks

ALPHA_THRESHOLD = 8
_EDGE_EPS = 1e-9


def blank(width, height, color=(0, 0, 0, 0)):
    return np.broadcast_to(np.asarray(color, dtype=np.uint8), (height, width, 4)).copy()


def read_png(path):
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.uint8).copy()


def write_png(image, path):
    PILImage.fromarray(np.ascontiguousarray(image), "RGBA").save(path, optimize=False)


def read_mask(path):
    with PILImage.open(path) as im:
        if im.mode == "1":
            return np.asarray(im, dtype=bool).copy()
        return np.asarray(im.convert("L")) > 127


def write_mask(mask, path):
    PILImage.fromarray(np.ascontiguousarray(mask, dtype=bool)).convert("1").save(path, optimize=False)


def luminance(image):
    """Rec. 601 luma of the RGB channels."""
    rgb = image[..., :3].astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def composite_over(bottom, top):
    """Porter-Duff source-over with straight alpha, exact integer arithmetic.

    Every channel is rounded half-up from the exact rational result.
    """
    if bottom.shape != top.shape:
        raise RasterError(f"dimension mismatch: {bottom.shape} vs {top.shape}")
    at = top[..., 3:4].astype(np.int64)
    ab = bottom[..., 3:4].astype(np.int64)
    # alpha in units of 1/255**2
    wt = at * 255
    wb = ab * (255 - at)
    oa = wt + wb
    num = top[..., :3].astype(np.int64) * wt + bottom[..., :3].astype(np.int64) * wb
    safe = np.where(oa == 0, 1, oa)
    rgb = (2 * num + safe) // (2 * safe)
    alpha = (2 * oa + 255) // 510
    out = np.concatenate([rgb, alpha], axis=-1)
    out[(oa == 0)[..., 0]] = 0
    out = out.astype(np.uint8)
    clear = top[..., 3] == 0
    out[clear] = bottom[clear]
    solid = top[..., 3] == 255
    out[solid] = top[solid]
    return out


def _check_atlas(rig, atlas, layer_ids):
    h, w = atlas.shape[:2]
    layers = rig.layers
    for lid in layer_ids:
        x, y, rw, rh = layers[lid].texture_rect
        if x + rw > w or y + rh > h:
            raise RasterError(f"texture_rect of '{lid}' {[x, y, rw, rh]} exceeds atlas {w}x{h}")


def _sample_bilinear_texture(atlas, u, v, rect):
    x0, y0, rw, rh = rect
    # clamp to the rect so neighbouring atlas regions never bleed in
    fu = np.clip(u - 0.5, x0, x0 + rw - 1)
    fv = np.clip(v - 0.5, y0, y0 + rh - 1)
    iu = np.floor(fu).astype(np.int64)
    iv = np.floor(fv).astype(np.int64)
    iu1 = np.minimum(iu + 1, x0 + rw - 1)
    iv1 = np.minimum(iv + 1, y0 + rh - 1)
    tu = (fu - iu)[:, None]
    tv = (fv - iv)[:, None]
    src = atlas.astype(np.float64)
    a = src[iv, iu]
    b = src[iv, iu1]
    c = src[iv1, iu]
    d = src[iv1, iu1]
    out = (a * (1 - tu) + b * tu) * (1 - tv) + (c * (1 - tu) + d * tu) * tv
    return np.floor(out + 0.5).astype(np.uint8)


def rasterize_layer(layer, positions, atlas, size, sampling="nearest"):
    """Draw one layer into a fresh transparent buffer.

    Later triangles overwrite earlier ones; no blending happens inside a layer.
    """
    buf = np.zeros((size, size, 4), dtype=np.uint8)
    uv = layer.uv()
    rx, ry, rw, rh = layer.texture_rect
    for tri in layer.triangles:
        p = positions[tri]
        t = uv[tri]
        x_lo = max(int(np.floor(p[:, 0].min() - 0.5)), 0)
        x_hi = min(int(np.ceil(p[:, 0].max() - 0.5)), size - 1)
        y_lo = max(int(np.floor(p[:, 1].min() - 0.5)), 0)
        y_hi = min(int(np.ceil(p[:, 1].max() - 0.5)), size - 1)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        (ax, ay), (bx, by), (cx, cy) = p
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        ys, xs = np.mgrid[y_lo:y_hi + 1, x_lo:x_hi + 1]
        px = xs.ravel() + 0.5
        py = ys.ravel() + 0.5
        l0 = ((bx - px) * (cy - py) - (by - py) * (cx - px)) / area
        l1 = ((cx - px) * (ay - py) - (cy - py) * (ax - px)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= -_EDGE_EPS) & (l1 >= -_EDGE_EPS) & (l2 >= -_EDGE_EPS)
        if not inside.any():
            continue
        l0, l1, l2 = l0[inside], l1[inside], l2[inside]
        u = l0 * t[0, 0] + l1 * t[1, 0] + l2 * t[2, 0]
        v = l0 * t[0, 1] + l1 * t[1, 1] + l2 * t[2, 1]
        if sampling == "nearest":
            iu = np.clip(np.floor(u).astype(np.int64), rx, rx + rw - 1)
            iv = np.clip(np.floor(v).astype(np.int64), ry, ry + rh - 1)
            texels = atlas[iv, iu]
        elif sampling == "bilinear":
            texels = _sample_bilinear_texture(atlas, u, v, layer.texture_rect)
        else:
            raise ValueError(f"unknown sampling mode '{sampling}'")
        buf[ys.ravel()[inside], xs.ravel()[inside]] = texels
    return buf


def render_geometry(rig, atlas, geometry, layer_filter=None, sampling="nearest"):
    """Composite layers back-to-front using explicit deformed vertex positions."""
    ids = [i for i in rig.z_order if layer_filter is None or i in layer_filter]
    _check_atlas(rig, atlas, ids)
    size = rig.canvas_size
    canvas = blank(size, size)
    layers = rig.layers
    for lid in ids:
        buf = rasterize_layer(layers[lid], geometry[lid], atlas, size, sampling)
        hit = buf[..., 3] > 0
        rows = np.flatnonzero(hit.any(axis=1))
        if rows.size == 0:
            continue
        cols = np.flatnonzero(hit.any(axis=0))
        win = np.s_[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        canvas[win] = composite_over(canvas[win], buf[win])
    return canvas


def render(rig, atlas, params, layer_filter=None, sampling="nearest"):
    if layer_filter is not None:
        unknown = set(layer_filter) - set(rig.layers)
        if unknown:
            raise RasterError(f"unknown layers in filter: {sorted(unknown)}")
    return render_geometry(rig, atlas, compose_geometry(rig, params), layer_filter, sampling)


def mask_from_geometry(rig, atlas, geometry, selection, threshold=ALPHA_THRESHOLD):
    if not selection:
        raise RasterError("empty layer selection")
    unknown = set(selection) - set(rig.layers)
    if unknown:
        raise RasterError(f"unknown layers in selection: {sorted(unknown)}")
    _check_atlas(rig, atlas, selection)
    size = rig.canvas_size
    mask = np.zeros((size, size), dtype=bool)
    layers = rig.layers
    for lid in rig.z_order:
        if lid in selection:
            buf = rasterize_layer(layers[lid], geometry[lid], atlas, size)
            mask |= buf[..., 3] > threshold
    return mask


def render_mask(rig, atlas, params, selection, threshold=ALPHA_THRESHOLD):
    """Pixels where some selected layer has source alpha above ``threshold`` (0..255)."""
    return mask_from_geometry(rig, atlas, compose_geometry(rig, params), selection, threshold)


def default_marker_radius(canvas_size):
    """2 px at 1024, proportional above, never below 2 px."""
    return max(2.0, 2.0 * canvas_size / 1024.0)


def draw_discs(image, centers, radius, color=(255, 255, 255, 255)):
    h, w = image.shape[:2]
    r2 = radius * radius
    for cx, cy in centers:
        x_lo = max(int(np.floor(cx - radius - 0.5)), 0)
        x_hi = min(int(np.ceil(cx + radius - 0.5)), w - 1)
        y_lo = max(int(np.floor(cy - radius - 0.5)), 0)
        y_hi = min(int(np.ceil(cy + radius - 0.5)), h - 1)
        if x_hi < x_lo or y_hi < y_lo:
            continue
        ys, xs = np.ogrid[y_lo:y_hi + 1, x_lo:x_hi + 1]
        inside = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r2
        image[y_lo:y_hi + 1, x_lo:x_hi + 1][inside] = color
    return image


def render_markers(rig, params, landmark_subset=None, radius=None):
    """Black canvas with a white disc at every displaced landmark.

    Feature textures are never drawn, so the dots are the only bright pixels.
    """
    ids = rig.template_landmarks.ids if landmark_subset is None else tuple(landmark_subset)
    unknown = [i for i in ids if i not in rig.template_landmarks.groups]
    if unknown:
        raise RasterError(f"unknown landmark ids: {unknown[:5]}")
    pts = displaced_landmarks(rig, params, ids).xy
    size = rig.canvas_size
    img = blank(size, size, (0, 0, 0, 255))
    return draw_discs(img, pts, default_marker_radius(size) if radius is None else radius)


def save_frames(frames, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(frames):
        p = directory / f"frame_{k:05d}.png"
        write_png(frame, p)
        paths.append(p)
    return paths
