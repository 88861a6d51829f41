"""Package assembly: texture transfer, weight fitting, base-face repaint, hair, I/O."""
import datetime as _dt
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__
from .align import (AlignedPortrait, SimilarityTransform, contour_transform, extract_component_texture,
                    eye_level, map_base_face, place_patch, warp_image)
from .errors import AlignmentError, HashMismatchError, LandmarkError, PackageError, RigError
from .inpaint import DEFAULT_MAX_ITER, DEFAULT_TOL, inpaint
from .landmarks import CONTOUR
from .raster import (ALPHA_THRESHOLD, blank, read_mask, read_png, render, render_mask, write_mask,
                     write_png)
from .regressor import predict_params
from .rig import ParamVector, load_rig, make_layer, save_rig, validate_params

PACKAGE_FILES = ("rig.json", "atlas.png", "params.json", "repaint_mask.png")
HAIR = "hair"
DEFAULT_DILATION = 3


@dataclass(eq=False)
class ModelPackage:
    rig: object
    atlas: np.ndarray
    fitted_params: ParamVector = None
    repaint_mask: np.ndarray = None
    provenance: dict = field(default_factory=dict)
    # alignment state; not serialized
    portrait: AlignedPortrait = None
    contour: SimilarityTransform = None

    def __eq__(self, other):
        if not isinstance(other, ModelPackage):
            return NotImplemented
        masks_equal = (self.repaint_mask is None and other.repaint_mask is None) or (
            self.repaint_mask is not None and other.repaint_mask is not None
            and np.array_equal(self.repaint_mask, other.repaint_mask))
        return (self.rig == other.rig and np.array_equal(self.atlas, other.atlas)
                and self.fitted_params == other.fitted_params and masks_equal
                and self.provenance == other.provenance)


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    return sha256_bytes(Path(path).read_bytes())


def build_from_portrait(rig, template_atlas, image, landmarks, margin_px=None):
    """Level the eyes, then transfer every feature and the base face into a copy of the atlas."""
    return transfer_textures(rig, template_atlas, eye_level(image, landmarks), margin_px)


def transfer_textures(rig, template_atlas, portrait, margin_px=None):
    base_tex, contour = map_base_face(portrait, rig, margin_px)
    atlas = place_patch(template_atlas, base_tex, rig.base_face.texture_rect[:2])
    for c in rig.components:
        patch, origin, _ = extract_component_texture(portrait, c, rig, margin_px)
        atlas = place_patch(atlas, patch, origin)
    return ModelPackage(rig=rig, atlas=atlas, portrait=portrait, contour=contour)


def mapped_portrait_landmarks(package):
    """Portrait landmarks carried into the template frame by the contour fit.

    These are the feature positions in the base-face-only render.
    """
    if package.portrait is None:
        raise AlignmentError("package has no aligned portrait")
    contour = package.contour or contour_transform(package.portrait.landmarks, package.rig)
    return package.portrait.landmarks.transformed(contour.apply, size=package.rig.canvas_size)


def fit_portrait(package, model, landmark_provider=None):
    """Predict weights from the landmarks of the base-face-only render.

    ``landmark_provider(package, render)`` returns the landmarks of that render
    in template order; by default they come from the aligned portrait mapped
    through the contour transform. Stores and returns the weights.
    """
    rig = package.rig
    base_render = render(rig, package.atlas, ParamVector.zeros(rig.component_ids), {rig.base_face.id})
    provider = landmark_provider or (lambda pkg, _img: mapped_portrait_landmarks(pkg))
    found = provider(package, base_render)
    needed = [CONTOUR] + list(rig.component_ids)
    have = set(found.groups.values())
    absent = [g for g in needed if g not in have]
    if absent:
        raise LandmarkError(f"landmark group '{absent[0]}' is absent")
    try:
        ordered = found.subset(rig.template_landmarks.ids)
    except ValueError:
        missing = [i for i in rig.template_landmarks.ids if i not in found.groups]
        raise LandmarkError(f"landmark group '{rig.template_landmarks.groups[missing[0]]}' is incomplete") from None
    ordered = ordered.with_xy(ordered.xy * (rig.canvas_size / ordered.size), size=rig.canvas_size)
    params = predict_params(model, ordered)
    package.fitted_params = params
    return params


def disc(radius):
    r = int(radius)
    ys, xs = np.mgrid[-r:r + 1, -r:r + 1]
    return xs * xs + ys * ys <= radius * radius


def dilate(mask, radius):
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=disc(radius))


def repaint_mask(rig, atlas, params, dilation_px=DEFAULT_DILATION, threshold=ALPHA_THRESHOLD):
    """Feature-layer coverage at ``params``, grown by a disc of ``dilation_px``."""
    return dilate(render_mask(rig, atlas, params, set(rig.feature_layer_ids), threshold), dilation_px)


def canvas_to_texture(mask, layer):
    """Resample a canvas-space mask into ``layer``'s texture rect (nearest)."""
    x0, y0, x1, y1 = layer.rest_bbox
    _, _, rw, rh = layer.texture_rect
    ys, xs = np.mgrid[0:rh, 0:rw]
    cx = np.floor(x0 + (xs + 0.5) * (x1 - x0) / rw).astype(np.int64)
    cy = np.floor(y0 + (ys + 0.5) * (y1 - y0) / rh).astype(np.int64)
    h, w = mask.shape
    ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
    out = np.zeros((rh, rw), dtype=bool)
    out[ok] = mask[cy[ok], cx[ok]]
    return out


def repaint_base_face(package, dilation_px=DEFAULT_DILATION, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Fill the base face under every (grown) feature footprint with harmonic color."""
    if package.fitted_params is None:
        raise PackageError("repaint needs fitted parameters")
    rig = package.rig
    canvas_mask = repaint_mask(rig, package.atlas, package.fitted_params, dilation_px)
    tex_mask = canvas_to_texture(canvas_mask, rig.base_face)
    x, y, w, h = rig.base_face.texture_rect
    atlas = package.atlas.copy()
    atlas[y:y + h, x:x + w] = inpaint(atlas[y:y + h, x:x + w], tex_mask, tol, max_iter)
    package.atlas = atlas
    package.repaint_mask = tex_mask
    return package


def to_aligned_frame(package, image):
    """Carry an image from the input portrait frame into the eye-leveled frame."""
    p = package.portrait
    if p is None:
        raise AlignmentError("package has no aligned portrait")
    h, w = p.image.shape[:2]
    if p.rotation_applied == 0.0:
        return image.copy()
    return warp_image(image, w, h, p.transform.inverse())


def mask_to_rgba(mask, color_image=None, color=(255, 255, 255)):
    h, w = mask.shape
    out = blank(w, h)
    if color_image is not None:
        out[..., :3] = color_image[..., :3]
    else:
        out[..., :3] = color
    out[..., 3] = np.where(mask, 255, 0)
    return out


def integrate_hair(package, hair_image, hair_mask, z="front"):
    """Add a hair layer warped by the contour transform.

    ``hair_image`` and ``hair_mask`` must be in the aligned portrait's frame.
    ``z`` is ``"front"`` (drawn last) or ``"behind-face"`` (drawn first).
    """
    if z not in ("front", "behind-face"):
        raise ValueError(f"z must be 'front' or 'behind-face', got '{z}'")
    if package.portrait is not None:
        frame = package.portrait.image.shape[:2]
        if hair_image.shape[:2] != frame or hair_mask.shape != frame:
            raise AlignmentError(f"hair inputs {hair_image.shape[:2]}/{hair_mask.shape} do not match portrait frame {frame}")
    if package.contour is None:
        raise AlignmentError("package has no contour transform")
    rig = package.rig
    s = rig.canvas_size
    layer_rgba = warp_image(mask_to_rgba(np.asarray(hair_mask, bool), hair_image), s, s, package.contour.inverse())
    brow_overlap = _hair_brow_overlap(package, layer_rgba[..., 3] > ALPHA_THRESHOLD)
    if brow_overlap:
        warnings.warn(f"hair covers {brow_overlap} px of the eyebrow boxes; supply a portrait with the hair "
                      "removed over the brows for clean eyebrow textures", stacklevel=2)
    existing = rig.layers.get(HAIR)
    if existing is not None:
        rx, ry = existing.texture_rect[:2]
        atlas = package.atlas.copy()
    else:
        h, w = package.atlas.shape[:2]
        rx, ry = w, 0
        atlas = blank(w + s, max(h, s))
        atlas[:h, :w] = package.atlas
    atlas[ry:ry + s, rx:rx + s] = layer_rgba
    quad = np.array([(0, 0), (s, 0), (s, s), (0, s)], dtype=float)
    layer = make_layer(HAIR, quad, [(0, 1, 2), (0, 2, 3)], (rx, ry, s, s))
    package.rig = rig.with_layer(layer, None if z == "front" else 0)
    package.atlas = atlas
    return package


def _hair_brow_overlap(package, hair_canvas):
    rig = package.rig
    params = package.fitted_params or ParamVector.zeros(rig.component_ids)
    total = 0
    for c in rig.components:
        if not c.id.endswith("eyebrow"):
            continue
        pts = rig.template_landmarks.group_points(c.id)
        wx, wy, ws = (params.get((c.id, a), 0.0) for a in ("x", "y", "scale"))
        pts = pts + c.displacement(wx, wy, ws, pts)
        lo = np.floor(pts.min(axis=0)).astype(int)
        hi = np.ceil(pts.max(axis=0)).astype(int)
        total += int(hair_canvas[max(lo[1], 0):hi[1], max(lo[0], 0):hi[0]].sum())
    return total


# -- persistence -------------------------------------------------------------


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    moment = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
              else _dt.datetime.now(_dt.timezone.utc))
    return moment.replace(microsecond=0).isoformat()


def save_package(package, directory):
    if package.fitted_params is None:
        raise PackageError("cannot save a package without fitted parameters")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rig(package.rig, d / "rig.json")
    write_png(package.atlas, d / "atlas.png")
    (d / "params.json").write_text(json.dumps(package.fitted_params.to_dict(), indent=1), encoding="utf-8")
    mask = package.repaint_mask
    if mask is None:
        x, y, w, h = package.rig.base_face.texture_rect
        mask = np.zeros((h, w), dtype=bool)
    write_mask(mask, d / "repaint_mask.png")
    prov = {k: v for k, v in package.provenance.items() if k != "files"}
    prov.setdefault("tool_version", __version__)
    prov.setdefault("created", _timestamp())
    prov["files"] = {name: sha256_file(d / name) for name in PACKAGE_FILES}
    (d / "provenance.json").write_text(json.dumps(prov, indent=1, sort_keys=True), encoding="utf-8")
    package.provenance = prov
    return d


def _read_checked(d, name, expected):
    p = d / name
    if not p.exists():
        raise PackageError(f"package file missing: {name}")
    data = p.read_bytes()
    if expected is not None:
        actual = sha256_bytes(data)
        if actual != expected:
            raise HashMismatchError(name, expected, actual)
    return p


def load_package(directory, verify=True):
    d = Path(directory)
    prov_path = d / "provenance.json"
    if not prov_path.exists():
        raise PackageError("package file missing: provenance.json")
    prov = json.loads(prov_path.read_text(encoding="utf-8"))
    files = prov.get("files", {})
    paths = {name: _read_checked(d, name, files.get(name) if verify else None) for name in PACKAGE_FILES}
    rig = load_rig(paths["rig.json"])
    atlas = read_png(paths["atlas.png"])
    params = ParamVector.from_dict(json.loads(paths["params.json"].read_text(encoding="utf-8")))
    mask = read_mask(paths["repaint_mask.png"])
    return ModelPackage(rig=rig, atlas=atlas, fitted_params=params, repaint_mask=mask, provenance=prov)


def verify_package(directory):
    """Re-check hashes and invariants. Returns a list of (check, ok, detail)."""
    d = Path(directory)
    report = []
    try:
        prov = json.loads((d / "provenance.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        return [("provenance", False, "provenance.json missing")]
    files = prov.get("files", {})
    for name in PACKAGE_FILES:
        p = d / name
        if not p.exists():
            report.append((f"hash:{name}", False, "missing"))
        elif name not in files:
            report.append((f"hash:{name}", False, "no recorded hash"))
        else:
            actual = sha256_file(p)
            report.append((f"hash:{name}", actual == files[name],
                           "ok" if actual == files[name] else f"expected {files[name][:12]}, got {actual[:12]}"))
    if not all(ok for _, ok, _ in report):
        return report
    try:
        pkg = load_package(d, verify=False)
    except (RigError, PackageError, ValueError) as exc:
        return report + [("load", False, str(exc))]
    report.append(("rig", True, f"{len(pkg.rig.layers)} layers"))
    problems = validate_params(pkg.fitted_params, pkg.rig)
    report.append(("params", not problems, "; ".join(problems) or "valid"))
    h, w = pkg.atlas.shape[:2]
    bad = [l.id for l in pkg.rig.layers.values()
           if l.texture_rect[0] + l.texture_rect[2] > w or l.texture_rect[1] + l.texture_rect[3] > h]
    report.append(("atlas", not bad, f"rects outside atlas: {bad}" if bad else f"{w}x{h}"))
    x, y, bw, bh = pkg.rig.base_face.texture_rect
    if pkg.repaint_mask.shape != (bh, bw):
        report.append(("repaint", False, f"mask {pkg.repaint_mask.shape} vs base rect {(bh, bw)}"))
    else:
        worst = harmonic_residual(pkg.atlas[y:y + bh, x:x + bw], pkg.repaint_mask)
        report.append(("repaint", worst <= 1.5, f"max harmonic residual {worst:.2f}/255"))
    return report


def harmonic_residual(image, mask):
    """Largest |pixel - mean of 4-neighbours| over masked pixels, in 0..255 units."""
    if not mask.any():
        return 0.0
    v = image.astype(np.float64)
    h, w = mask.shape
    rr, cc = np.nonzero(mask)
    acc = np.zeros((len(rr), v.shape[2]))
    cnt = np.zeros((len(rr), 1))
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        r, c = rr + dr, cc + dc
        ok = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        acc[ok] += v[r[ok], c[ok]]
        cnt[ok] += 1
    return float(np.abs(v[rr, cc] - acc / cnt).max())
