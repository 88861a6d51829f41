from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from toonrig.errors import RasterError
from toonrig.raster import (blank, composite_over, default_marker_radius, rasterize_layer, read_mask, read_png,
                            render, render_markers, render_mask, save_frames, write_mask, write_png)
from toonrig.rig import ParamVector, displaced_landmarks, make_layer
from toonrig.synthgen import detect_blobs

channel = st.integers(0, 255)
pixel = st.tuples(channel, channel, channel, channel)


def _round_half_up(q):
    return int(Fraction(2 * q.numerator + q.denominator, 2 * q.denominator).__floor__())


def over_oracle(bottom, top):
    """Straight-alpha source-over in exact rationals."""
    at, ab = Fraction(top[3], 255), Fraction(bottom[3], 255)
    ao = at + ab * (1 - at)
    if ao == 0:
        return (0, 0, 0, 0)
    rgb = [_round_half_up((t * at + b * ab * (1 - at)) / ao) for t, b in zip(top[:3], bottom[:3])]
    return tuple(rgb) + (_round_half_up(ao * 255),)


@settings(max_examples=300, deadline=None)
@given(pixel, pixel)
def test_over_matches_rational_oracle(b, t):
    out = composite_over(np.array([[b]], np.uint8), np.array([[t]], np.uint8))[0, 0]
    if t[3] == 0:
        assert tuple(out) == b
    elif t[3] == 255:
        assert tuple(out) == t
    else:
        assert tuple(out) == over_oracle(b, t)


def test_half_red_over_black():
    out = composite_over(np.array([[[0, 0, 0, 255]]], np.uint8), np.array([[[255, 0, 0, 127]]], np.uint8))
    assert tuple(out[0, 0]) == (127, 0, 0, 255)


def test_transparent_top_keeps_bottom(rng):
    b = rng.integers(0, 256, (8, 8, 4), dtype=np.uint8)
    t = rng.integers(0, 256, (8, 8, 4), dtype=np.uint8)
    t[..., 3] = 0
    assert np.array_equal(composite_over(b, t), b)
    t[..., 3] = 255
    assert np.array_equal(composite_over(b, t), t)


def test_over_dimension_mismatch():
    with pytest.raises(RasterError):
        composite_over(blank(4, 4), blank(5, 4))


def test_base_face_identity(rig512, atlas512):
    zero = ParamVector.zeros(rig512.component_ids)
    img = render(rig512, atlas512, zero, {"base_face"})
    x, y, w, h = rig512.base_face.texture_rect
    assert np.array_equal(img, atlas512[y:y + h, x:x + w])


def test_render_is_deterministic(rig512, atlas512):
    zero = ParamVector.zeros(rig512.component_ids)
    assert np.array_equal(render(rig512, atlas512, zero), render(rig512, atlas512, zero))


def test_eye_shift_changes_only_eye_footprints(rig512, atlas512):
    zero = ParamVector.zeros(rig512.component_ids)
    moved = zero.replace("left_eye", "x", 30)
    diff = np.any(render(rig512, atlas512, zero) != render(rig512, atlas512, moved), axis=-1)
    feet = (render_mask(rig512, atlas512, zero, {"left_eye"}, threshold=0)
            | render_mask(rig512, atlas512, moved, {"left_eye"}, threshold=0))
    assert diff.any()
    assert not (diff & ~feet).any()


def test_mask_of_nose_at_rest_is_alpha_footprint(rig512, atlas512):
    zero = ParamVector.zeros(rig512.component_ids)
    mask = render_mask(rig512, atlas512, zero, {"nose"})
    nose = rig512.component("nose")
    x0, y0, x1, y1 = (int(round(v)) for v in nose.rest_bbox)
    rx, ry, rw, rh = nose.texture_rect
    # the default nose mesh maps its texture 1:1 at rest
    assert (x1 - x0, y1 - y0) == (rw, rh)
    expect = np.zeros_like(mask)
    expect[y0:y1, x0:x1] = atlas512[ry:ry + rh, rx:rx + rw, 3] > 8
    assert np.array_equal(mask, expect)


def test_mask_union(rig512, atlas512, rng):
    p = ParamVector.from_array(rig512.component_ids, rng.uniform(-30, 30, 18))
    a = render_mask(rig512, atlas512, p, {"nose"})
    b = render_mask(rig512, atlas512, p, {"mouth", "left_eye"})
    assert np.array_equal(render_mask(rig512, atlas512, p, {"nose", "mouth", "left_eye"}), a | b)


def test_transparent_layer_gives_empty_mask(rig512, atlas512):
    atlas = atlas512.copy()
    x, y, w, h = rig512.component("mouth").texture_rect
    atlas[y:y + h, x:x + w, 3] = 0
    assert not render_mask(rig512, atlas, ParamVector.zeros(rig512.component_ids), {"mouth"}).any()


def test_empty_selection_is_an_error(rig512, atlas512):
    with pytest.raises(RasterError):
        render_mask(rig512, atlas512, ParamVector.zeros(rig512.component_ids), set())


def test_texture_rect_outside_atlas(rig512, atlas512):
    with pytest.raises(RasterError):
        render(rig512, atlas512[:, :600], ParamVector.zeros(rig512.component_ids))


def test_scaled_quad_uses_nearest_texel():
    layer = make_layer("q", [(0, 0), (2, 0), (2, 2), (0, 2)], [(0, 1, 2), (0, 2, 3)], (0, 0, 2, 2))
    atlas = np.zeros((2, 2, 4), np.uint8)
    atlas[..., 3] = 255
    atlas[0, 0, 0] = atlas[0, 1, 1] = atlas[1, 0, 2] = 255
    out = rasterize_layer(layer, layer.vertices * 2, atlas, 4)
    assert np.array_equal(out[::2, ::2], atlas)
    assert np.array_equal(out[1::2, 1::2], atlas)


def test_markers_at_rest_are_at_template(rig512):
    img = render_markers(rig512, ParamVector.zeros(rig512.component_ids))
    blobs = detect_blobs(img)
    assert len(blobs) == len(rig512.template_landmarks)
    got = np.array(sorted((b.centroid[0] + 0.5, b.centroid[1] + 0.5) for b in blobs))
    want = np.array(sorted(map(tuple, rig512.template_landmarks.xy)))
    assert np.abs(got - want).max() < 0.35


def test_mouth_markers_follow_dy_max(rig1024):
    p = ParamVector.zeros(rig1024.component_ids).replace("mouth", "y", 30)
    ids = rig1024.template_landmarks.group_ids("mouth")
    img = render_markers(rig1024, p, ids)
    dy = rig1024.component("mouth").gains.dy_max
    want = rig1024.template_landmarks.subset(ids).xy + [0, dy]
    got = np.array([(b.centroid[0] + 0.5, b.centroid[1] + 0.5) for b in detect_blobs(img)])
    for w in want:
        assert np.hypot(*(got - w).T).min() < 0.35


def test_disjoint_markers_give_one_component_each(rig1024, rng):
    checked = 0
    for _ in range(10):
        p = ParamVector.from_array(rig1024.component_ids, rng.uniform(-30, 30, 18))
        img = render_markers(rig1024, p)
        xy = displaced_landmarks(rig1024, p).xy
        gaps = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
        np.fill_diagonal(gaps, np.inf)
        if gaps.min() <= 2 * default_marker_radius(1024) + 1:
            continue
        _, count = ndimage.label(img[..., 0] > 127, structure=np.ones((3, 3)))
        assert count == len(xy)
        checked += 1
    assert checked


def test_marker_radius_floor():
    assert default_marker_radius(512) == 2.0
    assert default_marker_radius(2048) == 4.0


def test_png_and_mask_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (17, 23, 4), dtype=np.uint8)
    write_png(img, tmp_path / "a.png")
    assert np.array_equal(read_png(tmp_path / "a.png"), img)
    mask = rng.random((17, 23)) > 0.5
    write_mask(mask, tmp_path / "m.png")
    assert np.array_equal(read_mask(tmp_path / "m.png"), mask)


def test_save_frames_naming(tmp_path):
    paths = save_frames([blank(4, 4)] * 3, tmp_path / "f")
    assert [p.name for p in paths] == ["frame_00000.png", "frame_00001.png", "frame_00002.png"]
