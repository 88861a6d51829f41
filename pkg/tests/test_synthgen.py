import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toonrig.errors import AssociationError, DatasetError
from toonrig.landmarks import LandmarkSet
from toonrig.raster import blank, draw_discs, render_markers
from toonrig.rig import ParamVector, displaced_landmarks
from toonrig.synthgen import (Blob, associate_landmarks, build_dataset, detect_blobs, load_dataset,
                              recover_landmarks, sample_params, save_dataset)


def black(w=256, h=256):
    return blank(w, h, (0, 0, 0, 255))


def test_sampling_is_deterministic(rig512):
    a = sample_params(rig512, 3, seed=7)
    assert a == sample_params(rig512, 3, seed=7)
    assert a != sample_params(rig512, 3, seed=8)


def test_sampling_statistics(rig512):
    v = np.array([p.to_array(rig512.component_ids) for p in sample_params(rig512, 10000, seed=0)])
    assert np.all(np.abs(v.mean(axis=0)) <= 1.0)
    assert v.min() < -27 and v.max() > 27
    assert np.abs(v).max() <= 30


def test_sampling_rejects_zero(rig512):
    with pytest.raises(ValueError):
        sample_params(rig512, 0, seed=1)


def test_square_blob_centroid_and_area():
    img = black()
    img[199:202, 99:102, :3] = 255
    assert detect_blobs(img) == [Blob((100.0, 200.0), 9)]


def test_black_image_has_no_blobs():
    assert detect_blobs(black()) == []


def test_two_discs_two_blobs():
    img = draw_discs(black(), [(100.0, 100.0), (150.0, 100.0)], 3.0)
    blobs = detect_blobs(img)
    assert len(blobs) == 2
    assert sorted(round(b.centroid[0] + 0.5) for b in blobs) == [100, 150]


def test_diagonal_pixels_join_under_eight_connectivity():
    img = black()
    img[10, 10, :3] = img[11, 11, :3] = 255
    assert len(detect_blobs(img)) == 1


def test_blobs_sorted_largest_first():
    img = draw_discs(black(), [(50.0, 50.0), (150.0, 150.0)], 2.0)
    img = draw_discs(img, [(200.0, 40.0)], 5.0)
    areas = [b.area for b in detect_blobs(img)]
    assert areas == sorted(areas, reverse=True)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 40)), min_size=1, max_size=25))
def test_centroid_matches_pixel_enumeration(cells):
    img = black(48, 48)
    for x, y in cells:
        img[y, x, :3] = 255
    blobs = detect_blobs(img)
    assert sum(b.area for b in blobs) == len(set(cells))
    # overall mean of all lit pixels equals the area-weighted mean of centroids
    pts = np.array(sorted(set(cells)), dtype=float)
    total = sum(np.array(b.centroid) * b.area for b in blobs) / len(pts)
    assert np.allclose(total, pts.mean(axis=0))


def small_template(rng, n=6):
    ids = tuple(f"p{i}" for i in range(n))
    xy = rng.uniform(20, 230, (n, 2))
    return LandmarkSet(ids, xy, {i: "g" for i in ids}, 256)


def brute_force(blob_xy, template_xy):
    best = None
    for perm in itertools.permutations(range(len(blob_xy))):
        cost = sum(np.sum((template_xy[i] - blob_xy[j]) ** 2) for i, j in enumerate(perm))
        if best is None or cost < best[0]:
            best = (cost, perm)
    return best[1]


def test_identity_assignment(rng):
    t = small_template(rng)
    blobs = [Blob(tuple(p - 0.5), 9) for p in t.xy[::-1]]
    assert np.allclose(associate_landmarks(blobs, t).xy, t.xy)


@pytest.mark.parametrize("seed", range(10))
def test_shifted_assignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    t = small_template(rng)
    moved = t.xy + [5.0, 3.0] + rng.normal(0, 4, t.xy.shape)
    order = rng.permutation(len(moved))
    blobs = [Blob(tuple(moved[k] - 0.5), 9) for k in order]
    got = associate_landmarks(blobs, t).xy
    perm = brute_force(moved[order], t.xy)
    assert np.allclose(got, moved[order][list(perm)])


def test_count_mismatch(rig512):
    t = rig512.template_landmarks
    blobs = [Blob(tuple(p - 0.5), 9) for p in t.xy[:-1]]
    with pytest.raises(AssociationError) as exc:
        associate_landmarks(blobs, t)
    assert exc.value.n_blobs == len(t) - 1 and exc.value.n_landmarks == len(t)


def test_recover_neutral(rig512):
    got = recover_landmarks(rig512, ParamVector.zeros(rig512.component_ids))
    assert np.abs(got.xy - rig512.template_landmarks.xy).max() <= 0.7 / 2


def test_build_dataset_is_accurate(rig512):
    ds = build_dataset(rig512, 100, seed=3)
    assert len(ds) == 100 and ds.dropped == 0
    for lm, p in ds.samples:
        exact = displaced_landmarks(rig512, p).normalized
        assert np.abs(lm - exact).max() * 512 <= 0.35 + 1e-3


def test_dataset_files_are_byte_identical(rig512, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_dataset(build_dataset(rig512, 40, seed=5), a)
    save_dataset(build_dataset(rig512, 40, seed=5, workers=2, chunk=10), b)
    assert a.read_bytes() == b.read_bytes()
    assert load_dataset(a) == build_dataset(rig512, 40, seed=5)


def test_corrupt_dataset(rig512, tmp_path):
    p = tmp_path / "d.bin"
    save_dataset(build_dataset(rig512, 5, seed=1), p)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DatasetError):
        load_dataset(p)
    p.write_bytes(b"garbage" * 20)
    with pytest.raises(DatasetError):
        load_dataset(p)


def test_marker_render_has_no_feature_pixels(rig512):
    img = render_markers(rig512, ParamVector.zeros(rig512.component_ids))
    assert set(np.unique(img[..., 0])) <= {0, 255}
