import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toonrig.errors import ParamError, RigError
from toonrig.rig import (AXES, Gains, ParamVector, Rig, compose_geometry, displaced_landmarks, load_rig,
                         make_component, rig_from_dict, save_rig, validate_params)
from toonrig.template import default_rig

RIG = default_rig(1024)
weights = st.floats(-30, 30, allow_nan=False)


def random_params(rng, rig=RIG, limit=30.0):
    return ParamVector.from_array(rig.component_ids, rng.uniform(-limit, limit, 3 * len(rig.component_ids)))


def offsets(geo, rig=RIG):
    return {k: v - rig.layers[k].vertices for k, v in geo.items()}


def test_zero_params_reproduce_rest_bit_exact():
    geo = compose_geometry(RIG, ParamVector.zeros(RIG.component_ids))
    for lid, layer in RIG.layers.items():
        assert np.array_equal(geo[lid], layer.vertices)


def test_nose_x_full_weight_shifts_by_dx_max():
    # dx_max = 0.02 * 1024 = 20.48 px; analytic: (30/30) * dx_max
    p = ParamVector.zeros(RIG.component_ids).replace("nose", "x", 30.0)
    geo = compose_geometry(RIG, p)
    nose = RIG.component("nose")
    d = geo["nose"] - nose.vertices
    assert np.allclose(d[:, 0], nose.gains.dx_max, rtol=0, atol=1e-12)
    assert np.all(d[:, 1] == 0)
    for lid in RIG.layers:
        if lid != "nose":
            assert np.array_equal(geo[lid], RIG.layers[lid].vertices)


def test_twenty_pixel_gain_gives_exact_shift():
    c = RIG.component("nose")
    custom = make_component("nose", c.vertices, c.triangles, c.texture_rect, Gains(20.0, 20.0, 0.3),
                            c.landmark_ids)
    assert np.allclose(custom.displacement(30, 0, 0, c.vertices), [[20.0, 0.0]] * len(c.vertices))


def test_scale_axis_is_about_the_anchor():
    mouth = RIG.component("mouth")
    p = ParamVector.zeros(RIG.component_ids).replace("mouth", "scale", 15.0)
    geo = compose_geometry(RIG, p)
    expected = mouth.vertices + 0.5 * mouth.gains.s_max * (mouth.vertices - mouth.anchor)
    assert np.allclose(geo["mouth"], expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(weights, min_size=18, max_size=18), st.lists(weights, min_size=18, max_size=18))
def test_additivity(a, b):
    pa = ParamVector.from_array(RIG.component_ids, np.array(a) / 2)
    pb = ParamVector.from_array(RIG.component_ids, np.array(b) / 2)
    da, db = offsets(compose_geometry(RIG, pa)), offsets(compose_geometry(RIG, pb))
    dab = offsets(compose_geometry(RIG, pa + pb))
    for k in da:
        assert np.allclose(dab[k], da[k] + db[k], rtol=1e-9, atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(weights, min_size=18, max_size=18), st.sampled_from([0.0, 0.5, -1.0]))
def test_homogeneity(a, alpha):
    p = ParamVector.from_array(RIG.component_ids, a)
    d1 = offsets(compose_geometry(RIG, p))
    d2 = offsets(compose_geometry(RIG, p.scaled(alpha)))
    for k in d1:
        assert np.allclose(d2[k], alpha * d1[k], rtol=1e-9, atol=1e-9)


def test_homogeneity_doubling_within_range(rng):
    p = random_params(rng, limit=15.0)
    d1 = offsets(compose_geometry(RIG, p))
    d2 = offsets(compose_geometry(RIG, p.scaled(2.0)))
    for k in d1:
        assert np.allclose(d2[k], 2 * d1[k], rtol=1e-9, atol=1e-9)


def test_landmarks_move_with_their_component(rng):
    p = random_params(rng)
    moved = displaced_landmarks(RIG, p)
    for c in RIG.components:
        pts = RIG.template_landmarks.group_points(c.id)
        expect = pts + c.displacement(p[(c.id, "x")], p[(c.id, "y")], p[(c.id, "scale")], pts)
        assert np.allclose(moved.group_points(c.id), expect)
    assert np.array_equal(moved.group_points("contour"), RIG.template_landmarks.group_points("contour"))


def test_compose_rejects_out_of_range():
    with pytest.raises(ParamError):
        compose_geometry(RIG, ParamVector.zeros(RIG.component_ids).replace("nose", "x", 30.5))


# -- validation ----------------------------------------------------------------


def test_validate_zero_vector_ok():
    assert validate_params(ParamVector.zeros(RIG.component_ids), RIG) == []


def test_validate_names_out_of_range_entry():
    problems = validate_params(ParamVector.zeros(RIG.component_ids).replace("mouth", "y", 31), RIG)
    assert problems == ["out of range (mouth, y, 31, bound 30)"]


def test_validate_lists_missing_axes():
    entries = {k: v for k, v in ParamVector.zeros(RIG.component_ids).items() if k[0] != "nose"}
    problems = validate_params(ParamVector(entries), RIG)
    assert sorted(problems) == sorted(f"missing entry (nose, {a})" for a in AXES)


def test_validate_unknown_component():
    p = ParamVector.zeros(RIG.component_ids) + ParamVector({("ear", "x"): 1.0})
    assert any("unknown component" in s and "ear" in s for s in validate_params(p, RIG))


def test_param_vector_rejects_unknown_axis():
    with pytest.raises(ParamError):
        ParamVector({("nose", "z"): 0.0})


def test_param_dict_round_trip(rng):
    p = random_params(rng)
    assert ParamVector.from_dict(json.loads(json.dumps(p.to_dict()))) == p


# -- rig invariants and file format --------------------------------------------


def test_anchor_defaults_to_vertex_centroid():
    for c in RIG.components:
        assert np.allclose(c.anchor, c.vertices.mean(axis=0))


def test_save_load_round_trip(tmp_path):
    save_rig(RIG, tmp_path / "rig.json")
    assert load_rig(tmp_path / "rig.json") == RIG


def test_duplicate_component_id_is_named(tmp_path):
    d = RIG.to_dict()
    d["components"].append(dict(d["components"][0]))
    with pytest.raises(RigError, match="duplicate component id 'left_eyebrow'"):
        rig_from_dict(d)


def test_two_vertex_mesh_rejected():
    d = RIG.to_dict()
    d["components"][4]["vertices"] = d["components"][4]["vertices"][:2]
    d["components"][4]["triangles"] = []
    with pytest.raises(RigError):
        rig_from_dict(d)


def test_triangle_index_out_of_range_rejected():
    d = RIG.to_dict()
    d["components"][0]["triangles"][0] = [0, 1, 99]
    with pytest.raises(RigError, match="components"):
        rig_from_dict(d)


def test_base_face_must_be_behind():
    d = RIG.to_dict()
    d["z_order"] = d["z_order"][1:] + d["z_order"][:1]
    with pytest.raises(RigError):
        rig_from_dict(d)


def test_non_positive_gain_rejected():
    d = RIG.to_dict()
    d["components"][0]["gains"]["s_max"] = 0.0
    with pytest.raises(RigError):
        rig_from_dict(d)


def test_missing_template_landmark_rejected():
    d = RIG.to_dict()
    pts = d["template_landmarks"]["points"]
    del pts[d["components"][5]["landmark_ids"][0]]
    with pytest.raises((RigError, ValueError)):
        rig_from_dict(d)


def test_malformed_json_reports_position(tmp_path):
    (tmp_path / "bad.json").write_text('{"canvas_size": 512,\n  oops}')
    with pytest.raises(RigError, match=r"bad.json:2:"):
        load_rig(tmp_path / "bad.json")


def test_fingerprint_is_size_independent():
    assert default_rig(512).fingerprint() == RIG.fingerprint()
    assert isinstance(RIG, Rig)
