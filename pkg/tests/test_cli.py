import argparse
import json

import numpy as np
import pytest

from toonrig import cli
from toonrig.assembly import load_package
from toonrig.raster import read_png


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


# -- option precedence -------------------------------------------------------------


def ns(config=None, **flags):
    return argparse.Namespace(config=str(config) if config else None, **flags)


def test_precedence_order(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"samples": 20, "epochs": 7}))
    monkeypatch.delenv("TOONRIG_SAMPLES", raising=False)
    monkeypatch.delenv("TOONRIG_EPOCHS", raising=False)
    names = ["samples", "epochs", "patience"]
    assert vars(cli.resolve(ns(samples=None, epochs=None, patience=None), names)) == {
        "config": None, "samples": 10000, "epochs": 500, "patience": 30}
    a = cli.resolve(ns(cfg, samples=None, epochs=None, patience=None), names)
    assert (a.samples, a.epochs, a.patience) == (20, 7, 30)
    monkeypatch.setenv("TOONRIG_SAMPLES", "33")
    a = cli.resolve(ns(cfg, samples=None, epochs=None, patience=None), names)
    assert (a.samples, a.epochs) == (33, 7)
    a = cli.resolve(ns(cfg, samples=44, epochs=None, patience=None), names)
    assert (a.samples, a.epochs) == (44, 7)


def test_bad_env_value(monkeypatch):
    monkeypatch.setenv("TOONRIG_EPOCHS", "many")
    with pytest.raises(cli.UsageError, match="TOONRIG_EPOCHS"):
        cli.resolve(ns(epochs=None), ["epochs"])


def test_bad_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"epochs":\n  }')
    with pytest.raises(cli.UsageError, match=r"c.json:2:"):
        cli.resolve(ns(cfg, epochs=None), ["epochs"])


def test_env_applies_end_to_end(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("TOONRIG_SAMPLES", "6")
    monkeypatch.setenv("TOONRIG_SIZE", "512")
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "d.bin", "--seed", 1)
    assert code == 0 and last_json(out)["samples"] + last_json(out)["dropped"] == 6


# -- errors ------------------------------------------------------------------------


def test_missing_seed_is_usage_error(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("TOONRIG_SEED", raising=False)
    code, _, err = run(capsys, "synth", "--out", tmp_path / "d.bin", "--samples", 4)
    assert code == 2
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["exit_code"] == 2 and "seed" in payload["message"]


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(capsys, "template", "--bogus")
    assert code == 2 and json.loads(err)["error"] == "UsageError"


def test_missing_file_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "verify", "--package", tmp_path / "nowhere")
    assert code != 0 and json.loads(err)["exit_code"] == code


def test_nonpositive_size(tmp_path, capsys):
    code, _, _ = run(capsys, "template", "--out", tmp_path, "--size", 0)
    assert code == 2


# -- pipeline ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted_dir(tmp_path_factory, trained):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["fixture", "--out", str(d / "fx"), "--seed", "3", "--rotate", "4"]) == 0
    assert cli.main(["fit", "--portrait", str(d / "fx/portrait.png"), "--landmarks", str(d / "fx/landmarks.json"),
                     "--model", str(trained["model_path"]), "--hair-mask", str(d / "fx/hair_mask.png"),
                     "--out", str(d / "pkg"), "--report-dir", str(d / "report")]) == 0
    return d


def test_template_command(tmp_path, capsys):
    code, out, _ = run(capsys, "template", "--out", tmp_path, "--size", 256)
    assert code == 0
    assert (tmp_path / "rig.json").exists() and read_png(tmp_path / "atlas.png").shape[2] == 4
    assert len(last_json(out)["fingerprint"]) > 0


def test_fixture_files(fitted_dir):
    names = {p.name for p in (fitted_dir / "fx").iterdir()}
    assert names == {"portrait.png", "landmarks.json", "truth_params.json", "hair_mask.png"}


def test_fit_writes_package_and_reports(fitted_dir):
    pkg = load_package(fitted_dir / "pkg")
    assert "hair" in pkg.rig.layers
    truth = json.loads((fitted_dir / "fx/truth_params.json").read_text())
    fitted = pkg.fitted_params.to_dict()
    err = [abs(fitted[c][k] - truth[c][k]) for c in truth for k in truth[c]]
    assert np.mean(err) < 2.0
    report = {p.name for p in (fitted_dir / "report").iterdir()}
    assert {"timing.csv", "timing.png", "params.csv"} <= report
    stages = [line.split(",")[0] for line in (fitted_dir / "report/timing.csv").read_text().splitlines()[1:]]
    assert stages[:4] == ["load", "load_model", "align", "extract"] and stages[-1] == "total"


def test_verify_ok_and_tampered(fitted_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--package", fitted_dir / "pkg")
    assert code == 0 and "FAIL" not in out
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(fitted_dir / "pkg", bad)
    raw = bytearray((bad / "params.json").read_bytes())
    raw[-2] ^= 0x01
    (bad / "params.json").write_bytes(bytes(raw))
    code, out, err = run(capsys, "verify", "--package", bad)
    assert code != 0
    assert "FAIL hash:params.json" in out and "params.json" in err


def test_render_command(fitted_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "render", "--package", fitted_dir / "pkg", "--out", tmp_path / "r.png")
    assert code == 0
    assert read_png(tmp_path / "r.png").shape == (512, 512, 4)


def test_animate_command(fitted_dir, tmp_path, capsys):
    tl = tmp_path / "t.json"
    tl.write_text(json.dumps([{"time": k / 4, "channels": {"jawOpen": k / 3}} for k in range(4)]))
    code, out, _ = run(capsys, "animate", "--package", fitted_dir / "pkg", "--timeline", tl, "--out", tmp_path / "f")
    assert code == 0 and last_json(out)["frames"] == 4
    assert sorted(p.name for p in (tmp_path / "f").iterdir()) == [f"frame_{k:05d}.png" for k in range(4)]
    run(capsys, "render", "--package", fitted_dir / "pkg", "--out", tmp_path / "r.png")
    assert np.array_equal(read_png(tmp_path / "f/frame_00000.png"), read_png(tmp_path / "r.png"))


def test_animate_bad_mapping(fitted_dir, tmp_path, capsys):
    tl = tmp_path / "t.json"
    tl.write_text(json.dumps([{"time": 0, "channels": {}}]))
    m = tmp_path / "m.json"
    m.write_text(json.dumps({"rules": [{"channel": "jawOpen", "layer": "ear", "mode": "scale_y", "gain": 1}]}))
    code, _, err = run(capsys, "animate", "--package", fitted_dir / "pkg", "--timeline", tl,
                       "--mapping", m, "--out", tmp_path / "f")
    assert code != 0 and "rules[0]" in json.loads(err)["message"]
