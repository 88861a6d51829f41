"""Command-line driver: one subcommand per pipeline stage.

Option values are resolved as built-in defaults < ``--config`` JSON <
``TOONRIG_<NAME>`` environment variables < command-line flags.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ToonrigError, ValidationError

log = logging.getLogger("toonrig")

ENV_PREFIX = "TOONRIG_"
DEFAULTS = {
    "size": 512,
    "workers": 1,
    "seed": None,
    "samples": 10000,
    "epochs": 500,
    "batch_size": 256,
    "learning_rate": 1e-3,
    "optimizer": "adam",
    "validation_fraction": 0.1,
    "patience": 30,
    "dilation": 3,
    "alpha_threshold": 8,
    "hair_z": "front",
    "rotate": 0.0,
}
_TYPES = {k: type(v) for k, v in DEFAULTS.items() if v is not None}
_TYPES["seed"] = int


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _coerce(name, value, source):
    kind = _TYPES.get(name)
    if kind is None or value is None or isinstance(value, kind) and not isinstance(value, bool):
        return value
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise UsageError(f"{source}: '{name}' expects {kind.__name__}, got {value!r}") from None


def resolve(args, names):
    """Fill ``args.<name>`` for each name following the precedence order."""
    config = {}
    if getattr(args, "config", None):
        try:
            config = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(config, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    for name in names:
        value = getattr(args, name, None)
        if value is None:
            env = os.environ.get(ENV_PREFIX + name.upper())
            if env is not None:
                value = _coerce(name, env, ENV_PREFIX + name.upper())
            elif name in config:
                value = _coerce(name, config[name], args.config)
            else:
                value = DEFAULTS.get(name)
        setattr(args, name, value)
    return args


def _require_seed(args):
    if args.seed is None:
        raise UsageError(f"{args.command} requires --seed (or TOONRIG_SEED / config 'seed')")


def _file_sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


def _load_rig_atlas(args):
    from .raster import read_png
    from .rig import load_rig
    from .template import default_atlas, default_rig

    if getattr(args, "rig", None):
        rig = load_rig(args.rig)
        if not args.atlas:
            raise UsageError("--rig needs a matching --atlas")
        return rig, read_png(args.atlas)
    rig = default_rig(args.size)
    return rig, default_atlas(rig)


# -- commands ----------------------------------------------------------------


def cmd_template(args):
    from .raster import write_png
    from .rig import save_rig
    from .template import default_atlas, default_rig

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rig = default_rig(args.size)
    save_rig(rig, out / "rig.json")
    write_png(default_atlas(rig), out / "atlas.png")
    _emit({"rig": str(out / "rig.json"), "atlas": str(out / "atlas.png"), "fingerprint": rig.fingerprint()})


def cmd_fixture(args):
    """Self-reconstruction portrait at known (seeded random or zero) weights."""
    from .align import SimilarityTransform, warp_image
    from .landmarks import save_landmarks
    from .raster import write_mask, write_png
    from .rig import ParamVector
    from .synthgen import sample_params
    from .template import self_reconstruction_portrait

    rig, atlas = _load_rig_atlas(args)
    params = (ParamVector.zeros(rig.component_ids) if args.seed is None
              else sample_params(rig, 1, args.seed)[0])
    img, lms, hair = self_reconstruction_portrait(rig, atlas, params, with_hair=not args.no_hair)
    if args.rotate:
        s = rig.canvas_size
        c = np.array([s / 2, s / 2])
        rot = SimilarityTransform(np.deg2rad(args.rotate), 1.0, 0.0, 0.0)
        fwd = SimilarityTransform(rot.rotation, 1.0, *(c - rot.linear @ c))
        img = warp_image(img, s, s, fwd.inverse())
        img[..., 3] = 255
        lms = lms.transformed(fwd.apply, size=s)
        if hair is not None:
            from .assembly import mask_to_rgba
            hair = warp_image(mask_to_rgba(hair), s, s, fwd.inverse())[..., 3] >= 128
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_png(img, out / "portrait.png")
    save_landmarks(lms, out / "landmarks.json")
    (out / "truth_params.json").write_text(json.dumps(params.to_dict(), indent=1), encoding="utf-8")
    if hair is not None:
        write_mask(hair, out / "hair_mask.png")
    _emit({"out": str(out), "hair": hair is not None})


def cmd_synth(args):
    from .synthgen import build_dataset, save_dataset

    _require_seed(args)
    rig, _ = _load_rig_atlas(args)
    t0 = time.perf_counter()
    ds = build_dataset(rig, args.samples, args.seed, workers=args.workers)
    save_dataset(ds, args.out)
    _emit({"out": args.out, "samples": len(ds), "dropped": ds.dropped, "seconds": round(time.perf_counter() - t0, 3)})


def cmd_train(args):
    from .regressor import TrainConfig, init_model, save_model, train
    from .rig import load_rig
    from .synthgen import load_dataset
    from .template import default_rig

    _require_seed(args)
    ds = load_dataset(args.dataset)
    rig = load_rig(args.rig) if args.rig else default_rig(ds.canvas_size)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.learning_rate,
                      optimizer=args.optimizer, seed=args.seed, validation_fraction=args.validation_fraction,
                      patience=args.patience)
    t0 = time.perf_counter()
    model = init_model(2 * len(ds.landmark_ids), len(ds.params[0]), seed=args.seed)
    model, hist = train(model, ds, cfg, template=rig.template_landmarks.normalized)
    save_model(model, args.out)
    if args.report_dir:
        from .report import loss_report
        loss_report(hist, args.report_dir)
    best = hist.best_epoch - 1
    _emit({"out": args.out, "epochs": len(hist.train), "best_epoch": hist.best_epoch,
           "train_mse": hist.train[best], "val_mse": hist.validation[best],
           "final_train_mse": hist.train[-1], "final_val_mse": hist.validation[-1],
           "seconds": round(time.perf_counter() - t0, 3)})


def run_fit(args):
    """align -> fit_params -> repaint -> hair -> save. Returns the stage timings."""
    from . import assembly
    from .align import eye_level
    from .landmarks import load_landmarks
    from .raster import read_mask, read_png
    from .regressor import load_model

    timings = []

    def stage(name, fn):
        t = time.perf_counter()
        result = fn()
        timings.append((name, time.perf_counter() - t))
        return result

    rig, atlas = stage("load", lambda: _load_rig_atlas(args))
    model = stage("load_model", lambda: load_model(args.model))
    image = read_png(args.portrait)
    lms = load_landmarks(args.landmarks)
    if args.hair_z not in ("front", "behind-face"):
        raise UsageError(f"--hair-z must be 'front' or 'behind-face', got '{args.hair_z}'")
    aligned = stage("align", lambda: eye_level(image, lms))
    pkg = stage("extract", lambda: assembly.transfer_textures(rig, atlas, aligned))
    stage("fit_params", lambda: assembly.fit_portrait(pkg, model))
    stage("repaint", lambda: assembly.repaint_base_face(pkg, dilation_px=args.dilation))
    if args.hair_mask:
        def hair():
            mask = read_mask(args.hair_mask)
            return assembly.integrate_hair(pkg, assembly.to_aligned_frame(pkg, image),
                                           assembly.to_aligned_frame(pkg, assembly.mask_to_rgba(mask))[..., 3] >= 128,
                                           z=args.hair_z)
        stage("hair", hair)
    pkg.provenance = {
        "tool_version": __version__,
        "portrait_sha256": _file_sha(args.portrait),
        "landmarks_sha256": _file_sha(args.landmarks),
        "model_sha256": _file_sha(args.model),
        "hair_mask_sha256": _file_sha(args.hair_mask) if args.hair_mask else None,
        "rig_fingerprint": rig.fingerprint(),
        "dilation_px": args.dilation,
    }
    stage("save", lambda: assembly.save_package(pkg, args.out))
    return pkg, timings


def cmd_fit(args):
    t0 = time.perf_counter()
    pkg, timings = run_fit(args)
    total = time.perf_counter() - t0
    timings.append(("total", total))
    for name, sec in timings:
        print(f"{name:<14}{sec:9.3f} s")
    if args.report_dir:
        from .report import params_report, timing_report
        timing_report(timings, args.report_dir)
        params_report(pkg.fitted_params, pkg.rig.component_ids, args.report_dir)
    _emit({"out": args.out, "total_seconds": round(total, 3),
           "params": pkg.fitted_params.to_dict()})


def _render_chunk(job):
    from .anim import render_frame
    from .assembly import load_package
    from .raster import write_png

    pkg_dir, mapping, frames, out, first = job
    pkg = load_package(pkg_dir)
    for k, f in enumerate(frames):
        write_png(render_frame(pkg, f, mapping), Path(out) / f"frame_{first + k:05d}.png")
    return len(frames)


def cmd_animate(args):
    from .anim import load_mapping, load_timeline
    from .assembly import load_package

    pkg = load_package(args.package)
    mapping = load_mapping(args.mapping, rig=pkg.rig)
    frames = load_timeline(args.timeline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    step = max(1, -(-len(frames) // max(args.workers, 1)))
    jobs = [(args.package, mapping, frames[i:i + step], str(out), i) for i in range(0, len(frames), step)]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            list(pool.map(_render_chunk, jobs))
    else:
        for j in jobs:
            _render_chunk(j)
    _emit({"out": str(out), "frames": len(frames), "seconds": round(time.perf_counter() - t0, 3)})


def cmd_render(args):
    from .assembly import load_package
    from .raster import render, write_png
    from .rig import ParamVector

    pkg = load_package(args.package)
    params = pkg.fitted_params
    if args.params:
        params = ParamVector.from_dict(json.loads(Path(args.params).read_text(encoding="utf-8")))
    write_png(render(pkg.rig, pkg.atlas, params), args.out)
    _emit({"out": args.out})


def cmd_verify(args):
    from .assembly import verify_package

    report = verify_package(args.package)
    for check, ok, detail in report:
        print(f"{'ok  ' if ok else 'FAIL'} {check}: {detail}")
    failed = [c for c, ok, _ in report if not ok]
    if failed:
        raise ToonrigError(f"package verification failed: {', '.join(failed)}")


# -- parser ------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="toonrig", description="Layered 2D face rigs from a single portrait.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, options):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.set_defaults(func=fn, options=options)
        if "size" in options:
            sp.add_argument("--size", type=int, help="canvas size in px (default 512)")
        if "seed" in options:
            sp.add_argument("--seed", type=int)
        if "workers" in options:
            sp.add_argument("--workers", type=int, help="worker processes (default 1)")
        return sp

    sp = add("template", cmd_template, "write the default rig and atlas", ["size"])
    sp.add_argument("--out", required=True)

    sp = add("fixture", cmd_fixture, "render a self-reconstruction portrait", ["size", "seed", "rotate"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--atlas")
    sp.add_argument("--rotate", type=float, help="roll the portrait by this many degrees")
    sp.add_argument("--no-hair", action="store_true")

    sp = add("synth", cmd_synth, "build a synthetic landmark/weight dataset", ["size", "seed", "workers", "samples"])
    sp.add_argument("--out", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--atlas")
    sp.add_argument("--samples", type=int)

    sp = add("train", cmd_train, "train the landmark regressor",
             ["seed", "workers", "epochs", "batch_size", "learning_rate", "optimizer", "validation_fraction",
              "patience"])
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--rig")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--optimizer", choices=("adam", "sgd"))
    sp.add_argument("--validation-fraction", dest="validation_fraction", type=float)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--report-dir")

    sp = add("fit", cmd_fit, "fit a portrait and write a model package",
             ["size", "workers", "dilation", "hair_z"])
    sp.add_argument("--portrait", required=True)
    sp.add_argument("--landmarks", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--hair-mask")
    sp.add_argument("--hair-z", dest="hair_z")
    sp.add_argument("--rig")
    sp.add_argument("--atlas")
    sp.add_argument("--dilation", type=int)
    sp.add_argument("--report-dir")

    sp = add("animate", cmd_animate, "render expression frames", ["workers"])
    sp.add_argument("--package", required=True)
    sp.add_argument("--timeline", required=True)
    sp.add_argument("--mapping")
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render a package at its fitted (or given) weights", [])
    sp.add_argument("--package", required=True)
    sp.add_argument("--params")
    sp.add_argument("--out", required=True)

    sp = add("verify", cmd_verify, "re-check package hashes and invariants", [])
    sp.add_argument("--package", required=True)
    return p


def _fail(exc, code):
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        resolve(args, args.options)
        for name in ("size", "workers", "samples", "epochs"):
            v = getattr(args, name, None)
            if v is not None and v < 1:
                raise UsageError(f"--{name} must be >= 1, got {v}")
        args.func(args)
    except ValidationError as exc:
        return _fail(exc, 2)
    except ToonrigError as exc:
        return _fail(exc, exc.exit_code)
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        return _fail(exc, 2)
    except OSError as exc:
        return _fail(exc, 3)
    return 0


if __name__ == "__main__":
    sys.exit(main())
