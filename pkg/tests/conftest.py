import os
from pathlib import Path

import numpy as np
import pytest

from toonrig.regressor import TrainConfig, init_model, load_model, save_model, train
from toonrig.synthgen import build_dataset, load_dataset, save_dataset
from toonrig.template import default_atlas, default_rig

# Training the default model takes a few minutes. Setting TOONRIG_TEST_CACHE to
# a directory keeps the dataset and model between runs.
CACHE = os.environ.get("TOONRIG_TEST_CACHE")

TRAIN_SEED = 42
TRAIN_SAMPLES = 10_000
HELDOUT_SEED = 4242
HELDOUT_SAMPLES = 1_000


@pytest.fixture(scope="session")
def rig512():
    return default_rig(512)


@pytest.fixture(scope="session")
def atlas512(rig512):
    return default_atlas(rig512)


@pytest.fixture(scope="session")
def rig1024():
    return default_rig(1024)


@pytest.fixture(scope="session")
def atlas1024(rig1024):
    return default_atlas(rig1024)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _work_dir(tmp_path_factory):
    if CACHE:
        d = Path(CACHE)
        d.mkdir(parents=True, exist_ok=True)
        return d
    return tmp_path_factory.mktemp("trained")


@pytest.fixture(scope="session")
def trained(tmp_path_factory, rig512):
    """10k-sample dataset at 512 (seed 42), its default-config model, and a 1k held-out set."""
    import time

    d = _work_dir(tmp_path_factory)
    paths = {k: d / f"{k}.bin" for k in ("dataset", "heldout", "model")}
    timing = {}
    if paths["dataset"].exists():
        ds = load_dataset(paths["dataset"])
    else:
        t = time.perf_counter()
        ds = build_dataset(rig512, TRAIN_SAMPLES, TRAIN_SEED)
        timing["dataset"] = time.perf_counter() - t
        save_dataset(ds, paths["dataset"])
    if paths["heldout"].exists():
        held = load_dataset(paths["heldout"])
    else:
        held = build_dataset(rig512, HELDOUT_SAMPLES, HELDOUT_SEED)
        save_dataset(held, paths["heldout"])
    if paths["model"].exists():
        model = load_model(paths["model"])
    else:
        t = time.perf_counter()
        model = init_model(2 * len(ds.landmark_ids), ds.params.shape[1], seed=TRAIN_SEED)
        model, _ = train(model, ds, TrainConfig(seed=TRAIN_SEED), template=rig512.template_landmarks.normalized)
        timing["training"] = time.perf_counter() - t
        save_model(model, paths["model"])
    return {"dataset": ds, "heldout": held, "model": model, "model_path": paths["model"], "timing": timing}


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
