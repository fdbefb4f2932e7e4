import copy

import pytest

from config import settings
from services.experiment_config import config_from_dict
from services.hilbert_core import SpaceSpec

SMALL_EXPERIMENT = {
    "seed": 11,
    "estimators": ["sarcv", "rv", "conditional"],
    "space": {"variant": "L2", "J": 8},
    "semigroup": {"variant": "nilpotent_shift"},
    "volatility": {"model": "constant_kernel", "kernel": "gaussian", "scale": 1.0, "length": 0.2},
    "simulation": {"n": 8, "T": 1.0},
    "campaign": {"n_grid": [4, 8], "replications": 3, "U": 0.5},
    "functionals": [{"kind": "interval_square", "lo": 0.0, "hi": 0.5}],
}


@pytest.fixture
def l2():
    return SpaceSpec.l2(10)


@pytest.fixture
def h1():
    return SpaceSpec.h1(10)


@pytest.fixture
def spectral():
    return SpaceSpec.spectral(8)


@pytest.fixture(autouse=True)
def output_dir(tmp_path, monkeypatch):
    """Run directories land in a per-test temporary folder."""
    out = tmp_path / "runs"
    out.mkdir()
    monkeypatch.setattr(settings, "OUTPUT_DIR", str(out))
    return out


@pytest.fixture
def experiment_dict():
    """A small, fast experiment as a plain dict; tests edit their own copy."""
    return copy.deepcopy(SMALL_EXPERIMENT)


@pytest.fixture
def small_cfg(experiment_dict):
    return config_from_dict(experiment_dict)
