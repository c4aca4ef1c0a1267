import copy
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from services.config_service import parse_config, with_overrides  # noqa: E402
from services.numerics import rng_stream, stream_id  # noqa: E402

REPO_ROOT = Path(__file__).resolve().parent

TINY_CONFIG = {
    "run": {"seed": 7, "out_dir": "runs/tiny", "threads": 1},
    "waveform": {"n_fft": 256, "fs_mhz": 200.0, "qam_order": 16},
    "array": {
        "users": 1,
        "antennas": 4,
        "geometry": [{"distance_m": 25.0, "angle_deg": 70.0}],
    },
    "noise": {"enabled": True},
    "states": {
        "grid": [
            {"id": 1, "bandwidth_mhz": 50.0, "rms_power_dbm": -20.0},
            {"id": 2, "bandwidth_mhz": 20.0, "rms_power_dbm": -24.0},
            {"id": 3, "bandwidth_mhz": 30.0, "rms_power_dbm": -22.0},
        ],
        "training_ids": [1, 2],
        "baseline_id": 1,
        "showcase_id": 1,
    },
    "pa": {"order": 5, "memory": 2},
    "tddpd": {"order": 5, "memory": 2, "probe_symbols": 1},
    "nn": {
        "memory": 2,
        "symbols_per_state": 3,
        "main": {"layer_sizes": [6, 8, 4, 2], "hidden_activation": "tanh"},
        "hn": {"layer_sizes": [2, 6, 10], "hidden_activation": "relu"},
    },
    "training": {"epochs": 3, "batch_per_state": 16, "steps_per_epoch": 4, "patience": 5, "val_fraction": 0.34},
    "eval": {"symbols": 1, "noise_realizations": 2},
    "psd": {"symbols": 2, "segment": 256},
}


@pytest.fixture
def rng():
    return rng_stream(1234, stream_id("tests"))


@pytest.fixture
def tiny_config_dict(tmp_path):
    data = copy.deepcopy(TINY_CONFIG)
    data["run"]["out_dir"] = str(tmp_path / "run")
    return data


@pytest.fixture
def complex_frame(rng):
    return rng.complex_normal((64, 3))


TINY_CFG = REPO_ROOT / "configs" / "tiny.cfg"


@pytest.fixture
def tiny_config(tmp_path):
    return with_overrides(parse_config(TINY_CFG), out_dir=str(tmp_path / "run"))
