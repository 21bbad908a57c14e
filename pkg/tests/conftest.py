import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-6):
    """Independent finite-difference oracle: d f / d x for scalar f of one array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def tiny_config(out_dir, **overrides):
    cfg = {
        "name": "tiny",
        "dataset": {"kind": "textured-patches-8x8", "n": 240, "classes": 4, "params": {"noise": 0.5}},
        "network": {"arch": "desk-cnn", "channels": 4, "hidden": 8},
        "methods": ["WT", "FT"],
        "schedule": {"n_cycles": 2, "r_prune": 0.4, "train": {"epochs": 1, "warmup_epochs": 0, "milestones": []}},
        "seeds": [0],
        "train_corruptions": [{"kind": "contrast"}],
        "test_corruptions": [{"kind": "occlusion"}],
        "noise_eps": [0.0, 1.0],
        "similarity": {"samples": 20, "repetitions": 2},
        "output_dir": str(out_dir),
    }
    for k, v in overrides.items():
        cfg[k] = v
    return cfg


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
