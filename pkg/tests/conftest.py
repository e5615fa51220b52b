import numpy as np
import pytest

from dasolab.config import parse_config


@pytest.fixture
def tiny_cfg():
    """Five-class, two-dimensional problem small enough for sub-second runs."""
    return parse_config({
        "dataset": {"K": 5, "d": 2, "N1": 60, "M1": 120, "gamma_l": 10.0, "gamma_u": 10.0,
                    "separation": 2.0, "noise_sigma": 0.5, "test_per_class": 20},
        "model": {"hidden": [16], "feature_dim": 8, "rho": 0.9},
        "loss": {"P": 10},
        "bank": {"L": 16},
        "tracker": {"segment_len": 5, "T_dist": 1.0},
        "optim": {"batch_size": 8, "lr": 0.05},
        "run": {"total_steps": 40, "eval_interval": 20},
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
