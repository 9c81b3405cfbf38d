import numpy as np
import pytest

from sparsecl import config
from sparsecl.data import make_synthetic_universe

SMALL = {
    "model": {"width": 8, "expansion": 2, "blocks": 1, "novel_row_steps": 20},
    "optimizer": {"lr": 1e-3, "epochs": 2, "pretrain_epochs": 5},
    "data": {"pretrain_classes": 8, "cil_classes": 8, "tasks": 4, "input_dim": 8,
             "per_class_n": 40, "cil_train_per_class": 20, "cil_test_per_class": 10,
             "control_per_class": 10, "superclass_count": 4, "conditional_n": 30},
    "run": {"seeds": [0]},
}


def small_config(**overrides):
    cfg = config.RunConfig().replace(**SMALL)
    return cfg.replace(**overrides) if overrides else cfg


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_universe():
    return make_synthetic_universe(small_config().data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = []


def record_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append((number, line))
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
