import numpy as np
import pytest

from ssm_memlab.model import ModelConfig, init_params
from ssm_memlab.taskgen import default_vocab

# criterion number -> (ok, summary); filled by tests/test_acceptance.py
ACCEPTANCE = {}


def record_acceptance(number, name, ok, detail=""):
    ACCEPTANCE[number] = (bool(ok), name, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, name, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {name} -- {detail}")


@pytest.fixture
def vocab():
    return default_vocab(64)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=64, d_model=8, n_state=4, n_layers=2, delta_rank=2, seed=5)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
