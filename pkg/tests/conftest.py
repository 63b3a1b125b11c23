import numpy as np
import pytest
from hypothesis import settings

from paralm.backbone import ModelConfig, Transformer

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    return ModelConfig.desk()


@pytest.fixture(scope="session")
def model(desk):
    return Transformer(desk, precision="float64", seed=0)


@pytest.fixture(scope="session")
def tiny():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ffn=12, vocab_size=16, max_seq_len=64)
    return Transformer(cfg, precision="float64", seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
