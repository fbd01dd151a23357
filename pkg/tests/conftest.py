import numpy as np
import pytest

from streamcast.decoder import DecoderConfig
from streamcast.encoder import EncoderConfig
from streamcast.model import BaseModel
from streamcast.scenario import GeneratorConfig, generate_episodes

# small widths keep finite-difference and streaming tests fast
TINY_ENC = EncoderConfig(width=16, heads=2, bands=2, temporal_layers=1, map_layers=1, agent_layers=1)
TINY_DEC = DecoderConfig(width=16, heads=2, modes=3, layers=1, horizon=30)


@pytest.fixture(scope="session")
def gen_cfg():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def episodes(gen_cfg):
    return generate_episodes(gen_cfg, 24, seed=5)


@pytest.fixture(scope="session")
def tiny_model():
    return BaseModel(TINY_ENC, TINY_DEC, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
