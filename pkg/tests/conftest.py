import numpy as np
import pytest
import torch

from sympcam.dataset import SynthConfig, generate_synthetic_session
from sympcam.preprocess import prepare_session

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_config():
    """Short 10 Hz sessions with one pinch, for fast pipeline tests."""
    return SynthConfig(n_participants=3, duration_s=60.0, fs_video=10.0, frame_size=24,
                       pinch_onsets=(25.0,), seed=3)


@pytest.fixture(scope="session")
def small_session(small_config):
    return generate_synthetic_session(small_config, 0)


@pytest.fixture(scope="session")
def small_prepared(small_config):
    out = {}
    for i in range(3):
        s = generate_synthetic_session(small_config, i)
        p = prepare_session(s, size=16, fs_out=10.0, fallback_box="full")
        out[p.participant_id] = p
    return out


@pytest.fixture(scope="session")
def canonical_session():
    """Full 570 s protocol session; the 100 Hz video is rendered lazily."""
    return generate_synthetic_session(SynthConfig(frame_size=16, seed=11), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
