import numpy as np
import pytest
import torch

from dymon.model import DyMON, ModelConfig
from dymon.types import Frame, Sequence


def tiny_config(**kw):
    base = dict(K=2, D=4, H=8, W=8, L=2, decoder_hidden=16, decoder_channels=(8, 8),
                refiner_channels=(8, 8), refiner_hidden=16, state_size=12, viewpoint_scale=9.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    return DyMON(tiny_config(**kw)).to(dtype)


def random_sequence(T=6, H=8, W=8, seed=0, label=None, n_ids=3):
    rng = np.random.default_rng(seed)
    frames = []
    for t in range(1, T + 1):
        ang = 0.4 * t
        v = 9.0 * np.array([np.cos(ang), np.sin(ang), 0.5])
        frames.append(Frame(rng.uniform(size=(H, W, 3)), v, t, rng.integers(0, n_ids, size=(H, W))))
    return Sequence(frames, cluster_label=label, metadata={"dome_radius": 9.0})


@pytest.fixture
def model64():
    return tiny_model()


@pytest.fixture
def seq8():
    return random_sequence()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("#")[1].split()[0])):
            terminalreporter.write_line(line)
