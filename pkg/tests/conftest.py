import numpy as np
import pytest
import torch

from adafusion.data import Frame


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def make_frames(xyz, seq="s0", t0=0.0, dt=1.0):
    return [
        Frame(f"{seq}/{i}", t0 + i * dt, f"{seq}/img{i}", f"{seq}/pc{i}", tuple(float(v) for v in p), seq)
        for i, p in enumerate(np.asarray(xyz, dtype=float))
    ]
