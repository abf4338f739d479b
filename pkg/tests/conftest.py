import numpy as np
import pytest
import torch

from starformer.model import ModelConfig
from starformer.trajectory import ActionKind, ActionSpace, Trajectory

DISCRETE3 = ActionSpace(ActionKind.DISCRETE, 3)
CONTINUOUS2 = ActionSpace(ActionKind.CONTINUOUS, 2)


def random_trajectory(rng, length, space=DISCRETE3, stack=4, env_id="toy"):
    states = rng.integers(0, 256, size=(length, 84, 84, stack), dtype=np.uint8)
    if space.discrete:
        actions = rng.integers(0, space.dim, size=length)
    else:
        actions = rng.uniform(-1, 1, size=(length, space.dim)).astype(np.float32)
    rewards = rng.normal(size=length).astype(np.float32)
    return Trajectory(states, actions, rewards, space, env_id)


def tiny_config(**kw):
    """Small but structurally complete model for fast property tests."""
    base = dict(n_layers=2, d_step=16, d_seq=32, heads_step=2, heads_seq=4, seq_len=4, patch_size=21, dropout=0.1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
