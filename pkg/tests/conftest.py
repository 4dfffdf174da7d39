import numpy as np
import pytest

from aclab.dataset import collect_dataset
from aclab.envs import ChaseEnv, make_expert
from aclab.flow import TrainConfig, make_policy, train


@pytest.fixture(scope="session")
def chase_ds():
    """Small Chase dataset shared across behavioral tests."""
    return collect_dataset(ChaseEnv(), make_expert("chase"), n_episodes=8,
                           H=8, delta_max=4, sigma_e=0.01, seed=42)


def build_tiny_policy(mode="standard", H=8, seed=3, **kw):
    defaults = dict(obs_dim=6, state_dim=2, act_dim=2, H=H, n_s=5,
                    channel_dim=16, channel_hidden=32, token_hidden=8,
                    num_blocks=1, cond_dim=16, seed=seed)
    defaults.update(kw)
    return make_policy(mode=mode, **defaults)


@pytest.fixture(scope="session")
def trained_tiny_policy(chase_ds):
    """A briefly trained standard policy on the small Chase dataset."""
    policy = build_tiny_policy()
    train(policy, chase_ds, TrainConfig(epochs=4, batch_size=128, warmup_steps=20), seed=7)
    return policy
