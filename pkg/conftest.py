"""
Shared pytest fixtures
Small environments, stand-in reference runs and datasets, so the suite
never needs the online SAC run that produces the real behavior policies.
"""
import os

import numpy as np
import pytest

from datagen import OfflineDataset, ReferenceRun, ReplayBuffer, collect
from env import ScoreAnchors, make_env, reset, step, uniform_actor
from nn import init_policy

RUN_SLOW = os.getenv("EDAC_RUN_SLOW") == "1"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale runs, enabled with EDAC_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="set EDAC_RUN_SLOW=1 to run desk-scale tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def fake_reference(spec, seed: int = 0, replay_size: int = 300, medium_buffer_size: int = 120) -> ReferenceRun:
    """Reference run built from untrained policies and a uniform-action replay buffer"""
    anchors = ScoreAnchors(random_ref=-40.0, expert_ref=-5.0)
    buffer = ReplayBuffer(spec, replay_size)
    rng = np.random.default_rng(seed)
    act = uniform_actor(spec)
    state, t = reset(spec, rng), 0
    for _ in range(replay_size):
        action = act(state, rng)
        result = step(spec, state, action, t)
        buffer.add(state, action, result.reward, result.next_state, False)
        state, t = result.next_state, t + 1
        if result.done:
            state, t = reset(spec, rng), 0
    return ReferenceRun(
        spec=spec, seed=seed,
        expert=init_policy(spec.state_dim, spec.action_dim, [8, 8], seed + 1),
        medium=init_policy(spec.state_dim, spec.action_dim, [8, 8], seed + 2),
        anchors=anchors, expert_score=100.0, medium_score=35.0, medium_step=500,
        medium_buffer_size=medium_buffer_size,
        replay=buffer.to_dataset("full-replay", seed, anchors),
        history=[(500, 35.0), (1000, 100.0)],
    )


@pytest.fixture
def pointmass():
    return make_env("pointmass1d")


@pytest.fixture
def reference(pointmass):
    return fake_reference(pointmass)


@pytest.fixture
def random_dataset(pointmass, reference) -> OfflineDataset:
    return collect(pointmass, "random", 400, 3, reference)


@pytest.fixture
def medium_dataset(pointmass, reference) -> OfflineDataset:
    return collect(pointmass, "medium", 400, 4, reference)
