"""
Desk-scale training runs on the pointmass medium tier
Every run trains from scratch with the configured budget (EDAC_TOTAL_STEPS,
EDAC_HIDDEN_WIDTH, ...), over three seeds, so the module only runs with
EDAC_RUN_SLOW=1.
"""
from dataclasses import dataclass
from typing import List

import numpy as np
import pytest

import config
from algorithms import TrainConfig, TrainerState, init_trainer, make_actor, train_step
from analysis import mean_pairwise_cos_sim, penalty_report
from datagen import ReferenceCache, collect, get_reference_run
from env import evaluate_returns, make_env, normalized_score, return_bounds

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


@dataclass
class DeskRun:
    state: TrainerState
    q_policy_means: List[float]  # one per checkpoint step


@pytest.fixture(scope="module")
def pointmass_medium(tmp_path_factory):
    spec = make_env("pointmass1d")
    reference = get_reference_run(spec, 0, ReferenceCache(tmp_path_factory.mktemp("reference")))
    return reference, collect(spec, "medium", config.DATASET_SIZE, 0, reference)


@pytest.fixture(scope="module")
def trained(pointmass_medium):
    """Memoized runs keyed by (algorithm, N, seed, eta), shared across tests"""
    _, dataset = pointmass_medium
    runs = {}

    def run(algorithm: str, n: int, seed: int, eta: float = 0.0) -> DeskRun:
        key = (algorithm, n, seed, eta)
        if key not in runs:
            cfg = TrainConfig(algorithm=algorithm, N=n, seed=seed, eta=eta)
            state = init_trainer(cfg, dataset.spec.state_dim, dataset.spec.action_dim)
            q_policy_means = []
            while state.step < cfg.total_steps:
                state, metrics = train_step(state, dataset)
                if state.step % cfg.checkpoint_every == 0:
                    q_policy_means.append(metrics.q_policy_mean)
            runs[key] = DeskRun(state, q_policy_means)
        return runs[key]

    return run


def gap_mean(trained, pointmass_medium, n: int) -> float:
    reference, dataset = pointmass_medium
    gaps = [penalty_report(trained("sac-n", n, seed).state.ensemble, dataset, reference.medium, seed=seed).gap
            for seed in SEEDS]
    return float(np.mean(gaps))


def test_clip_penalty_is_larger_on_random_actions(trained, pointmass_medium):
    reference, dataset = pointmass_medium
    for seed in SEEDS:
        report = penalty_report(trained("sac-n", 10, seed).state.ensemble, dataset, reference.medium, seed=seed)
        assert report.gap > 0.0, f"seed {seed}: {report}"
        assert report.q_std_random > report.q_std_behavior, f"seed {seed}: {report}"


def test_penalty_gap_does_not_shrink_with_more_critics(trained, pointmass_medium):
    gaps = [gap_mean(trained, pointmass_medium, n) for n in (2, 5, 10)]
    assert gaps[0] <= gaps[1] <= gaps[2], gaps


def test_edac_diversifies_action_gradients(trained, pointmass_medium):
    _, dataset = pointmass_medium
    idx = np.random.default_rng(0).integers(0, len(dataset), size=config.ANALYSIS_BATCH)
    states, actions = dataset.states[idx], dataset.actions[idx]
    edac = np.mean([mean_pairwise_cos_sim(trained("edac", 5, seed, eta=1.0).state.ensemble, states, actions)
                    for seed in SEEDS])
    sac = np.mean([mean_pairwise_cos_sim(trained("sac-n", 5, seed).state.ensemble, states, actions)
                   for seed in SEEDS])
    assert edac < sac, (edac, sac)


def test_more_critics_stop_overestimation(trained, pointmass_medium):
    reference, dataset = pointmass_medium
    _, upper = return_bounds(dataset.spec)
    overestimating = [any(q > upper for q in trained("sac-n", 2, seed).q_policy_means) for seed in SEEDS]
    assert sum(overestimating) >= 2, overestimating
    for seed in SEEDS:
        run = trained("sac-n", 10, seed)
        assert all(q <= upper for q in run.q_policy_means), f"seed {seed}: {run.q_policy_means}"

    scores = []
    for seed in SEEDS:
        returns = evaluate_returns(dataset.spec, make_actor(trained("sac-n", 10, seed).state.policy),
                                   config.EVAL_EPISODES, seed)
        scores.append(normalized_score(float(np.mean(returns)), reference.anchors))
    assert np.mean(scores) >= reference.medium_score, (scores, reference.medium_score)
