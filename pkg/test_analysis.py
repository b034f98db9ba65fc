import csv
import math

import numpy as np
import pytest

from analysis import (
    ACTION_DIST_HEADER, COSSIM_HEADER, PENALTY_HEADER, PenaltyReport, action_distance_hist, bisection_ppf,
    clip_penalty, eigen_lower_bound_check, expected_min_approx, jacobi_eigh, lemma1_check, mc_expected_min,
    mean_gradient_norm_sq, mean_pairwise_cos_sim, min_pairwise_cos_sim, normal_cdf, norm_ppf, pairwise_cos_sims,
    penalty_report, prop1_check, q_std, random_unit_family, sphere_cov_check, sphere_mean_norm, uniform_sampler,
    variance_spectrum, write_action_dist_csv, write_cossim_csv, write_penalty_csv,
)
from datagen import collect
from nn import DimensionError, Mlp, QEnsemble, init_ensemble


def linear_critic(action_weights, bias: float = 0.0, state_dim: int = 2) -> Mlp:
    w = np.concatenate([np.zeros(state_dim), np.asarray(action_weights, dtype=np.float64)])[:, None]
    return Mlp((w,), (np.array([bias]),))


def ensemble_of(*members: Mlp, action_dim: int = 1) -> QEnsemble:
    return QEnsemble(tuple(members), tuple(members), 2, action_dim)


@pytest.fixture
def sa():
    rng = np.random.default_rng(0)
    return rng.standard_normal((8, 2)), rng.uniform(-1.0, 1.0, size=(8, 1))


# ---------------------------------------------------------------------------
# Clip penalty
# ---------------------------------------------------------------------------

def test_clip_penalty_examples(sa):
    s, a = sa
    spread = ensemble_of(linear_critic([0.0], 1.0), linear_critic([0.0], 2.0), linear_critic([0.0], 3.0))
    assert clip_penalty(spread, s, a) == pytest.approx(1.0)
    assert q_std(spread, s, a) == pytest.approx(math.sqrt(2.0 / 3.0))
    same = ensemble_of(linear_critic([0.4], 1.0), linear_critic([0.4], 1.0))
    assert clip_penalty(same, s, a) == 0.0
    assert q_std(same, s, a) == 0.0


def test_penalty_report_gap(medium_dataset, reference):
    ensemble = init_ensemble(2, 1, 4, [8, 8], 0)
    report = penalty_report(ensemble, medium_dataset, reference.medium, batch=64, seed=1)
    assert report.mean_penalty_behavior >= 0.0 and report.mean_penalty_random >= 0.0
    assert report.gap == report.mean_penalty_random - report.mean_penalty_behavior
    again = penalty_report(ensemble, medium_dataset, reference.medium, batch=64, seed=1)
    assert again == report


def test_penalty_report_without_behavior_uses_dataset_actions(random_dataset):
    flat = ensemble_of(linear_critic([0.0], 1.0), linear_critic([0.0], 1.0))
    report = penalty_report(flat, random_dataset, None, batch=32)
    assert report == PenaltyReport(0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Expected minimum
# ---------------------------------------------------------------------------

def test_expected_min_examples():
    assert expected_min_approx(0.7, 1.3, 1) == 0.7
    assert expected_min_approx(0.0, 1.0, 2) == pytest.approx(-0.6005, abs=2e-3)
    assert expected_min_approx(0.0, 1.0, 10) == pytest.approx(-1.5388, abs=0.06)
    assert expected_min_approx(2.0, 0.0, 10) == 2.0
    assert expected_min_approx(0.0, 2.0, 10) == pytest.approx(2.0 * expected_min_approx(0.0, 1.0, 10))
    with pytest.raises(ValueError):
        expected_min_approx(0.0, -1.0, 3)


def test_normal_quantile_matches_bisection():
    for p in (1e-9, 1e-4, 0.01, 0.02425, 0.3, 0.5, 0.77, 0.99, 1.0 - 1e-6):
        assert norm_ppf(p) == pytest.approx(bisection_ppf(p), abs=1e-8)
        assert normal_cdf(norm_ppf(p)) == pytest.approx(p, rel=1e-8)
    assert norm_ppf(0.5) == pytest.approx(0.0, abs=1e-12)


def test_monte_carlo_expected_min_of_two():
    mean, stderr = mc_expected_min(2, 200_000, 0)
    assert abs(mean + 1.0 / math.sqrt(math.pi)) <= 5.0 * stderr
    assert mc_expected_min(2, 1000, 3, chunk=128) == mc_expected_min(2, 1000, 3, chunk=128)


# ---------------------------------------------------------------------------
# Gradient similarity
# ---------------------------------------------------------------------------

def test_cos_sims_examples(sa):
    s, _ = sa
    a = np.random.default_rng(1).uniform(-1.0, 1.0, size=(8, 2))
    aligned = ensemble_of(linear_critic([1.0, 2.0]), linear_critic([2.0, 4.0]), action_dim=2)
    assert min_pairwise_cos_sim(aligned, s, a) == pytest.approx(1.0, abs=1e-12)
    opposed = ensemble_of(linear_critic([1.0, -1.0]), linear_critic([-1.0, 1.0]), action_dim=2)
    assert mean_pairwise_cos_sim(opposed, s, a) == pytest.approx(-1.0, abs=1e-12)
    assert mean_gradient_norm_sq(opposed, s, a) == pytest.approx(0.0, abs=1e-12)


def test_cos_sims_are_bounded(sa):
    s, a = sa
    ensemble = init_ensemble(2, 1, 5, [8, 8], 3)
    sims = pairwise_cos_sims(ensemble, s, a)
    assert sims.shape == (10, 8)
    assert np.all(sims >= -1.0) and np.all(sims <= 1.0)
    assert min_pairwise_cos_sim(ensemble, s, a) <= mean_pairwise_cos_sim(ensemble, s, a)


# ---------------------------------------------------------------------------
# Variance spectrum
# ---------------------------------------------------------------------------

def test_jacobi_matches_numpy():
    rng = np.random.default_rng(0)
    for dim in (1, 2, 5, 8):
        m = rng.standard_normal((dim, dim))
        sym = m + m.T
        values, vectors = jacobi_eigh(sym)
        np.testing.assert_allclose(values, np.linalg.eigvalsh(sym), rtol=0, atol=1e-10)
        np.testing.assert_allclose(vectors.T @ vectors, np.eye(dim), rtol=0, atol=1e-10)


def test_orthogonal_pair_spectrum():
    spectrum = variance_spectrum(np.eye(2))
    np.testing.assert_allclose(spectrum.matrix, [[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(spectrum.eigenvalues, [0.0, 0.5], atol=1e-15)
    assert abs(spectrum.w_min @ np.array([1.0, -1.0])) < 1e-12
    assert spectrum.total_variance == pytest.approx(0.5)
    total, identity_value, diff = lemma1_check(np.eye(2))
    assert total == pytest.approx(identity_value) and diff < 1e-15


def test_total_variance_identity_on_random_families():
    rng = np.random.default_rng(7)
    for _ in range(20):
        family = random_unit_family(int(rng.integers(2, 20)), int(rng.integers(1, 6)), rng)
        assert lemma1_check(family)[2] <= 1e-10


def test_variance_bound_examples():
    orthogonal = prop1_check(np.eye(2), k=1.0)
    assert orthogonal.bound == pytest.approx(0.25)
    assert orthogonal.lhs == pytest.approx(0.0, abs=1e-15)
    assert orthogonal.holds
    identical = prop1_check(np.array([[1.0, 0.0], [1.0, 0.0]]), k=2.0)
    assert identical.bound == 0.0 and identical.holds

    rng = np.random.default_rng(3)
    for _ in range(20):
        family = random_unit_family(int(rng.integers(2, 30)), int(rng.integers(1, 6)), rng)
        assert prop1_check(family, k=float(rng.uniform(0.1, 3.0)), value_at_a=float(rng.normal())).holds
        assert eigen_lower_bound_check(family, rng.standard_normal(family.shape[1]), k=1.5)[2]


def test_ragged_gradient_family_is_rejected():
    with pytest.raises(DimensionError):
        variance_spectrum([[1.0, 0.0], [1.0]])


def test_sphere_samples_are_isotropic():
    assert sphere_cov_check(3, 200_000, 0) <= 5e-3
    assert sphere_mean_norm(3, 200_000, 0) <= 1e-2
    with pytest.raises(ValueError):
        sphere_cov_check(1, 10, 0)


# ---------------------------------------------------------------------------
# Action distance
# ---------------------------------------------------------------------------

def test_replaying_dataset_actions_gives_zero_distance(random_dataset):
    def replay(states, rng):
        return random_dataset.actions
    hist = action_distance_hist(replay, random_dataset, bins=10)
    assert hist.mean == 0.0
    assert hist.counts[0] == len(random_dataset)


def test_uniform_against_uniform_actions(pointmass, reference):
    dataset = collect(pointmass, "random", 4000, 11, reference)
    hist = action_distance_hist(uniform_sampler(1), dataset, bins=20, seed=2)
    assert hist.mean == pytest.approx(2.0 / 3.0, abs=0.05)
    assert int(np.sum(hist.counts)) == len(dataset)
    assert hist.edges[0] == 0.0 and hist.edges[-1] == 4.0


def test_policy_histogram_counts_every_row(medium_dataset, reference):
    hist = action_distance_hist(reference.medium, medium_dataset, bins=5)
    assert len(hist.counts) == 5 and int(np.sum(hist.counts)) == len(medium_dataset)


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_csv_reports(tmp_path, random_dataset):
    report = PenaltyReport(0.25, 1.5, 0.1, 0.9)
    rows = read_csv(write_penalty_csv(tmp_path / "penalty_report.csv", [(1000, report), (2000, report)]))
    assert rows[0] == PENALTY_HEADER
    assert len(rows) == 3
    step, behavior, random_penalty, gap = rows[1][:4]
    assert step == "1000"
    assert float(gap) == float(random_penalty) - float(behavior) == 1.25

    rows = read_csv(write_cossim_csv(tmp_path / "cossim.csv", [(1000, -0.5, 0.25)]))
    assert rows == [COSSIM_HEADER, ["1000", "-0.5", "0.25"]]

    hist = action_distance_hist(uniform_sampler(1), random_dataset, bins=4)
    rows = read_csv(write_action_dist_csv(tmp_path / "action_dist.csv", hist))
    assert rows[0] == ACTION_DIST_HEADER
    assert sum(int(r[2]) for r in rows[1:]) == len(random_dataset)
