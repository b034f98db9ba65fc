"""
Diagnostics and executable checks of the ensemble math
Clip penalty and Q-std reports, action-gradient cosine similarity, the
expected-minimum approximation, gradient variance spectra (cyclic Jacobi),
the OOD-variance bound, and the action-distance histogram.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

import config
from algorithms import CriticGraph
from datagen import OfflineDataset
from nn import DimensionError, GaussianPolicy, QEnsemble, policy_sample, q_forward

logger = logging.getLogger(__name__)

ActionSampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]

PENALTY_HEADER = ["step", "behavior_penalty", "random_penalty", "gap", "behavior_q_std", "random_q_std"]
COSSIM_HEADER = ["step", "min_pairwise_cos_sim", "mean_pairwise_cos_sim"]
ACTION_DIST_HEADER = ["bin_left", "bin_right", "count"]


# ---------------------------------------------------------------------------
# Clip penalty
# ---------------------------------------------------------------------------

def _q_values(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return q_forward(ensemble, s, a).value


def clip_penalty(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> float:
    """Batch mean of (mean over members - min over members); never negative"""
    q = _q_values(ensemble, s, a)
    return float(np.mean(np.mean(q, axis=1) - np.min(q, axis=1)))


def q_std(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> float:
    """Batch mean of the member standard deviation (divisor N)"""
    return float(np.mean(np.std(_q_values(ensemble, s, a), axis=1)))


@dataclass(frozen=True)
class PenaltyReport:
    mean_penalty_behavior: float
    mean_penalty_random: float
    q_std_behavior: float
    q_std_random: float

    @property
    def gap(self) -> float:
        return self.mean_penalty_random - self.mean_penalty_behavior


def penalty_report(ensemble: QEnsemble, dataset: OfflineDataset, behavior_policy: Optional[GaussianPolicy],
                   batch: int = config.ANALYSIS_BATCH, seed: int = 0) -> PenaltyReport:
    """
    Compare the ensemble on behavior actions and on uniform actions at the
    same dataset states. Without a behavior policy (random tier) the
    dataset's own actions stand in for behavior samples.

    Args:
        ensemble: Critics to measure
        dataset: Source of the states (and of the actions on the random tier)
        behavior_policy: Policy that generated the dataset, or None
        batch: Number of dataset states drawn
        seed: Seed for the state, behavior-noise and uniform-action draws

    Returns:
        PenaltyReport with mean clip penalty and Q-std on both action sets
    """
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(dataset), size=batch)
    states = dataset.states[idx]
    if behavior_policy is None:
        behavior = dataset.actions[idx]
    else:
        noise = rng.standard_normal((batch, dataset.spec.action_dim))
        behavior = policy_sample(behavior_policy, states, noise)[0].value
    uniform = rng.uniform(-1.0, 1.0, size=(batch, dataset.spec.action_dim))
    return PenaltyReport(
        mean_penalty_behavior=clip_penalty(ensemble, states, behavior),
        mean_penalty_random=clip_penalty(ensemble, states, uniform),
        q_std_behavior=q_std(ensemble, states, behavior),
        q_std_random=q_std(ensemble, states, uniform),
    )


# ---------------------------------------------------------------------------
# Expected minimum of N Gaussians
# ---------------------------------------------------------------------------

# Rational approximation of the standard normal quantile (central + tail branches)
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_ppf(p: float) -> float:
    """
    Inverse standard normal CDF.

    Rational approximation (|error| ~1e-9) followed by one Halley step
    against the erfc-based CDF, which brings it to machine precision.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    if p == 0.0:
        return -math.inf
    if p == 1.0:
        return math.inf

    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        x = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    elif p <= 1.0 - _P_LOW:
        q = p - 0.5
        r = q * q
        x = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
            (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        x = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)

    e = normal_cdf(x) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def bisection_ppf(p: float, low: float = -40.0, high: float = 40.0, iterations: int = 200) -> float:
    """Slow reference quantile by bisection on the CDF"""
    for _ in range(iterations):
        mid = 0.5 * (low + high)
        if normal_cdf(mid) < p:
            low = mid
        else:
            high = mid
    return 0.5 * (low + high)


def expected_min_approx(m: float, sigma: float, n: int) -> float:
    """m - ppf((N - pi/8) / (N - pi/4 + 1)) * sigma"""
    if sigma < 0.0 or n < 1:
        raise ValueError(f"need sigma >= 0 and N >= 1, got sigma={sigma}, N={n}")
    if n == 1:
        # the quantile argument is exactly 1/2
        return m
    return m - norm_ppf((n - math.pi / 8.0) / (n - math.pi / 4.0 + 1.0)) * sigma


def mc_expected_min(n: int, draws: int, seed: int, chunk: int = 100_000) -> Tuple[float, float]:
    """Monte-Carlo mean of the minimum of N standard normals, with its standard error"""
    rng = np.random.default_rng(seed)
    total, total_sq, done = 0.0, 0.0, 0
    while done < draws:
        rows = min(chunk, draws - done)
        mins = np.min(rng.standard_normal((rows, n)), axis=1)
        total += float(np.sum(mins))
        total_sq += float(np.sum(mins * mins))
        done += rows
    mean = total / draws
    var = max(total_sq / draws - mean * mean, 0.0)
    return mean, math.sqrt(var / draws)


# ---------------------------------------------------------------------------
# Action-gradient similarity
# ---------------------------------------------------------------------------

def action_gradients(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """dQ_j/da for every member, shape (N, B, A)"""
    graph = CriticGraph(ensemble, s, a, action_grad=True)
    return np.stack([graph.input_gradient(i).value for i in range(ensemble.n)])


def _unit_rows(grads: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(grads * grads, axis=-1, keepdims=True) + config.ES_EPS ** 2)
    return grads / norms


def pairwise_cos_sims(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    """(pairs, B) cosine similarities over unordered member pairs"""
    if ensemble.n < 2:
        raise ValueError("cosine similarity needs at least two members")
    units = _unit_rows(action_gradients(ensemble, s, a))
    rows = [np.sum(units[i] * units[j], axis=-1)
            for i in range(ensemble.n) for j in range(i + 1, ensemble.n)]
    return np.clip(np.stack(rows), -1.0, 1.0)


def min_pairwise_cos_sim(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> float:
    return float(np.mean(np.min(pairwise_cos_sims(ensemble, s, a), axis=0)))


def mean_pairwise_cos_sim(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> float:
    return float(np.mean(pairwise_cos_sims(ensemble, s, a)))


def mean_gradient_norm_sq(ensemble: QEnsemble, s: np.ndarray, a: np.ndarray) -> float:
    """Batch mean of ||mean of normalized action gradients||^2 (1 minus the total variance)"""
    units = _unit_rows(action_gradients(ensemble, s, a))
    mean = np.mean(units, axis=0)
    return float(np.mean(np.sum(mean * mean, axis=-1)))


# ---------------------------------------------------------------------------
# Gradient variance spectrum
# ---------------------------------------------------------------------------

def jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Returns eigenvalues ascending and eigenvectors as matching columns.
    """
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(float(np.sum(a * a) - np.sum(np.diag(a) ** 2)))
        if off <= tol:
            break
        for k in range(n - 1):
            for l in range(k + 1, n):
                if a[k, l] == 0.0:
                    continue
                phi = (a[l, l] - a[k, k]) / (2.0 * a[k, l])
                t = 1.0 / (abs(phi) + math.sqrt(phi * phi + 1.0))
                if phi < 0.0:
                    t = -t
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                col_k, col_l = a[:, k].copy(), a[:, l].copy()
                a[:, k], a[:, l] = c * col_k - s * col_l, s * col_k + c * col_l
                row_k, row_l = a[k, :].copy(), a[l, :].copy()
                a[k, :], a[l, :] = c * row_k - s * row_l, s * row_k + c * row_l
                a[k, l] = a[l, k] = 0.0
                vec_k, vec_l = v[:, k].copy(), v[:, l].copy()
                v[:, k], v[:, l] = c * vec_k - s * vec_l, s * vec_k + c * vec_l
    else:
        logger.warning(f"⚠️ Jacobi did not reach off-diagonal norm {tol} in {max_sweeps} sweeps")
    order = np.argsort(np.diag(a), kind="stable")
    return np.diag(a)[order], v[:, order]


@dataclass(frozen=True)
class VarianceSpectrum:
    matrix: np.ndarray
    eigenvalues: np.ndarray    # ascending
    eigenvectors: np.ndarray   # columns, w_min first
    total_variance: float
    mean_norm: float

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def w_min(self) -> np.ndarray:
        return self.eigenvectors[:, 0]


def _as_family(gradients) -> np.ndarray:
    try:
        family = np.array(gradients, dtype=np.float64)
    except ValueError:
        raise DimensionError("gradient vectors differ in dimension") from None
    if family.ndim != 2:
        raise DimensionError(f"expected N vectors of equal dimension, got array of shape {family.shape}")
    return family


def variance_spectrum(gradients) -> VarianceSpectrum:
    """Variance matrix (divisor N) of N gradient vectors and its eigen-decomposition"""
    family = _as_family(gradients)
    mean = family.mean(axis=0)
    centered = family - mean
    matrix = centered.T @ centered / family.shape[0]
    matrix = 0.5 * (matrix + matrix.T)
    eigenvalues, eigenvectors = jacobi_eigh(matrix)
    return VarianceSpectrum(matrix, eigenvalues, eigenvectors, float(np.trace(matrix)),
                            float(np.linalg.norm(mean)))


def random_unit_family(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def lemma1_check(gradients) -> Tuple[float, float, float]:
    """(total variance, 1 - ||mean||^2, absolute difference) for unit vectors"""
    spectrum = variance_spectrum(gradients)
    identity_value = 1.0 - spectrum.mean_norm ** 2
    return spectrum.total_variance, identity_value, abs(spectrum.total_variance - identity_value)


def _linear_member_variance(family: np.ndarray, value_at_a: float, direction: np.ndarray, k: float) -> float:
    # locally linear members: Q_j(a + delta) = value + <delta, q_j>
    values = value_at_a + k * (family @ direction)
    return float(np.var(values))


class Prop1Result(NamedTuple):
    lhs: float
    bound: float
    holds: bool


def prop1_check(gradients, k: float, value_at_a: float = 0.0) -> Prop1Result:
    """
    Variance of linear members at a + k * w_min against
    (1/|A|) * ((N - 1)/N) * k^2 * eps, eps = 1 - min pairwise inner product.
    """
    family = _as_family(gradients)
    n, dim = family.shape
    spectrum = variance_spectrum(family)
    lhs = _linear_member_variance(family, value_at_a, spectrum.w_min, k)
    inner = family @ family.T
    off_diagonal = inner[~np.eye(n, dtype=bool)]
    eps = 1.0 - float(np.min(off_diagonal)) if n > 1 else 0.0
    bound = (1.0 / dim) * ((n - 1) / n) * k * k * eps
    return Prop1Result(lhs, bound, lhs <= bound + 1e-12)


def eigen_lower_bound_check(gradients, direction: np.ndarray, k: float) -> Tuple[float, float, bool]:
    """Any unit direction sees variance at least k^2 * lambda_min"""
    family = _as_family(gradients)
    w = np.asarray(direction, dtype=np.float64)
    w = w / np.linalg.norm(w)
    spectrum = variance_spectrum(family)
    variance = _linear_member_variance(family, 0.0, w, k)
    floor = k * k * spectrum.lambda_min
    return variance, floor, variance >= floor - 1e-12


def sphere_samples(n: int, samples: int, seed: int) -> np.ndarray:
    if n < 2:
        raise ValueError(f"sphere dimension must be at least 2, got {n}")
    return random_unit_family(samples, n, np.random.default_rng(seed))


def sphere_cov_check(n: int, samples: int, seed: int) -> float:
    """max |Cov - I/n| for uniform samples on the unit sphere in R^n"""
    x = sphere_samples(n, samples, seed)
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / samples
    return float(np.max(np.abs(cov - np.eye(n) / n)))


def sphere_mean_norm(n: int, samples: int, seed: int) -> float:
    return float(np.linalg.norm(sphere_samples(n, samples, seed).mean(axis=0)))


# ---------------------------------------------------------------------------
# Action distance to the dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionDistanceHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float


def action_distance_hist(policy: Union[GaussianPolicy, ActionSampler], dataset: OfflineDataset,
                         bins: int = config.HISTOGRAM_BINS, seed: int = 0) -> ActionDistanceHistogram:
    """
    Histogram of ||a_hat - a||^2 with one sampled a_hat per dataset row, on
    the fixed range [0, 4|A|] so reports line up across checkpoints.
    """
    rng = np.random.default_rng(seed)
    if isinstance(policy, GaussianPolicy):
        noise = rng.standard_normal(dataset.actions.shape)
        sampled = policy_sample(policy, dataset.states, noise)[0].value
    else:
        sampled = np.asarray(policy(dataset.states, rng), dtype=np.float64)
    distances = np.sum((sampled - dataset.actions) ** 2, axis=1)
    counts, edges = np.histogram(distances, bins=bins, range=(0.0, 4.0 * dataset.spec.action_dim))
    return ActionDistanceHistogram(edges, counts, float(np.mean(distances)))


def uniform_sampler(action_dim: int) -> ActionSampler:
    def sample(states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(states.shape[0], action_dim))
    return sample


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

def _write_rows(path: Union[str, Path], header: List[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[repr(float(v)) if isinstance(v, float) else v for v in row] for row in rows])
    logger.info(f"💾 Wrote {path} ({len(rows)} rows)")
    return path


def write_penalty_csv(path, reports: Sequence[Tuple[int, PenaltyReport]]) -> Path:
    rows = [[step, r.mean_penalty_behavior, r.mean_penalty_random, r.gap, r.q_std_behavior, r.q_std_random]
            for step, r in reports]
    return _write_rows(path, PENALTY_HEADER, rows)


def write_cossim_csv(path, rows: Sequence[Tuple[int, float, float]]) -> Path:
    return _write_rows(path, COSSIM_HEADER, [list(r) for r in rows])


def write_action_dist_csv(path, hist: ActionDistanceHistogram) -> Path:
    rows = [[float(hist.edges[i]), float(hist.edges[i + 1]), int(hist.counts[i])] for i in range(len(hist.counts))]
    return _write_rows(path, ACTION_DIST_HEADER, rows)
