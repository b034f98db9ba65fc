"""
Validation batteries run by `edac-lab check`
Each check reports a measured value against its tolerance.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

import config
from algorithms import (
    CriticGraph, EsTerms, bc_loss, cql_penalty_lite, draw_cql, es_sum, policy_loss, q_loss_edac, q_loss_rem,
    q_loss_sac_n, variance_regularizer,
)
from analysis import (
    bisection_ppf, eigen_lower_bound_check, expected_min_approx, lemma1_check, mc_expected_min, norm_ppf,
    prop1_check, random_unit_family, sphere_cov_check, variance_spectrum,
)
import autodiff as ad
from nn import QEnsemble, init_ensemble, init_params, init_policy, mlp_forward

logger = logging.getLogger(__name__)

SUITES = ("math", "gradients", "all")


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        mark = "✅" if self.passed else "❌"
        return f"{mark} {self.name}: measured={self.measured:.3e} tol={self.tolerance:.1e}"


def _at_most(name: str, measured: float, tolerance: float) -> CheckResult:
    return CheckResult(name, float(measured), tolerance, bool(measured <= tolerance))


# ---------------------------------------------------------------------------
# Math battery
# ---------------------------------------------------------------------------

def check_lemma1(instances: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        family = random_unit_family(int(rng.integers(2, 51)), int(rng.integers(1, 9)), rng)
        worst = max(worst, lemma1_check(family)[2])
    return _at_most("total variance == 1 - |mean|^2", worst, 1e-10)


def check_spectrum_reconstruction(instances: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        spectrum = variance_spectrum(random_unit_family(int(rng.integers(2, 51)), int(rng.integers(1, 9)), rng))
        rebuilt = (spectrum.eigenvectors * spectrum.eigenvalues) @ spectrum.eigenvectors.T
        worst = max(worst, float(np.max(np.abs(spectrum.matrix - rebuilt))))
    return _at_most("eigen-pairs reconstruct variance matrix", worst, 1e-9)


def check_prop1(instances: int = 100, seed: int = 2) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(instances):
        family = random_unit_family(int(rng.integers(2, 51)), int(rng.integers(1, 9)), rng)
        result = prop1_check(family, k=float(rng.uniform(0.1, 3.0)), value_at_a=float(rng.normal()))
        worst = max(worst, result.lhs - result.bound)
    orthogonal = prop1_check(np.eye(2), k=1.0)
    return [
        _at_most("OOD variance bound (max lhs - bound)", worst, 1e-12),
        _at_most("OOD variance bound, orthogonal pair |bound - 0.25|", abs(orthogonal.bound - 0.25), 1e-12),
        _at_most("OOD variance bound, orthogonal pair lhs", abs(orthogonal.lhs), 1e-12),
    ]


def check_eigen_floor(instances: int = 100, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for _ in range(instances):
        dim = int(rng.integers(1, 9))
        family = random_unit_family(int(rng.integers(2, 51)), dim, rng)
        variance, floor, _ = eigen_lower_bound_check(family, rng.standard_normal(dim), k=1.0)
        worst = max(worst, floor - variance)
    return _at_most("variance along any direction >= lambda_min", worst, 1e-12)


def check_sphere(dims: Sequence[int] = (2, 3, 8), samples: int = 1_000_000, seed: int = 4) -> List[CheckResult]:
    return [_at_most(f"sphere covariance == I/{n}", sphere_cov_check(n, samples, seed + n), 3e-3) for n in dims]


def check_expected_min(sizes: Sequence[int] = (2, 5, 10, 50), draws: int = 1_000_000,
                       seed: int = 5) -> List[CheckResult]:
    results = [_at_most("expected-min approximation N=1 returns m", abs(expected_min_approx(0.7, 1.3, 1) - 0.7), 0.0)]
    for n in sizes:
        mc, _ = mc_expected_min(n, draws, seed + n)
        results.append(_at_most(f"expected-min approximation vs Monte Carlo N={n}",
                                abs(expected_min_approx(0.0, 1.0, n) - mc), 0.06))
    return results


def check_quantile(points: int = 200) -> CheckResult:
    grid = np.concatenate([np.logspace(-10, -1, points // 2), np.linspace(0.1, 0.9, points // 2)])
    grid = np.concatenate([grid, 1.0 - grid])
    worst = max(abs(norm_ppf(float(p)) - bisection_ppf(float(p))) for p in grid)
    return _at_most("normal quantile vs bisection", worst, 1e-8)


def math_checks() -> List[CheckResult]:
    results = [check_lemma1(), check_spectrum_reconstruction()]
    results += check_prop1()
    results.append(check_eigen_floor())
    results += check_sphere()
    results += check_expected_min()
    results.append(check_quantile())
    return results


# ---------------------------------------------------------------------------
# Gradient battery
# ---------------------------------------------------------------------------

def _weighted(node: ad.Node, rng: np.random.Generator) -> ad.Node:
    return ad.reduce_sum(node * ad.constant(rng.standard_normal(node.shape)))


def primitive_cases() -> Dict[str, Callable[[np.random.Generator], tuple]]:
    """
    name -> builder(rng) returning (f, x) where f maps a node to a scalar.

    Inputs keep clear of kinks (relu at 0, clip bounds, ties) so central
    differences are exact to rounding. Coordinates whose gradient is below
    1e-3 are dominated by that rounding and are not scored.
    """
    def away_from_zero(rng, shape):
        return rng.uniform(0.3, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)

    def case(op, make_x, extra=None):
        def build(rng):
            x = make_x(rng)
            other = extra(rng) if extra else None
            w = rng.standard_normal(op(ad.constant(x), other).shape if extra else op(ad.constant(x)).shape)

            def f(node):
                out = op(node, other) if extra else op(node)
                return ad.reduce_sum(out * ad.constant(w))
            return f, x
        return build

    def separated_rows(rng):
        # entries within a row stay at least 0.2 apart
        base = np.tile(np.arange(4, dtype=float) * 0.5, (3, 1))
        return rng.permuted(base, axis=1) + rng.uniform(-0.1, 0.1, size=(3, 4))

    def on_grid(offset):
        return lambda rng: rng.integers(-3, 3, size=(3, 4)) + offset + rng.uniform(-0.2, 0.2, size=(3, 4))

    mat = lambda rng: rng.standard_normal((3, 4))
    pos = lambda rng: rng.uniform(0.5, 2.0, size=(3, 4))
    return {
        "add": case(lambda x, y: x + y, mat, mat),
        "sub": case(lambda x, y: y - x, mat, mat),
        "mul": case(lambda x, y: x * y, mat, mat),
        "divide": case(lambda x, y: y / x, pos, mat),
        "negate": case(lambda x: -x, mat),
        "matmul": case(lambda x, y: ad.matmul(x, y), mat, lambda rng: rng.standard_normal((4, 2))),
        "transpose": case(lambda x: x.T, mat),
        "reshape": case(lambda x: ad.reshape(x, (2, 6)), mat),
        "tanh": case(ad.tanh, mat),
        "relu": case(ad.relu, lambda rng: away_from_zero(rng, (3, 4))),
        "exp": case(ad.exp, mat),
        "log": case(ad.log, pos),
        "square": case(ad.square, mat),
        "sqrt": case(ad.sqrt, pos),
        "sum": case(lambda x: ad.reduce_sum(x, axis=0), mat),
        "mean": case(lambda x: ad.reduce_mean(x, axis=1, keepdims=True), mat),
        "min_over_axis": case(lambda x: ad.min_over_axis(x, axis=1), separated_rows),
        "minimum": case(lambda x, y: ad.minimum(x, y), on_grid(0.0), on_grid(0.5)),
        "clip": case(lambda x: ad.clip(x, -5.0, 5.0), mat),
        "broadcast": case(lambda x: ad.broadcast(ad.reduce_sum(x, axis=0, keepdims=True), (5, 4)), mat),
        "slice": case(lambda x: x[1:3, :2], mat),
        "pad": case(lambda x: ad.pad(x, (slice(1, 4), slice(0, 4)), (5, 4)), mat),
        "concat": case(lambda x, y: ad.concat([x, y, x], axis=1), mat, mat),
    }


def check_primitives(seeds: int = 100, step: float = config.FD_STEP) -> List[CheckResult]:
    results = []
    for name, build in primitive_cases().items():
        worst = 0.0
        for seed in range(seeds):
            f, x = build(np.random.default_rng(seed))
            worst = max(worst, ad.finite_difference_check(f, x, step, atol=1e-3))
        results.append(_at_most(f"gradient of {name} vs finite differences", worst, 1e-6))
    return results


def check_second_order(seed: int = 0, step: float = config.FD_STEP) -> CheckResult:
    """d/dW of ||dQ/da||^2 on a random 2-layer MLP against differences of the first gradient"""
    rng = np.random.default_rng(seed)
    mlp = init_params([3, 6, 1], seed)
    x = rng.standard_normal((4, 3))

    def input_grad_norm(first_layer: ad.Node) -> ad.Node:
        a = ad.variable(x)
        params = [first_layer] + mlp.constants()[1:]
        q = mlp_forward(a, params)
        g = ad.gradient(ad.reduce_sum(q), [a])[a]
        return ad.reduce_sum(ad.square(g))

    error = ad.finite_difference_check(input_grad_norm, mlp.weights[0], step, atol=1e-5)
    return _at_most("second-order gradient of |dQ/da|^2", error, 1e-3)


def _small_problem(seed: int, n: int = 3, width: int = 8, rows: int = 6):
    rng = np.random.default_rng(seed)
    state_dim, action_dim = 2, 2
    ensemble = init_ensemble(state_dim, action_dim, n, [width, width], seed)
    policy = init_policy(state_dim, action_dim, [width, width], seed + 1)
    s = rng.standard_normal((rows, state_dim))
    a = rng.uniform(-0.9, 0.9, size=(rows, action_dim))
    y = rng.standard_normal((rows, 1))
    return rng, ensemble, policy, s, a, y


def _member_param_check(ensemble: QEnsemble, member: int, index: int,
                        build: Callable[[QEnsemble, List[List[ad.Node]]], ad.Node],
                        step: float, atol: float) -> float:
    """Finite-difference error of one parameter tensor of one member"""
    def f(node: ad.Node) -> ad.Node:
        params = [m.constants() for m in ensemble.members]
        params[member][index] = node
        return build(ensemble, params)
    return ad.finite_difference_check(f, ensemble.members[member].parameters[index], step, atol)


def _graph_with(ensemble: QEnsemble, params, s, a, action_grad: bool = False) -> CriticGraph:
    return CriticGraph(ensemble, s, a, action_grad=action_grad, params=params)


def check_losses(seed: int = 0, step: float = config.FD_STEP) -> List[CheckResult]:
    rng, ensemble, policy, s, a, y = _small_problem(seed)
    atol = 1e-5
    results = []

    def sac_n(ens, params):
        losses = q_loss_sac_n(_graph_with(ens, params, s, a), y)
        return sum(losses[1:], losses[0])

    def edac_es(ens, params):
        terms = EsTerms(_graph_with(ens, params, s, a, action_grad=True))
        return es_sum(terms)

    def edac_total(ens, params):
        return q_loss_edac(_graph_with(ens, params, s, a, action_grad=True), y, eta=1.0).total

    weights = np.array([0.2, 0.5, 0.3])

    def rem(ens, params):
        return q_loss_rem(_graph_with(ens, params, s, a), y, weights)

    draw = draw_cql(s.shape[0], a.shape[1], 4, rng)

    def cql(ens, params):
        penalties = cql_penalty_lite(_graph_with(ens, params, s, a), s, policy, 10.0, draw)
        return sum(penalties[1:], penalties[0])

    def var_reg(ens, params):
        return variance_regularizer(_graph_with(ens, params, s, a), 2.0)

    first_order = {"SAC-N Bellman loss": sac_n, "REM loss": rem, "CQL-lite penalty": cql,
                   "variance regularizer": var_reg}
    for name, build in first_order.items():
        worst = max(_member_param_check(ensemble, m, i, build, step, atol) for m, i in ((0, 0), (1, 2), (2, 5)))
        results.append(_at_most(f"gradient of {name}", worst, 1e-5))
    for name, build in {"ES term": edac_es, "EDAC loss": edac_total}.items():
        worst = max(_member_param_check(ensemble, m, i, build, step, atol) for m, i in ((0, 0), (1, 2), (2, 4)))
        results.append(_at_most(f"second-order gradient of {name}", worst, 1e-3))

    noise = rng.standard_normal(a.shape)

    def actor_objective(index, objective):
        def f(node):
            params = policy.trunk.constants()
            params[index] = node
            return objective(params)
        return f

    for name, objective in {
        "policy loss": lambda params: policy_loss(s, ensemble, policy, 0.2, noise, params).loss,
        "BC loss": lambda params: bc_loss(s, a, policy, params),
    }.items():
        worst = max(ad.finite_difference_check(actor_objective(i, objective), policy.trunk.parameters[i], step, atol)
                    for i in (0, 3, 5))
        results.append(_at_most(f"gradient of {name}", worst, 1e-5))
    return results


def gradient_checks() -> List[CheckResult]:
    results = check_primitives()
    results.append(check_second_order())
    results += check_losses()
    return results


def run_suite(suite: str) -> List[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown check suite '{suite}', valid: {', '.join(SUITES)}")
    logger.info(f"🚀 Running {suite} checks")
    results: List[CheckResult] = []
    if suite in ("math", "all"):
        results += math_checks()
    if suite in ("gradients", "all"):
        results += gradient_checks()
    failed = sum(not r.passed for r in results)
    if failed:
        logger.warning(f"❌ {failed} of {len(results)} checks failed")
    else:
        logger.info(f"✅ All {len(results)} checks passed")
    return results
