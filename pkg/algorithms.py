"""
Actor-critic algorithms for offline RL
SAC, SAC-N (min over N critics), EDAC (SAC-N plus the ensemble-similarity
penalty on action gradients) and the REM / CQL-lite / variance-regularizer / BC
baselines, as a deterministic train-step state machine.
"""
import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

import config
from autodiff import (
    Node, concat, constant, gradient, min_over_axis, minimum, reduce_mean, reduce_sum, sqrt, square, variable,
)
from env import Actor
from nn import (
    Adam, GaussianPolicy, Mlp, QEnsemble, Temperature, hidden_widths, init_ensemble, init_policy,
    load_checkpoint, make_temperature, policy_log_prob, policy_mean_action, policy_sample, q_members, save_checkpoint,
    soft_update,
)

logger = logging.getLogger(__name__)

Algorithm = Literal["sac", "sac-n", "edac", "rem", "cql-lite", "var-reg", "bc"]


class NumericalFailure(ValueError):
    """A loss went non-finite; carries the step index and the loss breakdown"""

    def __init__(self, step: int, losses: Dict[str, float]):
        self.step = step
        self.losses = losses
        detail = ", ".join(f"{k}={v}" for k, v in losses.items())
        super().__init__(f"non-finite loss at step {step}: {detail}")


class TrainConfig(BaseModel):
    """All scalars of one training run"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    algorithm: Algorithm = "edac"
    ensemble_size: int = Field(config.ENSEMBLE_SIZE, ge=2, alias="N")
    eta: Optional[float] = Field(None, ge=0.0)
    beta: Union[Literal["auto"], float] = "auto"
    gamma: float = config.GAMMA
    rho: float = Field(config.RHO, ge=0.0, le=1.0)
    lr_q: float = Field(config.LR_Q, ge=0.0)
    lr_policy: float = Field(config.LR_POLICY, ge=0.0)
    lr_beta: float = Field(config.LR_BETA, ge=0.0)
    batch_size: int = Field(config.BATCH_SIZE, ge=1)
    total_steps: int = Field(config.TOTAL_STEPS, ge=0)
    seed: int = 0
    checkpoint_every: int = Field(config.CHECKPOINT_EVERY, ge=1)
    log_every: int = Field(config.LOG_EVERY, ge=1)
    hidden_width: int = Field(config.HIDDEN_WIDTH, ge=1)
    hidden_layers: int = Field(config.HIDDEN_LAYERS, ge=1)
    es_normalize: Literal["cosine", "raw"] = "cosine"
    es_stop_normalizer: bool = False
    es_form: Literal["pairwise", "sum"] = "pairwise"
    cql_alpha: float = Field(config.CQL_ALPHA, ge=0.0)
    cql_samples: int = Field(config.CQL_SAMPLES, ge=2)
    var_reg_c: float = Field(config.VAR_REG_C, ge=0.0)

    @model_validator(mode="after")
    def _check_reductions(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if isinstance(self.beta, float) and self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if self.eta is None:
            self.eta = config.ES_WEIGHT if self.algorithm == "edac" else 0.0
        if self.algorithm != "edac" and self.eta != 0.0:
            raise ValueError(f"eta must be 0 for algorithm '{self.algorithm}' (got {self.eta}); use edac")
        if self.algorithm == "sac" and self.ensemble_size != 2:
            raise ValueError(f"vanilla sac uses exactly 2 critics, got N={self.ensemble_size}")
        if self.cql_samples % 2:
            raise ValueError(f"cql_samples must be even (half uniform, half policy), got {self.cql_samples}")
        return self

    @property
    def hidden(self) -> List[int]:
        return hidden_widths(self.hidden_width, self.hidden_layers)


class Batch(NamedTuple):
    states: np.ndarray       # (B, S)
    actions: np.ndarray      # (B, A)
    rewards: np.ndarray      # (B, 1)
    next_states: np.ndarray  # (B, S)
    dones: np.ndarray        # (B, 1)


class StepMetrics(BaseModel):
    """One JSON line of metrics.jsonl"""
    model_config = ConfigDict(extra="forbid")

    step: int                # updates completed, counting this one
    algorithm: str
    q_loss: float
    es_loss: Optional[float] = None
    penalty: Optional[float] = None
    policy_loss: float
    beta_loss: Optional[float] = None
    q_mean: float
    q_min: float
    q_policy_mean: float
    entropy: float
    es_mean: Optional[float] = None
    es_zero_rows: int = 0
    beta: float


@dataclass
class TrainerState:
    config: TrainConfig
    ensemble: QEnsemble
    policy: GaussianPolicy
    temperature: Temperature
    q_opt: Adam
    policy_opt: Adam
    beta_opt: Adam
    rng: np.random.Generator
    step: int = 0


def _flatten(nets: Sequence[Mlp]) -> List[np.ndarray]:
    return [p for net in nets for p in net.parameters]


def _unflatten(template: Sequence[Mlp], flat: Sequence[np.ndarray]) -> Tuple[Mlp, ...]:
    out, offset = [], 0
    for net in template:
        count = len(net.parameters)
        out.append(net.with_parameters(flat[offset:offset + count]))
        offset += count
    return tuple(out)


def init_trainer(cfg: TrainConfig, state_dim: int, action_dim: int) -> TrainerState:
    """Fresh networks and optimizers; every draw derives from cfg.seed"""
    critic_seed, policy_seed, rng_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    ensemble = init_ensemble(state_dim, action_dim, cfg.ensemble_size, cfg.hidden, critic_seed)
    policy = init_policy(state_dim, action_dim, cfg.hidden, policy_seed)
    temperature = make_temperature(cfg.beta, action_dim)
    return TrainerState(
        config=cfg,
        ensemble=ensemble,
        policy=policy,
        temperature=temperature,
        q_opt=Adam.init(_flatten(ensemble.members)),
        policy_opt=Adam.init(policy.trunk.parameters),
        beta_opt=Adam.init([np.array(temperature.log_beta)]),
        rng=np.random.default_rng(rng_seed),
    )


# ---------------------------------------------------------------------------
# Bellman target
# ---------------------------------------------------------------------------

def soft_target(rewards: np.ndarray, dones: np.ndarray, next_q: np.ndarray, next_log_prob: np.ndarray,
                beta: float, gamma: float) -> np.ndarray:
    """y = r + gamma * (1 - done) * (next_q - beta * log pi(a'|s'))"""
    return rewards + gamma * (1.0 - dones) * (next_q - beta * next_log_prob)


def bellman_target(batch: Batch, ensemble: QEnsemble, policy: GaussianPolicy, beta: float, gamma: float,
                   noise: np.ndarray, weights: Optional[np.ndarray] = None, clipped_pair: bool = False) -> np.ndarray:
    """
    Shared target for all critics, returned as a plain array so no gradient
    can flow into it. The target networks are reduced with min over members,
    a two-argument minimum (vanilla SAC) or a weighted sum (REM).
    """
    next_action, next_log_prob = policy_sample(policy, batch.next_states, noise)
    qs = q_members(ensemble, batch.next_states, next_action.value, which="targets")
    if weights is not None:
        next_q = sum(w * q.value for w, q in zip(weights, qs))
    elif clipped_pair:
        next_q = minimum(qs[0], qs[1]).value
    else:
        next_q = min_over_axis(concat(qs, axis=1), axis=1).value
    return soft_target(batch.rewards, batch.dones, next_q, next_log_prob.value, beta, gamma)


# ---------------------------------------------------------------------------
# Critic losses
# ---------------------------------------------------------------------------

class CriticGraph:
    """
    Critic forward pass with every member parameter as a variable.

    With `action_grad` the dataset actions are a variable too, so input
    gradients dQ_i/da can be built (and differentiated again).
    """

    def __init__(self, ensemble: QEnsemble, states: np.ndarray, actions: np.ndarray, action_grad: bool = False,
                 params: Optional[List[List[Node]]] = None):
        self.ensemble = ensemble
        self.params = params if params is not None else [member.leaves() for member in ensemble.members]
        self.actions = variable(actions) if action_grad else constant(actions)
        self.qs = q_members(ensemble, states, self.actions, params=self.params)
        self._input_grads: Dict[int, Node] = {}

    @property
    def flat_params(self) -> List[Node]:
        return [p for member in self.params for p in member]

    def input_gradient(self, i: int) -> Node:
        """(B, A) node holding dQ_i/da per row"""
        if not self.actions.requires_grad:
            raise ValueError("input gradients need a graph built with action_grad=True")
        if i not in self._input_grads:
            self._input_grads[i] = gradient(reduce_sum(self.qs[i]), [self.actions])[self.actions]
        return self._input_grads[i]


def q_loss_sac_n(graph: CriticGraph, y: np.ndarray) -> List[Node]:
    """Per-member Bellman MSE against the shared target"""
    target = constant(y)
    return [reduce_mean(square(q - target)) for q in graph.qs]


def _unit_gradient(g: Node, normalize: str, stop_normalizer: bool) -> Node:
    if normalize == "raw":
        return g
    norm = sqrt(reduce_sum(square(g), axis=1, keepdims=True) + config.ES_EPS ** 2)
    if stop_normalizer:
        norm = constant(norm.value)
    return g / norm


class EsTerms:
    """Normalized input gradients of one critic graph"""

    def __init__(self, graph: CriticGraph, normalize: str = "cosine", stop_normalizer: bool = False):
        self.graph = graph
        self.raw = [graph.input_gradient(i) for i in range(graph.ensemble.n)]
        self.units = [_unit_gradient(g, normalize, stop_normalizer) for g in self.raw]

    def zero_rows(self) -> int:
        """Rows where some member's input gradient vanishes"""
        norms = np.stack([np.linalg.norm(g.value, axis=1) for g in self.raw], axis=1)
        return int(np.sum(np.any(norms < config.ES_EPS, axis=1)))


def es_pair(terms: EsTerms, i: int, j: int) -> Node:
    """Batch mean of <g_i, g_j> on normalized action gradients"""
    if i == j:
        raise ValueError("es_pair needs two distinct members")
    return reduce_mean(reduce_sum(terms.units[i] * terms.units[j], axis=1))


def es_sum(terms: EsTerms, form: str = "pairwise") -> Node:
    """Sum of ES over ordered pairs i != j"""
    n = len(terms.units)
    if form == "sum":
        total = terms.units[0]
        for g in terms.units[1:]:
            total = total + g
        per_row = reduce_sum(square(total), axis=1)
        for g in terms.units:
            per_row = per_row - reduce_sum(square(g), axis=1)
        return reduce_mean(per_row)
    unordered = None
    for i in range(n):
        for j in range(i + 1, n):
            pair = es_pair(terms, i, j)
            unordered = pair if unordered is None else unordered + pair
    return 2.0 * unordered


class CriticLoss(NamedTuple):
    members: List[Node]
    total: Node
    es: Optional[Node] = None
    penalty: Optional[Node] = None
    es_zero_rows: int = 0


def _sum_nodes(nodes: Sequence[Node]) -> Node:
    total = nodes[0]
    for node in nodes[1:]:
        total = total + node
    return total


def q_loss_edac(graph: CriticGraph, y: np.ndarray, eta: float, normalize: str = "cosine",
                stop_normalizer: bool = False, form: str = "pairwise") -> CriticLoss:
    """SAC-N loss plus eta / (N - 1) times the ES sum at dataset actions"""
    n = graph.ensemble.n
    if n < 2:
        raise ValueError(f"EDAC needs N >= 2, got {n}")
    members = q_loss_sac_n(graph, y)
    total = _sum_nodes(members)
    if eta == 0.0:
        return CriticLoss(members, total)
    terms = EsTerms(graph, normalize, stop_normalizer)
    es = es_sum(terms, form)
    return CriticLoss(members, total + (eta / (n - 1)) * es, es, None, terms.zero_rows())


def draw_rem_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    """xi_k = xi'_k / sum(xi'), xi' ~ U(0, 1)"""
    raw = rng.uniform(0.0, 1.0, size=n)
    return raw / raw.sum()


def q_loss_rem(graph: CriticGraph, y: np.ndarray, weights: np.ndarray) -> Node:
    """Single Bellman MSE of the convex combination sum_j xi_j Q_j"""
    combined = _sum_nodes([float(w) * q for w, q in zip(weights, graph.qs)])
    return reduce_mean(square(combined - constant(y)))


class CqlDraw(NamedTuple):
    uniform_actions: np.ndarray  # (B * m/2, A)
    policy_noise: np.ndarray     # (B * m/2, A)


def draw_cql(batch_size: int, action_dim: int, samples: int, rng: np.random.Generator) -> CqlDraw:
    half = samples // 2
    return CqlDraw(rng.uniform(-1.0, 1.0, size=(batch_size * half, action_dim)),
                   rng.standard_normal((batch_size * half, action_dim)))


def cql_penalty_lite(graph: CriticGraph, states: np.ndarray, policy: GaussianPolicy, alpha: float,
                     draw: CqlDraw) -> List[Node]:
    """Per member alpha * (mean Q over sampled actions - mean Q over dataset actions)"""
    half = draw.uniform_actions.shape[0] // states.shape[0]
    repeated = np.repeat(states, half, axis=0)
    policy_actions, _ = policy_sample(policy, repeated, draw.policy_noise)
    sampled_states = np.concatenate([repeated, repeated], axis=0)
    sampled_actions = np.concatenate([draw.uniform_actions, policy_actions.value], axis=0)
    sampled = q_members(graph.ensemble, sampled_states, sampled_actions, params=graph.params)
    return [alpha * (reduce_mean(qs) - reduce_mean(qd)) for qs, qd in zip(sampled, graph.qs)]


def variance_regularizer(graph: CriticGraph, c: float) -> Node:
    """-c * batch mean of the member variance (divisor N)"""
    qcat = concat(graph.qs, axis=1)
    centered = qcat - reduce_mean(qcat, axis=1, keepdims=True)
    return -c * reduce_mean(reduce_mean(square(centered), axis=1))


# ---------------------------------------------------------------------------
# Policy loss
# ---------------------------------------------------------------------------

class PolicyLoss(NamedTuple):
    loss: Node
    log_prob: Node
    q_pi: Node


def policy_loss(states: np.ndarray, ensemble: QEnsemble, policy: GaussianPolicy, beta: float,
                noise: np.ndarray, params: Optional[Sequence[Node]] = None,
                reduce: str = "min") -> PolicyLoss:
    """
    -mean(Q(s, a~) - beta * log pi(a~|s)) on the online critics.

    `reduce` picks the critic aggregate: "min" over members, "pair" for the
    two-argument minimum of vanilla SAC, or "mean" for REM.
    """
    action, log_prob = policy_sample(policy, states, noise, params)
    qs = q_members(ensemble, states, action)
    if reduce == "pair":
        q_pi = minimum(qs[0], qs[1])
    elif reduce == "mean":
        q_pi = reduce_mean(concat(qs, axis=1), axis=1, keepdims=True)
    else:
        q_pi = min_over_axis(concat(qs, axis=1), axis=1)
    loss = -reduce_mean(q_pi - beta * log_prob)
    return PolicyLoss(loss, log_prob, q_pi)


def bc_loss(states: np.ndarray, actions: np.ndarray, policy: GaussianPolicy,
            params: Optional[Sequence[Node]] = None) -> Node:
    return -reduce_mean(policy_log_prob(policy, states, actions, params))


# ---------------------------------------------------------------------------
# Train step
# ---------------------------------------------------------------------------

def _critic_loss(state: TrainerState, batch: Batch, y: np.ndarray,
                 rem_weights: Optional[np.ndarray], cql: Optional[CqlDraw]) -> Tuple[CriticGraph, CriticLoss]:
    cfg = state.config
    algo = cfg.algorithm
    graph = CriticGraph(state.ensemble, batch.states, batch.actions, action_grad=(algo == "edac" and cfg.eta > 0))
    if algo == "edac":
        return graph, q_loss_edac(graph, y, cfg.eta, cfg.es_normalize, cfg.es_stop_normalizer, cfg.es_form)
    if algo == "rem":
        loss = q_loss_rem(graph, y, rem_weights)
        return graph, CriticLoss([loss], loss)
    members = q_loss_sac_n(graph, y)
    total = _sum_nodes(members)
    if algo == "cql-lite":
        penalty = _sum_nodes(cql_penalty_lite(graph, batch.states, state.policy, cfg.cql_alpha, cql))
        return graph, CriticLoss(members, total + penalty, None, penalty)
    if algo == "var-reg":
        penalty = variance_regularizer(graph, cfg.var_reg_c)
        return graph, CriticLoss(members, total + penalty, None, penalty)
    return graph, CriticLoss(members, total)


def _raise_if_non_finite(step: int, losses: Dict[str, Optional[float]]):
    present = {k: v for k, v in losses.items() if v is not None}
    if not all(np.isfinite(v) for v in present.values()):
        raise NumericalFailure(step, present)


def train_step(state: TrainerState, dataset) -> Tuple[TrainerState, StepMetrics]:
    """
    One update: target, critic update, policy update, temperature update,
    soft target update.

    Draw order from the state's generator is fixed: minibatch, next-action
    noise, policy noise, then algorithm extras (REM weights or CQL samples).
    The input state is left untouched, its generator included.

    Args:
        state: Trainer state before the update
        dataset: Anything with `sample(batch_size, rng) -> Batch`

    Returns:
        The next state (step + 1, advanced generator) and the update's metrics

    Raises:
        NumericalFailure: a critic or policy loss came out non-finite
    """
    cfg = state.config
    algo = cfg.algorithm
    rng = copy.deepcopy(state.rng)
    batch = dataset.sample(cfg.batch_size, rng)
    rows, action_dim = batch.actions.shape
    next_noise = rng.standard_normal((rows, action_dim))
    pi_noise = rng.standard_normal((rows, action_dim))
    rem_weights = draw_rem_weights(cfg.ensemble_size, rng) if algo == "rem" else None
    cql = draw_cql(rows, action_dim, cfg.cql_samples, rng) if algo == "cql-lite" else None
    beta = state.temperature.beta

    ensemble, q_opt = state.ensemble, state.q_opt
    critic: Optional[CriticLoss] = None
    if algo != "bc":
        y = bellman_target(batch, ensemble, state.policy, beta, cfg.gamma, next_noise,
                           weights=rem_weights, clipped_pair=(algo == "sac"))
        graph, critic = _critic_loss(state, batch, y, rem_weights, cql)
        _raise_if_non_finite(state.step, {"q_loss": float(critic.total.value)})
        params = graph.flat_params
        grads = gradient(critic.total, params).tensors(params)
        flat, q_opt = q_opt.update(_flatten(ensemble.members), grads, cfg.lr_q)
        ensemble = ensemble.replace_members(_unflatten(ensemble.members, flat))

    policy_params = state.policy.trunk.leaves()
    reduce = {"sac": "pair", "rem": "mean"}.get(algo, "min")
    pl = policy_loss(batch.states, ensemble, state.policy, beta, pi_noise, policy_params, reduce)
    objective = bc_loss(batch.states, batch.actions, state.policy, policy_params) if algo == "bc" else pl.loss
    _raise_if_non_finite(state.step, {
        "q_loss": float(critic.total.value) if critic else None,
        "policy_loss": float(objective.value),
    })
    grads = gradient(objective, policy_params).tensors(policy_params)
    trunk_params, policy_opt = state.policy_opt.update(state.policy.trunk.parameters, grads, cfg.lr_policy)
    policy = replace(state.policy, trunk=state.policy.trunk.with_parameters(trunk_params))

    temperature, beta_opt, beta_loss = state.temperature, state.beta_opt, None
    if temperature.mode == "auto":
        slack = float(np.mean(pl.log_prob.value)) + temperature.target_entropy
        beta_loss = -temperature.log_beta * slack
        (log_beta,), beta_opt = beta_opt.update([np.array(temperature.log_beta)], [np.array(-slack)], cfg.lr_beta)
        temperature = replace(temperature, log_beta=float(log_beta))

    ensemble = soft_update(ensemble, cfg.rho)

    q_data = graph.qs if critic is not None else q_members(state.ensemble, batch.states, batch.actions)
    qcat = np.concatenate([q.value for q in q_data], axis=1)
    metrics = StepMetrics(
        step=state.step + 1,
        algorithm=algo,
        q_loss=float(critic.total.value) if critic else 0.0,
        es_loss=float(critic.es.value) if critic is not None and critic.es is not None else None,
        penalty=float(critic.penalty.value) if critic is not None and critic.penalty is not None else None,
        policy_loss=float(objective.value),
        beta_loss=beta_loss,
        q_mean=float(np.mean(qcat)),
        q_min=float(np.mean(np.min(qcat, axis=1))),
        q_policy_mean=float(np.mean(pl.q_pi.value)),
        entropy=float(-np.mean(pl.log_prob.value)),
        es_mean=_es_mean(critic, cfg.ensemble_size),
        es_zero_rows=critic.es_zero_rows if critic else 0,
        beta=beta,
    )
    new_state = TrainerState(cfg, ensemble, policy, temperature, q_opt, policy_opt, beta_opt, rng, state.step + 1)
    return new_state, metrics


def _es_mean(critic: Optional[CriticLoss], n: int) -> Optional[float]:
    """Mean pairwise ES, i.e. the ordered-pair sum over N(N-1) pairs"""
    if critic is None or critic.es is None:
        return None
    return float(critic.es.value) / (n * (n - 1))


# ---------------------------------------------------------------------------
# Actors and persistence
# ---------------------------------------------------------------------------

def make_actor(policy: GaussianPolicy, deterministic: bool = True) -> Actor:
    """Wrap a policy as an env actor; deterministic uses tanh(mu)"""
    def act(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        s = np.asarray(state, dtype=np.float64).reshape(1, -1)
        if deterministic:
            return policy_mean_action(policy, s)[0]
        action, _ = policy_sample(policy, s, rng.standard_normal((1, policy.action_dim)))
        return action.value[0]
    return act


def policy_from_tensors(tensors: Sequence[np.ndarray]) -> GaussianPolicy:
    trunk = Mlp(tuple(tensors[0::2]), tuple(tensors[1::2]))
    return GaussianPolicy(trunk, trunk.widths[-1] // 2)


def save_policy(policy: GaussianPolicy, path: Union[str, Path]) -> Path:
    return save_checkpoint(path, {"policy": policy.trunk.parameters})


def load_policy(path: Union[str, Path]) -> GaussianPolicy:
    networks = load_checkpoint(path)
    return policy_from_tensors(networks["policy"])


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".state.json")


def save_trainer(state: TrainerState, path: Union[str, Path]) -> Path:
    """
    Checkpoint file with every network and optimizer moment, plus a JSON
    sidecar holding the step counter, generator state and config.
    """
    path = Path(path)
    networks: Dict[str, List[np.ndarray]] = {}
    for i, member in enumerate(state.ensemble.members):
        networks[f"member.{i}"] = member.parameters
    for i, target in enumerate(state.ensemble.targets):
        networks[f"target.{i}"] = target.parameters
    networks["policy"] = state.policy.trunk.parameters
    networks["temperature"] = [np.array(state.temperature.log_beta), np.array(state.temperature.target_entropy)]
    networks["adam.q"] = state.q_opt.tensors()
    networks["adam.policy"] = state.policy_opt.tensors()
    networks["adam.beta"] = state.beta_opt.tensors()
    save_checkpoint(path, networks)
    sidecar = {
        "step": state.step,
        "temperature_mode": state.temperature.mode,
        "rng": state.rng.bit_generator.state,
        "config": state.config.model_dump(mode="json", by_alias=True),
    }
    _sidecar(path).write_text(json.dumps(sidecar, sort_keys=True, indent=2))
    return path


def load_trainer(path: Union[str, Path]) -> TrainerState:
    path = Path(path)
    networks = load_checkpoint(path)
    sidecar = json.loads(_sidecar(path).read_text())
    cfg = TrainConfig.model_validate(sidecar["config"])
    members = tuple(Mlp(tuple(t[0::2]), tuple(t[1::2]))
                    for t in (networks[f"member.{i}"] for i in range(cfg.ensemble_size)))
    targets = tuple(Mlp(tuple(t[0::2]), tuple(t[1::2]))
                    for t in (networks[f"target.{i}"] for i in range(cfg.ensemble_size)))
    policy = policy_from_tensors(networks["policy"])
    state_dim = policy.state_dim
    log_beta, target_entropy = networks["temperature"]
    rng = np.random.default_rng()
    rng.bit_generator.state = sidecar["rng"]
    return TrainerState(
        config=cfg,
        ensemble=QEnsemble(members, targets, state_dim, policy.action_dim),
        policy=policy,
        temperature=Temperature(sidecar["temperature_mode"], float(log_beta), float(target_entropy)),
        q_opt=Adam.from_tensors(networks["adam.q"]),
        policy_opt=Adam.from_tensors(networks["adam.policy"]),
        beta_opt=Adam.from_tensors(networks["adam.beta"]),
        rng=rng,
        step=int(sidecar["step"]),
    )
