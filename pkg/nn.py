"""
Networks for the offline RL lab
MLP critics, the tanh-squashed Gaussian actor, the Q-ensemble with its target
copies, Adam, and the binary parameter checkpoint.
"""
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from autodiff import (
    Node, as_node, clip, concat, constant, exp, log, matmul, reduce_sum, relu, square, tanh, variable,
)

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence]
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DimensionError(ValueError):
    """Input batch does not fit a network's input layer"""


class CheckpointError(ValueError):
    """Base class for checkpoint read failures"""


class CheckpointFormatError(CheckpointError):
    """Wrong magic bytes or unsupported version"""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared contents"""


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Mlp:
    """Fully connected relu network; weights are (fan_in, fan_out), the last layer is linear"""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        for upper, lower in zip(self.weights, self.weights[1:]):
            if upper.shape[1] != lower.shape[0]:
                raise DimensionError(f"layer widths disagree: {upper.shape} then {lower.shape}")

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved per layer"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        params = [np.asarray(p, dtype=np.float64) for p in params]
        return Mlp(tuple(params[0::2]), tuple(params[1::2]))

    def leaves(self) -> List[Node]:
        return [variable(p) for p in self.parameters]

    def constants(self) -> List[Node]:
        return [constant(p) for p in self.parameters]


def init_params(widths: Sequence[int], seed: Seed) -> Mlp:
    """
    Build an MLP with weights uniform in +-1/sqrt(fan_in) and zero biases.

    Args:
        widths: input width, hidden widths..., output width
        seed: integer or SeedSequence; identical seeds give bit-identical parameters

    Returns:
        Mlp
    """
    if len(widths) < 2:
        raise DimensionError(f"an MLP needs at least input and output widths, got {list(widths)}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(tuple(weights), tuple(biases))


def mlp_forward(x, params: Sequence[Node]) -> Node:
    """Forward pass through interleaved (W, b) parameter nodes"""
    h = as_node(x)
    layers = len(params) // 2
    for i in range(layers):
        h = matmul(h, params[2 * i]) + params[2 * i + 1]
        if i < layers - 1:
            h = relu(h)
    return h


def hidden_widths(width: int = config.HIDDEN_WIDTH, layers: int = config.HIDDEN_LAYERS) -> List[int]:
    return [width] * layers


# ---------------------------------------------------------------------------
# Q ensemble
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QEnsemble:
    """N critics mapping concat(s, a) to a scalar, plus their target copies"""
    members: Tuple[Mlp, ...]
    targets: Tuple[Mlp, ...]
    state_dim: int
    action_dim: int

    def __post_init__(self):
        if len(self.members) < 2:
            raise ValueError(f"ensemble needs at least 2 members, got {len(self.members)}")
        if len(self.members) != len(self.targets):
            raise ValueError("members and targets differ in count")
        for m, t in zip(self.members, self.targets):
            if [p.shape for p in m.parameters] != [p.shape for p in t.parameters]:
                raise DimensionError("member and target shapes differ")

    @property
    def n(self) -> int:
        return len(self.members)

    def networks(self, which: str) -> Tuple[Mlp, ...]:
        if which == "members":
            return self.members
        if which == "targets":
            return self.targets
        raise ValueError(f"which must be 'members' or 'targets', got {which!r}")

    def replace_members(self, members: Sequence[Mlp]) -> "QEnsemble":
        return QEnsemble(tuple(members), self.targets, self.state_dim, self.action_dim)


def init_ensemble(state_dim: int, action_dim: int, n: int, hidden: Sequence[int], seed: Seed) -> QEnsemble:
    """Members get independent child seeds; targets start as exact copies"""
    widths = [state_dim + action_dim, *hidden, 1]
    children = np.random.SeedSequence(seed).spawn(n) if isinstance(seed, int) else seed.spawn(n)
    members = tuple(init_params(widths, child) for child in children)
    return QEnsemble(members, members, state_dim, action_dim)


def _check_batch(ensemble: QEnsemble, s: Node, a: Node):
    if s.ndim != 2 or a.ndim != 2 or s.shape[0] != a.shape[0]:
        raise DimensionError(f"state batch {s.shape} and action batch {a.shape} do not line up")
    if s.shape[1] != ensemble.state_dim or a.shape[1] != ensemble.action_dim:
        raise DimensionError(
            f"expected state/action widths {ensemble.state_dim}/{ensemble.action_dim}, "
            f"got {s.shape[1]}/{a.shape[1]}")


def q_members(ensemble: QEnsemble, s, a, which: str = "members",
              params: Optional[Sequence[Sequence[Node]]] = None) -> List[Node]:
    """
    Per-member critic outputs, each of shape (B, 1).

    `params` supplies the parameter nodes per member (e.g. variables to
    differentiate); by default the stored parameters enter as constants.
    """
    s, a = as_node(s), as_node(a)
    _check_batch(ensemble, s, a)
    nets = ensemble.networks(which)
    if params is None:
        params = [net.constants() for net in nets]
    sa = concat([s, a], axis=1)
    return [mlp_forward(sa, p) for p in params]


def q_forward(ensemble: QEnsemble, s, a, which: str = "members",
              params: Optional[Sequence[Sequence[Node]]] = None) -> Node:
    """All N critic outputs as one (B, N) node, columns in member order"""
    return concat(q_members(ensemble, s, a, which, params), axis=1)


def soft_update(ensemble: QEnsemble, rho: float) -> QEnsemble:
    """Targets move to rho * target + (1 - rho) * member"""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    targets = []
    for member, target in zip(ensemble.members, ensemble.targets):
        mixed = [rho * t + (1.0 - rho) * m for t, m in zip(target.parameters, member.parameters)]
        targets.append(target.with_parameters(mixed))
    return QEnsemble(ensemble.members, tuple(targets), ensemble.state_dim, ensemble.action_dim)


# ---------------------------------------------------------------------------
# Policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaussianPolicy:
    """Trunk maps s to (mu, log_std) per action dim; actions are tanh-squashed"""
    trunk: Mlp
    action_dim: int

    @property
    def state_dim(self) -> int:
        return self.trunk.widths[0]


def init_policy(state_dim: int, action_dim: int, hidden: Sequence[int], seed: Seed) -> GaussianPolicy:
    return GaussianPolicy(init_params([state_dim, *hidden, 2 * action_dim], seed), action_dim)


def policy_head(policy: GaussianPolicy, s, params: Optional[Sequence[Node]] = None) -> Tuple[Node, Node]:
    s = as_node(s)
    if s.ndim != 2 or s.shape[1] != policy.state_dim:
        raise DimensionError(f"policy expects states of width {policy.state_dim}, got {s.shape}")
    out = mlp_forward(s, params if params is not None else policy.trunk.constants())
    k = policy.action_dim
    mu = out[:, :k]
    log_std = clip(out[:, k:], config.LOG_STD_MIN, config.LOG_STD_MAX)
    return mu, log_std


def _squash_correction(action: Node) -> Node:
    return reduce_sum(log(1.0 - square(action) + config.TANH_EPS), axis=1, keepdims=True)


def policy_sample(policy: GaussianPolicy, s, noise: np.ndarray,
                  params: Optional[Sequence[Node]] = None) -> Tuple[Node, Node]:
    """
    Reparametrized sample a = tanh(mu + sigma * noise).

    Returns:
        (action (B, A), log_prob (B, 1)); both differentiable w.r.t. the
        policy parameters when `params` are variables
    """
    mu, log_std = policy_head(policy, s, params)
    eps = constant(noise)
    if eps.shape != mu.shape:
        raise DimensionError(f"noise shape {eps.shape} does not match action batch {mu.shape}")
    u = clip(mu + exp(log_std) * eps, -config.MAX_PRESQUASH, config.MAX_PRESQUASH)
    action = tanh(u)
    gaussian = reduce_sum(-0.5 * square(eps) - log_std - HALF_LOG_2PI, axis=1, keepdims=True)
    return action, gaussian - _squash_correction(action)


def policy_log_prob(policy: GaussianPolicy, s, a: np.ndarray,
                    params: Optional[Sequence[Node]] = None) -> Node:
    """Log-density of given squashed actions, (B, 1)"""
    mu, log_std = policy_head(policy, s, params)
    bound = 1.0 - config.TANH_EPS
    a = np.clip(np.asarray(a, dtype=np.float64), -bound, bound)
    z = (constant(np.arctanh(a)) - mu) / exp(log_std)
    gaussian = reduce_sum(-0.5 * square(z) - log_std - HALF_LOG_2PI, axis=1, keepdims=True)
    return gaussian - _squash_correction(constant(a))


def policy_mean_action(policy: GaussianPolicy, s: np.ndarray) -> np.ndarray:
    """Deterministic action tanh(mu) used for evaluation"""
    mu, _ = policy_head(policy, np.atleast_2d(s))
    return np.tanh(mu.value)


# ---------------------------------------------------------------------------
# Temperature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Temperature:
    """Entropy coefficient; auto mode learns log beta so beta stays positive"""
    mode: str
    log_beta: float
    target_entropy: float

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)


def make_temperature(beta: Union[str, float], action_dim: int, initial: float = 1.0) -> Temperature:
    if beta == "auto":
        return Temperature("auto", math.log(initial), -float(action_dim))
    beta = float(beta)
    if beta < 0.0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    # beta == 0 is a legitimate fixed setting; log(0) = -inf maps back to exactly 0
    return Temperature("fixed", math.log(beta) if beta > 0 else -math.inf, -float(action_dim))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Adam:
    """Functional Adam state over a flat parameter list"""
    step: int
    m: Tuple[np.ndarray, ...]
    v: Tuple[np.ndarray, ...]
    beta1: float = config.ADAM_BETA1
    beta2: float = config.ADAM_BETA2
    eps: float = config.ADAM_EPS

    @classmethod
    def init(cls, params: Sequence[np.ndarray]) -> "Adam":
        zeros = tuple(np.zeros_like(p, dtype=np.float64) for p in params)
        return cls(0, zeros, zeros)

    def update(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
               lr: float) -> Tuple[List[np.ndarray], "Adam"]:
        t = self.step + 1
        new_params, ms, vs = [], [], []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
            ms.append(m)
            vs.append(v)
        return new_params, Adam(t, tuple(ms), tuple(vs), self.beta1, self.beta2, self.eps)

    def tensors(self) -> List[np.ndarray]:
        return [np.array(float(self.step))] + list(self.m) + list(self.v)

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "Adam":
        count = (len(tensors) - 1) // 2
        return cls(int(tensors[0]), tuple(tensors[1:1 + count]), tuple(tensors[1 + count:]))


# ---------------------------------------------------------------------------
# Checkpoint file
# ---------------------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], networks: Dict[str, Sequence[np.ndarray]]) -> Path:
    """
    Write named tensor lists: magic, u32 version, u32 network count, then per
    network the name, tensor count, and per tensor rank, dims and f64 data
    (all little-endian).
    """
    chunks = [config.CHECKPOINT_MAGIC, struct.pack("<II", config.CHECKPOINT_VERSION, len(networks))]
    for name, tensors in networks.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", len(tensors)))
        for tensor in tensors:
            tensor = np.asarray(tensor, dtype="<f8")
            chunks.append(struct.pack(f"<I{tensor.ndim}I", tensor.ndim, *tensor.shape))
            chunks.append(np.ascontiguousarray(tensor).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"💾 checkpoint written: {path}")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.path}: needed {size} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: Union[str, Path]) -> Dict[str, List[np.ndarray]]:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(len(config.CHECKPOINT_MAGIC))
    if magic != config.CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    version = reader.u32()
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    networks: Dict[str, List[np.ndarray]] = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        tensors = []
        for _ in range(reader.u32()):
            shape = tuple(reader.u32() for _ in range(reader.u32()))
            count = int(np.prod(shape, dtype=np.int64))
            tensors.append(np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape))
        networks[name] = tensors
    if reader.pos != len(reader.data):
        raise CheckpointFormatError(f"{path}: {len(reader.data) - reader.pos} trailing bytes")
    return networks
