"""
Offline dataset construction
Behavior policies from a cached online SAC run, the six dataset tiers, and
the ODRL binary format with its JSON metadata sidecar.
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

import config
from algorithms import Batch, TrainConfig, init_trainer, load_policy, make_actor, save_policy, train_step
from env import (
    EnvSpec, ScoreAnchors, evaluate_returns, normalized_score, random_reference, reset, rollout, step, uniform_actor,
)
from nn import GaussianPolicy

logger = logging.getLogger(__name__)

TIERS = ("random", "medium", "expert", "medium-expert", "medium-replay", "full-replay")
HEADER = struct.Struct("<4sIIIQ")
REFERENCE_STREAM = 0x5EED  # keeps the reference run's env stream apart from trainer seeds


class DatasetError(ValueError):
    """Base class for dataset errors"""


class DatasetVersionError(DatasetError):
    """Magic bytes or format version do not match"""


class DatasetTruncatedError(DatasetError):
    """File shorter than its header declares"""


class DatasetDimensionError(DatasetError):
    """Header, sidecar and payload disagree on dimensions"""


class EmptyDatasetError(DatasetError):
    """A dataset must hold at least one transition"""


class UnknownTierError(DatasetError):
    def __init__(self, tier: str):
        self.tier = tier
        super().__init__(f"unknown tier '{tier}', valid tiers: {', '.join(TIERS)}")


class ReferenceTrainingError(DatasetError):
    """The online run never produced a medium-quality snapshot"""

    def __init__(self, message: str, history: Sequence[Tuple[int, float]]):
        self.history = list(history)
        trail = ", ".join(f"{s}:{v:.1f}" for s, v in self.history)
        super().__init__(f"{message}; normalized scores by step: [{trail}]")


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


class DatasetMeta(BaseModel):
    """Contents of `<path>.meta.json`"""
    model_config = ConfigDict(extra="forbid")

    tier: str
    seed: int
    count: int
    anchors: ScoreAnchors
    env: EnvSpec
    behavior_policies: List[str] = []


def sample_indices(size: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform minibatch indices, with replacement"""
    if size < 1:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    return rng.integers(0, size, size=batch_size)


@dataclass(eq=False)
class OfflineDataset:
    """Columnar transitions of one tier"""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    tier: str
    spec: EnvSpec
    seed: int
    anchors: ScoreAnchors
    behavior_policies: List[str] = field(default_factory=list)

    def __post_init__(self):
        count = len(self.rewards)
        if count == 0:
            raise EmptyDatasetError(f"{self.tier} dataset has no transitions")
        if self.tier not in TIERS:
            raise UnknownTierError(self.tier)
        expected = {
            "states": (count, self.spec.state_dim),
            "actions": (count, self.spec.action_dim),
            "next_states": (count, self.spec.state_dim),
            "dones": (count,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DatasetDimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if not np.all(np.isfinite(self.rewards)):
            raise DatasetError("rewards must be finite")

    def __len__(self) -> int:
        return len(self.rewards)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        arrays = ("states", "actions", "rewards", "next_states", "dones")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and self.meta() == other.meta())

    def meta(self) -> DatasetMeta:
        return DatasetMeta(tier=self.tier, seed=self.seed, count=len(self), anchors=self.anchors,
                           env=self.spec, behavior_policies=self.behavior_policies)

    def transitions(self) -> List[Transition]:
        return [Transition(self.states[i], self.actions[i], float(self.rewards[i]),
                           self.next_states[i], bool(self.dones[i])) for i in range(len(self))]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = sample_indices(len(self), batch_size, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx, None],
                     self.next_states[idx], self.dones[idx, None])

    def mean_reward(self) -> float:
        return float(np.mean(self.rewards))


def concat_datasets(parts: Sequence[OfflineDataset], tier: str, seed: int,
                    behavior_policies: Sequence[str] = ()) -> OfflineDataset:
    return OfflineDataset(
        states=np.concatenate([p.states for p in parts]),
        actions=np.concatenate([p.actions for p in parts]),
        rewards=np.concatenate([p.rewards for p in parts]),
        next_states=np.concatenate([p.next_states for p in parts]),
        dones=np.concatenate([p.dones for p in parts]),
        tier=tier, spec=parts[0].spec, seed=seed, anchors=parts[0].anchors,
        behavior_policies=list(behavior_policies),
    )


# ---------------------------------------------------------------------------
# Replay buffer of the online run
# ---------------------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity transition store that the online SAC samples from"""

    def __init__(self, spec: EnvSpec, capacity: int):
        self.spec = spec
        self.states = np.zeros((capacity, spec.state_dim))
        self.actions = np.zeros((capacity, spec.action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, spec.state_dim))
        self.dones = np.zeros(capacity)
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s: np.ndarray, a: np.ndarray, r: float, s_next: np.ndarray, done: bool):
        i = self.size
        self.states[i], self.actions[i], self.rewards[i] = s, a, r
        self.next_states[i], self.dones[i] = s_next, float(done)
        self.size += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = sample_indices(self.size, batch_size, rng)
        return Batch(self.states[idx], self.actions[idx], self.rewards[idx, None],
                     self.next_states[idx], self.dones[idx, None])

    def to_dataset(self, tier: str, seed: int, anchors: ScoreAnchors, upto: Optional[int] = None,
                   behavior_policies: Sequence[str] = ()) -> OfflineDataset:
        n = self.size if upto is None else upto
        return OfflineDataset(self.states[:n].copy(), self.actions[:n].copy(), self.rewards[:n].copy(),
                              self.next_states[:n].copy(), self.dones[:n].copy(),
                              tier, self.spec, seed, anchors, list(behavior_policies))


# ---------------------------------------------------------------------------
# Reference run (online SAC producing the behavior policies)
# ---------------------------------------------------------------------------

@dataclass
class Snapshot:
    step: int
    policy: GaussianPolicy
    mean_return: float
    buffer_size: int


@dataclass
class ReferenceRun:
    spec: EnvSpec
    seed: int
    expert: GaussianPolicy
    medium: GaussianPolicy
    anchors: ScoreAnchors
    expert_score: float
    medium_score: float
    medium_step: int
    medium_buffer_size: int
    replay: OfflineDataset
    history: List[Tuple[int, float]]

    def summary(self) -> Dict[str, Any]:
        return {
            "env": self.spec.name,
            "seed": self.seed,
            "random_ref": self.anchors.random_ref,
            "expert_ref": self.anchors.expert_ref,
            "expert_score": self.expert_score,
            "medium_score": self.medium_score,
            "medium_step": self.medium_step,
            "medium_buffer_size": self.medium_buffer_size,
            "history": [list(h) for h in self.history],
        }


def reference_config(seed: int, steps: int) -> TrainConfig:
    return TrainConfig(
        algorithm="sac", N=2, beta="auto", seed=seed, total_steps=steps,
        batch_size=config.REFERENCE_BATCH_SIZE,
        hidden_width=config.REFERENCE_HIDDEN_WIDTH, hidden_layers=2,
    )


def _pick_medium(snapshots: Sequence[Snapshot], scores: Sequence[float]) -> Optional[int]:
    for low, high in (config.MEDIUM_SCORE_BAND, config.MEDIUM_SCORE_FALLBACK):
        for i, score in enumerate(scores):
            if low <= score <= high:
                return i
    return None


def train_reference_policies(spec: EnvSpec, seed: int, steps: int = config.REFERENCE_STEPS,
                             start_steps: int = config.REFERENCE_START_STEPS,
                             eval_every: int = config.REFERENCE_EVAL_EVERY,
                             eval_episodes: int = config.REFERENCE_EVAL_EPISODES,
                             anchor_episodes: int = config.ANCHOR_EPISODES) -> ReferenceRun:
    """
    Online SAC with a uniform warm-up. The best deterministic snapshot is the
    expert; the medium policy is the first snapshot whose normalized score
    lands in the medium band (widened band as fallback).
    """
    logger.info(f"🚀 Training reference SAC on {spec.name} (seed {seed}, {steps} steps)")
    cfg = reference_config(seed, steps)
    trainer = init_trainer(cfg, spec.state_dim, spec.action_dim)
    env_rng = np.random.default_rng(np.random.SeedSequence((seed, REFERENCE_STREAM)))
    buffer = ReplayBuffer(spec, steps)
    explore = uniform_actor(spec)

    snapshots: List[Snapshot] = []
    state, t_episode = reset(spec, env_rng), 0
    for t in range(steps):
        actor = explore if t < start_steps else make_actor(trainer.policy, deterministic=False)
        action = np.clip(actor(state, env_rng), -1.0, 1.0)
        result = step(spec, state, action, t_episode)
        # horizon cutoffs are stored as non-terminal
        buffer.add(state, action, result.reward, result.next_state, False)
        state, t_episode = result.next_state, t_episode + 1
        if result.done:
            state, t_episode = reset(spec, env_rng), 0

        if t + 1 >= start_steps and len(buffer) >= cfg.batch_size:
            trainer, _ = train_step(trainer, buffer)

        if (t + 1) % eval_every == 0:
            returns = evaluate_returns(spec, make_actor(trainer.policy), eval_episodes, seed)
            snapshots.append(Snapshot(t + 1, trainer.policy, float(np.mean(returns)), len(buffer)))
            logger.debug(f"📈 step {t + 1}: deterministic return {snapshots[-1].mean_return:.2f}")

    if not snapshots:
        raise ReferenceTrainingError(f"no evaluation snapshot within {steps} steps", [])

    random_ref, _ = random_reference(spec, anchor_episodes, seed)
    best = max(range(len(snapshots)), key=lambda i: (snapshots[i].mean_return, i))
    expert = snapshots[best]
    expert_ref = float(np.mean(evaluate_returns(spec, make_actor(expert.policy), anchor_episodes, seed)))
    if not expert_ref > random_ref:
        raise ReferenceTrainingError(
            f"best snapshot (return {expert_ref:.2f}) does not beat the uniform policy ({random_ref:.2f})", [])
    anchors = ScoreAnchors(random_ref=random_ref, expert_ref=expert_ref)
    scores = [normalized_score(s.mean_return, anchors) for s in snapshots]
    history = [(s.step, score) for s, score in zip(snapshots, scores)]

    pick = _pick_medium(snapshots, scores)
    if pick is None:
        raise ReferenceTrainingError(
            f"no snapshot reached a normalized score in {config.MEDIUM_SCORE_FALLBACK} on {spec.name}", history)
    medium = snapshots[pick]
    logger.info(f"✅ Reference run done: expert return {expert_ref:.2f}, medium at step {medium.step} "
                f"(score {scores[pick]:.1f})")
    return ReferenceRun(
        spec=spec, seed=seed, expert=expert.policy, medium=medium.policy, anchors=anchors,
        expert_score=100.0, medium_score=scores[pick], medium_step=medium.step,
        medium_buffer_size=medium.buffer_size,
        replay=buffer.to_dataset("full-replay", seed, anchors),
        history=history,
    )


class ReferenceCache:
    """
    On-disk cache of reference runs
    - Keys hash the run parameters, so every tier of one env/seed shares a run
    - Key versioning for invalidation
    """

    def __init__(self, root: Union[str, Path] = Path(config.DATA_DIR) / ".reference"):
        self.root = Path(root)
        self.cache_version = config.REFERENCE_CACHE_VERSION

    def _generate_cache_key(self, params: Dict[str, Any]) -> str:
        param_string = json.dumps(sorted(params.items()), sort_keys=True)
        param_hash = hashlib.md5(param_string.encode()).hexdigest()[:12]
        return f"{params['env']}-{self.cache_version}-{param_hash}"

    def directory(self, params: Dict[str, Any]) -> Path:
        return self.root / self._generate_cache_key(params)

    def get(self, spec: EnvSpec, params: Dict[str, Any]) -> Optional[ReferenceRun]:
        path = self.directory(params)
        summary_path = path / "reference.json"
        if not summary_path.exists():
            logger.info(f"❌ Reference cache MISS: {path.name}")
            return None
        summary = json.loads(summary_path.read_text())
        replay = load(path / "replay.odrl")
        logger.info(f"🎯 Reference cache HIT: {path.name}")
        return ReferenceRun(
            spec=spec, seed=summary["seed"],
            expert=load_policy(path / "expert.ckpt"), medium=load_policy(path / "medium.ckpt"),
            anchors=replay.anchors, expert_score=summary["expert_score"],
            medium_score=summary["medium_score"], medium_step=summary["medium_step"],
            medium_buffer_size=summary["medium_buffer_size"], replay=replay,
            history=[tuple(h) for h in summary["history"]],
        )

    def set(self, run: ReferenceRun, params: Dict[str, Any]) -> Path:
        path = self.directory(params)
        path.mkdir(parents=True, exist_ok=True)
        save_policy(run.expert, path / "expert.ckpt")
        save_policy(run.medium, path / "medium.ckpt")
        save(run.replay, path / "replay.odrl")
        (path / "reference.json").write_text(json.dumps(run.summary(), sort_keys=True, indent=2))
        logger.info(f"💾 Cached reference run: {path}")
        return path


def get_reference_run(spec: EnvSpec, seed: int, cache: Optional[ReferenceCache] = None,
                      steps: int = config.REFERENCE_STEPS) -> ReferenceRun:
    """Get-or-train the reference run for (env, seed, steps)"""
    params = {"env": spec.name, "seed": seed, "steps": steps, "spec": spec.model_dump(mode="json")}
    if cache is not None:
        cached = cache.get(spec, params)
        if cached is not None:
            return cached
    run = train_reference_policies(spec, seed, steps=steps)
    if cache is not None:
        cache.set(run, params)
    return run


# ---------------------------------------------------------------------------
# Tier collection
# ---------------------------------------------------------------------------

def _collect_rollouts(spec: EnvSpec, actor, n: int, seed, tier: str, anchors: ScoreAnchors,
                      behavior: Sequence[str] = ()) -> OfflineDataset:
    rng = np.random.default_rng(seed)
    columns: Dict[str, List[np.ndarray]] = {"s": [], "a": [], "r": [], "s2": []}
    collected = 0
    while collected < n:
        episode = rollout(spec, actor, rng)
        take = min(spec.horizon, n - collected)
        columns["s"].append(episode.states[:take])
        columns["a"].append(episode.actions[:take])
        columns["r"].append(episode.rewards[:take])
        columns["s2"].append(episode.next_states[:take])
        collected += take
    return OfflineDataset(
        np.concatenate(columns["s"]), np.concatenate(columns["a"]), np.concatenate(columns["r"]),
        np.concatenate(columns["s2"]), np.zeros(n), tier, spec,
        seed if isinstance(seed, int) else 0, anchors, list(behavior),
    )


def collect(spec: EnvSpec, tier: str, n: int, seed: int, reference: ReferenceRun) -> OfflineDataset:
    """
    Build one tier.

    random, medium and expert roll out the uniform or stochastic behavior
    policy for n transitions; medium-expert concatenates n/2 of each;
    the replay tiers take the reference run's buffer (up to the medium
    snapshot, or whole) and ignore n.

    Args:
        spec: Environment to roll out in
        tier: One of TIERS
        n: Transitions to collect (at least 2 for medium-expert)
        seed: Seed for the rollout streams
        reference: Reference run holding the behavior policies and replay buffer

    Returns:
        The collected OfflineDataset

    Raises:
        UnknownTierError: tier is not one of TIERS
        EmptyDatasetError: n is too small for the tier
    """
    if tier not in TIERS:
        raise UnknownTierError(tier)
    if n < 1:
        raise EmptyDatasetError(f"n must be at least 1, got {n}")
    if tier == "medium-expert" and n < 2:
        raise EmptyDatasetError(f"medium-expert needs n >= 2 to hold both halves, got {n}")
    anchors = reference.anchors
    medium_actor = make_actor(reference.medium, deterministic=False)
    expert_actor = make_actor(reference.expert, deterministic=False)

    if tier == "random":
        dataset = _collect_rollouts(spec, uniform_actor(spec), n, seed, tier, anchors)
    elif tier == "medium":
        dataset = _collect_rollouts(spec, medium_actor, n, seed, tier, anchors, ["medium"])
    elif tier == "expert":
        dataset = _collect_rollouts(spec, expert_actor, n, seed, tier, anchors, ["expert"])
    elif tier == "medium-expert":
        medium_seed, expert_seed = np.random.SeedSequence(seed).spawn(2)
        half = n // 2
        parts = [_collect_rollouts(spec, medium_actor, half, medium_seed, "medium", anchors),
                 _collect_rollouts(spec, expert_actor, n - half, expert_seed, "expert", anchors)]
        dataset = concat_datasets(parts, tier, seed, ["medium", "expert"])
    else:
        if n != len(reference.replay):
            logger.info(f"ℹ️ {tier} takes the whole replay buffer; n={n} is ignored")
        replay = reference.replay
        upto = reference.medium_buffer_size if tier == "medium-replay" else len(replay)
        dataset = OfflineDataset(
            replay.states[:upto].copy(), replay.actions[:upto].copy(), replay.rewards[:upto].copy(),
            replay.next_states[:upto].copy(), replay.dones[:upto].copy(), tier, spec, seed, anchors,
            ["medium"] if tier == "medium-replay" else ["expert"],
        )

    logger.info(f"✅ Collected {tier} dataset on {spec.name}: {len(dataset)} transitions, "
                f"mean reward {dataset.mean_reward():.4f}")
    return dataset


# ---------------------------------------------------------------------------
# ODRL file format
# ---------------------------------------------------------------------------

def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def save(dataset: OfflineDataset, path: Union[str, Path]) -> Path:
    """
    Header: magic, u32 version, u32 state_dim, u32 action_dim, u64 count.
    Records: f64 little-endian (s, a, r, s_next, done as 0/1).
    """
    if len(dataset) == 0:
        raise EmptyDatasetError("refusing to save an empty dataset")
    spec = dataset.spec
    records = np.column_stack([
        dataset.states, dataset.actions, dataset.rewards[:, None],
        dataset.next_states, dataset.dones[:, None].astype(np.float64),
    ]).astype("<f8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = HEADER.pack(config.DATASET_MAGIC, config.DATASET_VERSION, spec.state_dim, spec.action_dim,
                         len(dataset))
    path.write_bytes(header + records.tobytes())
    meta_path(path).write_text(dataset.meta().model_dump_json(indent=2))
    logger.info(f"💾 Saved {dataset.tier} dataset: {path} ({len(dataset)} transitions)")
    return path


def load(path: Union[str, Path]) -> OfflineDataset:
    path = Path(path)
    data = path.read_bytes()
    magic = data[:len(config.DATASET_MAGIC)]
    if magic != config.DATASET_MAGIC:
        raise DatasetVersionError(f"{path}: bad magic {magic!r}, expected {config.DATASET_MAGIC!r}")
    if len(data) < HEADER.size:
        raise DatasetTruncatedError(f"{path}: header needs {HEADER.size} bytes, file has {len(data)}")
    _, version, state_dim, action_dim, count = HEADER.unpack_from(data)
    if version != config.DATASET_VERSION:
        raise DatasetVersionError(f"{path}: format version {version}, expected {config.DATASET_VERSION}")
    if count == 0:
        raise EmptyDatasetError(f"{path}: header declares zero transitions")
    width = 2 * state_dim + action_dim + 2
    payload = data[HEADER.size:]
    expected = count * width * 8
    if len(payload) < expected:
        raise DatasetTruncatedError(f"{path}: {count} records need {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise DatasetDimensionError(f"{path}: {len(payload) - expected} bytes beyond the declared records")

    meta = DatasetMeta.model_validate_json(meta_path(path).read_text())
    if (meta.env.state_dim, meta.env.action_dim, meta.count) != (state_dim, action_dim, count):
        raise DatasetDimensionError(
            f"{path}: header (state {state_dim}, action {action_dim}, count {count}) disagrees with sidecar "
            f"(state {meta.env.state_dim}, action {meta.env.action_dim}, count {meta.count})")

    records = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(count, width)
    s_end, a_end = state_dim, state_dim + action_dim
    return OfflineDataset(
        states=records[:, :s_end].copy(),
        actions=records[:, s_end:a_end].copy(),
        rewards=records[:, a_end].copy(),
        next_states=records[:, a_end + 1:a_end + 1 + state_dim].copy(),
        dones=records[:, -1].copy(),
        tier=meta.tier, spec=meta.env, seed=meta.seed, anchors=meta.anchors,
        behavior_policies=meta.behavior_policies,
    )
