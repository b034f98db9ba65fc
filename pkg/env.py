"""
Toy continuous-control environments
pointmass1d and pendulum, deterministic given the reset seed, plus the
normalized-score convention (0 = uniform random policy, 100 = expert).
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

Seed = Union[int, np.random.SeedSequence, np.random.Generator]
Actor = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class UnknownEnvironmentError(ValueError):
    """No environment registered under that name"""


class NonFiniteStateError(ValueError):
    """State or action contains NaN or inf"""


class AnchorError(ValueError):
    """Score anchors cannot normalize (expert_ref <= random_ref)"""


class EnvSpec(BaseModel):
    """Environment description; serialized into the dataset metadata sidecar"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    state_dim: int = Field(ge=1)
    action_dim: int = Field(ge=1)
    horizon: int = Field(ge=1)
    gamma: float = 0.99
    dt: float = 0.05
    mass: float = 1.0
    damping: float = 0.0
    goal: float = 0.0
    action_cost: float = 0.01
    gravity: float = 10.0
    length: float = 1.0
    max_torque: float = 2.0
    max_speed: float = 8.0

    @model_validator(mode="after")
    def _check_gamma(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        return self


class ScoreAnchors(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    random_ref: float
    expert_ref: float

    @model_validator(mode="after")
    def _check_order(self):
        if not self.expert_ref > self.random_ref:
            raise AnchorError(f"expert_ref ({self.expert_ref}) must exceed random_ref ({self.random_ref})")
        return self


class StepResult(NamedTuple):
    next_state: np.ndarray
    reward: float
    done: bool


ENVIRONMENTS: Dict[str, EnvSpec] = {
    "pointmass1d": EnvSpec(name="pointmass1d", state_dim=2, action_dim=1, horizon=100,
                           dt=0.05, mass=1.0, damping=0.1, goal=0.0, action_cost=0.01),
    "pendulum": EnvSpec(name="pendulum", state_dim=3, action_dim=1, horizon=200,
                        dt=0.05, mass=1.0, gravity=10.0, length=1.0, action_cost=0.01,
                        max_torque=2.0, max_speed=8.0),
}

ALIASES = {"pointmass-1d": "pointmass1d", "pendulum-v0": "pendulum"}


def make_env(name: str) -> EnvSpec:
    key = ALIASES.get(name, name)
    if key not in ENVIRONMENTS:
        raise UnknownEnvironmentError(
            f"unknown environment '{name}', valid: {', '.join(sorted(ENVIRONMENTS))}")
    return ENVIRONMENTS[key]


def _check_finite(what: str, x: np.ndarray):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(f"non-finite {what}: {x}")


def reset(spec: EnvSpec, seed: Seed) -> np.ndarray:
    """
    Initial state; deterministic per seed.

    pointmass1d: position uniform in [-1, 1], velocity 0.
    pendulum: angle uniform in [-pi, pi], angular velocity uniform in [-1, 1],
    observed as [cos, sin, angular velocity].
    """
    rng = np.random.default_rng(seed)
    if spec.name == "pointmass1d":
        return np.array([rng.uniform(-1.0, 1.0), 0.0])
    if spec.name == "pendulum":
        theta = rng.uniform(-math.pi, math.pi)
        theta_dot = rng.uniform(-1.0, 1.0)
        return np.array([math.cos(theta), math.sin(theta), theta_dot])
    raise UnknownEnvironmentError(f"no dynamics for '{spec.name}'")


def step(spec: EnvSpec, state: np.ndarray, action: np.ndarray, t: Optional[int] = None) -> StepResult:
    """
    One transition. Actions are clipped to [-1, 1]; `done` is true only when
    the step index `t` is the last one of the horizon.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.asarray(action, dtype=np.float64).reshape(spec.action_dim)
    _check_finite("state", state)
    _check_finite("action", action)
    action = np.clip(action, -1.0, 1.0)
    cost = spec.action_cost * float(action @ action)

    if spec.name == "pointmass1d":
        pos, vel = state
        reward = -(pos - spec.goal) ** 2 - cost
        next_state = np.array([
            pos + spec.dt * vel,
            vel + spec.dt * (action[0] / spec.mass - spec.damping * vel),
        ])
    elif spec.name == "pendulum":
        cos_t, sin_t, theta_dot = state
        theta = math.atan2(sin_t, cos_t)
        reward = -(theta ** 2 + 0.1 * theta_dot ** 2) - cost
        torque = spec.max_torque * action[0]
        accel = spec.gravity / spec.length * math.sin(theta) + torque / (spec.mass * spec.length ** 2)
        theta_dot = float(np.clip(theta_dot + spec.dt * accel, -spec.max_speed, spec.max_speed))
        theta = theta + spec.dt * theta_dot
        next_state = np.array([math.cos(theta), math.sin(theta), theta_dot])
    else:
        raise UnknownEnvironmentError(f"no dynamics for '{spec.name}'")

    _check_finite("next state", next_state)
    done = t is not None and t + 1 >= spec.horizon
    return StepResult(next_state, float(reward), done)


def return_bounds(spec: EnvSpec) -> Tuple[float, float]:
    """Analytic envelope of the undiscounted episode return (rewards are never positive)"""
    if spec.name == "pointmass1d":
        h = spec.horizon
        reach = 1.0 + spec.dt ** 2 / spec.mass * h * (h - 1) / 2.0
        worst = (reach + abs(spec.goal)) ** 2 + spec.action_cost * spec.action_dim
    elif spec.name == "pendulum":
        worst = math.pi ** 2 + 0.1 * spec.max_speed ** 2 + spec.action_cost * spec.action_dim
    else:
        raise UnknownEnvironmentError(f"no bounds for '{spec.name}'")
    return -spec.horizon * worst, 0.0


@dataclass
class Episode:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


def rollout(spec: EnvSpec, actor: Actor, seed: Seed) -> Episode:
    """Run one full-horizon episode; the same generator drives reset and actor"""
    rng = np.random.default_rng(seed)
    state = reset(spec, rng)
    states, actions, rewards, next_states = [], [], [], []
    for t in range(spec.horizon):
        action = np.asarray(actor(state, rng), dtype=np.float64).reshape(spec.action_dim)
        result = step(spec, state, action, t)
        states.append(state)
        actions.append(np.clip(action, -1.0, 1.0))
        rewards.append(result.reward)
        next_states.append(result.next_state)
        state = result.next_state
    return Episode(np.array(states), np.array(actions), np.array(rewards), np.array(next_states))


def episode_seeds(seed: int, episodes: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(episodes)


def evaluate_returns(spec: EnvSpec, actor: Actor, episodes: int, seed: int) -> np.ndarray:
    """Undiscounted returns of `episodes` independent rollouts"""
    return np.array([rollout(spec, actor, s).total_return for s in episode_seeds(seed, episodes)])


def uniform_actor(spec: EnvSpec) -> Actor:
    def act(state: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=spec.action_dim)
    return act


def random_reference(spec: EnvSpec, episodes: int, seed: int) -> Tuple[float, float]:
    """Mean return of the uniform policy and its Monte-Carlo standard error"""
    returns = evaluate_returns(spec, uniform_actor(spec), episodes, seed)
    stderr = float(np.std(returns, ddof=1) / math.sqrt(len(returns))) if len(returns) > 1 else 0.0
    return float(np.mean(returns)), stderr


def normalized_score(episode_return: float, anchors: ScoreAnchors) -> float:
    """100 * (return - random_ref) / (expert_ref - random_ref)"""
    span = anchors.expert_ref - anchors.random_ref
    if not span > 0.0:
        raise AnchorError(
            f"expert_ref ({anchors.expert_ref}) must exceed random_ref ({anchors.random_ref})")
    return 100.0 * (episode_return - anchors.random_ref) / span
