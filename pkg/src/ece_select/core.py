"""Domain types shared by every module: MDPs, policies, traces, coefficients, RNG streams."""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import ConfigError

PROBABILITY_TOLERANCE = 1e-9

# Stream ids used inside a single run.
META_STREAM = 0
ENVIRONMENT_STREAM = 1
LEARNER_STREAM = 2
ESTIMATOR_STREAM = 3
GENERATOR_STREAM = 4


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Finite episodic MDP with deterministic rewards.

    ``rewards`` has shape (H, S, A), ``transitions`` (H, S, A, S) and
    ``initial_dist`` (S,). Arrays are made read-only on construction.
    """

    rewards: np.ndarray
    transitions: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", _frozen(np.array(self.rewards, dtype=float)))
        object.__setattr__(self, "transitions", _frozen(np.array(self.transitions, dtype=float)))
        object.__setattr__(self, "initial_dist", _frozen(np.array(self.initial_dist, dtype=float)))
        if self.rewards.ndim != 3:
            raise ConfigError("rewards must have shape (H, S, A)")
        if self.transitions.shape != self.rewards.shape + (self.rewards.shape[1],):
            raise ConfigError("transitions must have shape (H, S, A, S)")
        if self.initial_dist.shape != (self.rewards.shape[1],):
            raise ConfigError("initial_dist must have shape (S,)")

    @property
    def horizon(self) -> int:
        return int(self.rewards.shape[0])

    @property
    def num_states(self) -> int:
        return int(self.rewards.shape[1])

    @property
    def num_actions(self) -> int:
        return int(self.rewards.shape[2])


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    """Action table indexed by (h, s)."""

    actions: np.ndarray

    def __post_init__(self) -> None:
        table = np.array(self.actions, dtype=np.int64)
        if table.ndim != 2:
            raise ConfigError("policy actions must have shape (H, S)")
        object.__setattr__(self, "actions", _frozen(table))

    @classmethod
    def constant(cls, horizon: int, num_states: int, action: int = 0) -> "DeterministicPolicy":
        return cls(np.full((horizon, num_states), action, dtype=np.int64))

    def key(self) -> bytes:
        """Content hash used to memoize exact policy values."""
        digest = hashlib.blake2b(digest_size=16)
        digest.update(np.asarray(self.actions.shape, dtype=np.int64).tobytes())
        digest.update(self.actions.tobytes())
        return digest.digest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DeterministicPolicy):
            return NotImplemented
        return bool(np.array_equal(self.actions, other.actions))

    def __hash__(self) -> int:
        return hash(self.key())


@dataclass(frozen=True)
class EpisodeTrace:
    """One rollout: H+1 states, H actions and H rewards."""

    states: Tuple[int, ...]
    actions: Tuple[int, ...]
    rewards: Tuple[float, ...]
    episode_index: int

    @property
    def horizon(self) -> int:
        return len(self.actions)


def episode_return(trace: EpisodeTrace) -> float:
    """Realized return g = Σ_h r_h."""

    return float(math.fsum(trace.rewards))


@dataclass(frozen=True)
class MdpViolation:
    """A single invariant violation reported by :func:`validate_mdp`."""

    kind: str
    index: Tuple[int, ...]
    message: str


def validate_mdp(mdp: TabularMdp) -> List[MdpViolation]:
    """Return every invariant violation; an empty list means the MDP is valid."""

    violations: List[MdpViolation] = []
    horizon, num_states, num_actions = mdp.rewards.shape

    for h, s, a in itertools.product(range(horizon), range(num_states), range(num_actions)):
        reward = float(mdp.rewards[h, s, a])
        if not 0.0 <= reward <= 1.0:
            violations.append(
                MdpViolation(
                    "reward", (h, s, a), f"reward out of [0,1] at (h={h}, s={s}, a={a}): {reward}"
                )
            )
        row = mdp.transitions[h, s, a]
        if np.any(row < 0):
            violations.append(
                MdpViolation(
                    "transition", (h, s, a), f"negative transition entry at (h={h}, s={s}, a={a})"
                )
            )
        total = float(row.sum())
        if abs(total - 1.0) > PROBABILITY_TOLERANCE:
            violations.append(
                MdpViolation(
                    "transition",
                    (h, s, a),
                    f"transition row at (h={h}, s={s}, a={a}) sums to {total:.12g}",
                )
            )

    if np.any(mdp.initial_dist < 0):
        violations.append(MdpViolation("initial", (), "initial distribution has negative entries"))
    total = float(mdp.initial_dist.sum())
    if abs(total - 1.0) > PROBABILITY_TOLERANCE:
        violations.append(MdpViolation("initial", (), f"initial distribution sums to {total:.12g}"))

    return violations


def policy_matches(mdp: TabularMdp, policy: DeterministicPolicy) -> bool:
    """True when the policy table fits the MDP's dimensions and action range."""

    if policy.actions.shape != (mdp.horizon, mdp.num_states):
        return False
    return bool(np.all((policy.actions >= 0) & (policy.actions < mdp.num_actions)))


Evaluator = Callable[[int, int, float], float]


@dataclass(frozen=True)
class NominalCoefficient:
    """Known regret coefficient ℛ(d, H, x) paired with its complexity d."""

    evaluator: Evaluator
    complexity_d: int
    label: str = "custom"

    def __call__(self, horizon: int, log_arg: float) -> float:
        return self.evaluate(self.complexity_d, horizon, log_arg)

    def evaluate(self, d: int, horizon: int, log_arg: float) -> float:
        return float(self.evaluator(d, horizon, log_arg))

    def check_monotone(
        self,
        d_values: Sequence[int] = (1, 2, 4, 8, 16),
        horizons: Sequence[int] = (1, 2, 5, 10),
        log_args: Sequence[float] = (0.5, 1.0, 5.0, 25.0),
    ) -> List[Tuple[int, int, float]]:
        """Return sample points where some argument step decreases the value."""

        failures: List[Tuple[int, int, float]] = []
        grid = list(itertools.product(d_values, horizons, log_args))
        for d, h, x in grid:
            base = self.evaluate(d, h, x)
            steps = (
                (_next(d_values, d), h, x),
                (d, _next(horizons, h), x),
                (d, h, _next(log_args, x)),
            )
            for point in steps:
                if None in point:
                    continue
                if self.evaluate(*point) < base:  # type: ignore[arg-type]
                    failures.append((d, h, x))
                    break
        return failures


def _next(values: Sequence[float], value: float) -> Optional[float]:
    larger = [item for item in values if item > value]
    return min(larger) if larger else None


def constant_nominal(value: float, complexity_d: int = 1) -> NominalCoefficient:
    """ℛ ≡ value, the coefficient of scripted learners."""

    if value < 0:
        raise ConfigError("nominal coefficient must be nonnegative")
    return NominalCoefficient(lambda d, h, x: value, complexity_d, label=f"constant({value:g})")


def lsvi_ucb_nominal(c_r: float, complexity_d: int) -> NominalCoefficient:
    """c_R·√(d³H⁴)·(x + ln(d·H)), i.e. c_R·√(d³H⁴·log²(dTH/δ)) at x = ln(T/δ)."""

    def evaluator(d: int, horizon: int, log_arg: float) -> float:
        return c_r * math.sqrt(d**3 * horizon**4) * (log_arg + math.log(d * horizon))

    return NominalCoefficient(evaluator, complexity_d, label=f"lsvi-ucb(c_r={c_r:g})")


@dataclass(frozen=True)
class RngStream:
    """Seeded, replayable random stream identified by (seed, stream_id)."""

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(sequence))

    def child(self, index: int) -> "RngStream":
        return RngStream(mix_seed(self.seed, self.stream_id, index), self.stream_id)


def mix_seed(*keys: int) -> int:
    """Derive a 63-bit seed from integer keys (base seed, T, seed index, ...)."""

    sequence = np.random.SeedSequence([int(key) for key in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def draw_index(probabilities: np.ndarray, rng: np.random.Generator) -> int:
    """Draw one index from a normalized probability vector."""

    return int(rng.choice(len(probabilities), p=probabilities))


def iter_policies(horizon: int, num_states: int, num_actions: int) -> Iterable[DeterministicPolicy]:
    """Every deterministic policy; only usable for tiny instances."""

    for flat in itertools.product(range(num_actions), repeat=horizon * num_states):
        yield DeterministicPolicy(np.asarray(flat, dtype=np.int64).reshape(horizon, num_states))
