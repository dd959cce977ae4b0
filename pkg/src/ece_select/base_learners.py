"""Base learners consumed by the meta-algorithms."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Protocol, Sequence

import numpy as np

from .config import ConfigError
from .core import DeterministicPolicy, EpisodeTrace, NominalCoefficient, RngStream
from .envs import FeatureLevel

logger = logging.getLogger(__name__)


class BaseLearner(Protocol):
    """Interface for episodic learners driven by a meta-algorithm."""

    def propose_policy(self, t: int) -> DeterministicPolicy:
        """Return the policy for episode ``t`` without mutating state."""

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        """Consume an episode this learner played."""

    def reset(self) -> None:
        """Forget everything observed so far."""


LearnerFactory = Callable[[], BaseLearner]


@dataclass
class BaseLearnerSlot:
    """A learner paired with its known regret coefficient."""

    learner: BaseLearner
    nominal: NominalCoefficient
    label: str
    anytime: bool = True


def lsvi_beta(c_beta: float, dimension: int, horizon: int, horizon_T: int, delta: float) -> float:
    """β = c_β·d·H·√(log(2dTH/δ))."""

    return c_beta * dimension * horizon * math.sqrt(
        math.log(2 * dimension * max(horizon_T, 1) * horizon / delta)
    )


class LsviUcbLearner:
    """Optimistic least-squares value iteration on a fixed feature level.

    Gram matrices are updated on every observation; the backward regression
    runs lazily when a policy is requested after new data arrived.
    """

    def __init__(
        self,
        features: FeatureLevel,
        horizon: int,
        *,
        beta: float,
        reg_lambda: float = 1.0,
    ) -> None:
        if reg_lambda <= 0:
            raise ConfigError("reg_lambda must be positive")
        if beta < 0:
            raise ConfigError("beta must be nonnegative")
        self.features = features
        self.horizon = horizon
        self.beta = beta
        self.reg_lambda = reg_lambda
        self._phi = features.feature_matrix()
        self.reset()

    @property
    def dimension(self) -> int:
        return self.features.dimension

    def reset(self) -> None:
        d = self.dimension
        self._grams = np.stack([self.reg_lambda * np.eye(d) for _ in range(self.horizon)])
        num_states = self._phi.shape[0]
        # Σ φ·r and Σ φ·e_{s'} per step; regression targets are linear in V_{h+1}.
        self._reward_targets = np.zeros((self.horizon, d))
        self._next_state_mass = np.zeros((self.horizon, d, num_states))
        self._cached_q: Optional[np.ndarray] = None

    def gram(self, h: int) -> np.ndarray:
        """Λ_h (0-based step index); a copy."""
        return self._grams[h].copy()

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        if trace.horizon != self.horizon:
            raise ConfigError(f"trace length {trace.horizon} does not match horizon {self.horizon}")
        for h in range(self.horizon):
            state, action = trace.states[h], trace.actions[h]
            phi = self._phi[state, action]
            self._grams[h] += np.outer(phi, phi)
            self._reward_targets[h] += phi * trace.rewards[h]
            self._next_state_mass[h][:, trace.states[h + 1]] += phi
        self._cached_q = None

    def q_values(self, t: int) -> np.ndarray:
        """Optimistic Q table with shape (H, S, A), clipped to [0, H]."""

        if self._cached_q is None:
            self._cached_q = self._backward_pass()
        return self._cached_q.copy()

    def propose_policy(self, t: int) -> DeterministicPolicy:
        return DeterministicPolicy(self.q_values(t).argmax(axis=2))

    def _backward_pass(self) -> np.ndarray:
        num_states, num_actions, d = self._phi.shape
        flat_phi = self._phi.reshape(-1, d)
        q = np.zeros((self.horizon, num_states, num_actions))
        v_next = np.zeros(num_states)
        for h in reversed(range(self.horizon)):
            target = self._reward_targets[h] + self._next_state_mass[h] @ v_next
            try:
                inverse = np.linalg.inv(self._grams[h])
            except np.linalg.LinAlgError as exc:
                raise RuntimeError(f"Gram matrix at step {h} is singular") from exc
            weights = inverse @ target
            bonus = self.beta * np.sqrt(np.einsum("nd,de,ne->n", flat_phi, inverse, flat_phi))
            q[h] = np.clip(flat_phi @ weights + bonus, 0.0, self.horizon).reshape(
                num_states, num_actions
            )
            v_next = q[h].max(axis=1)
        return q


class DoublingLearner:
    """Rebuilds the inner learner at local episode counts 1, 2, 4, 8, …"""

    def __init__(self, factory: LearnerFactory) -> None:
        self._factory = factory
        self.reset()

    def reset(self) -> None:
        self.inner = self._factory()
        self.local_plays = 0
        self._epoch_start = 1
        self.restart_points: List[int] = [1]

    def propose_policy(self, t: int) -> DeterministicPolicy:
        return self.inner.propose_policy(self._epoch_index())

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        self.inner.observe(self._epoch_index(), trace, g)
        self.local_plays += 1
        upcoming = self.local_plays + 1
        if upcoming & (upcoming - 1) == 0:
            logger.debug("Doubling restart at local episode %d", upcoming)
            self.inner = self._factory()
            self._epoch_start = upcoming
            self.restart_points.append(upcoming)

    def _epoch_index(self) -> int:
        return self.local_plays + 1 - self._epoch_start + 1


class ScriptedLearner:
    """Replays a fixed list of policies, one per local play."""

    def __init__(self, policies: Sequence[DeterministicPolicy], *, cycle: bool = False) -> None:
        if not policies:
            raise ConfigError("a scripted learner needs at least one policy")
        self.policies = tuple(policies)
        self.cycle = cycle
        self.local_plays = 0

    def propose_policy(self, t: int) -> DeterministicPolicy:
        if self.cycle:
            return self.policies[self.local_plays % len(self.policies)]
        return self.policies[min(self.local_plays, len(self.policies) - 1)]

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        self.local_plays += 1

    def reset(self) -> None:
        self.local_plays = 0


class UniformRandomLearner:
    """Plays a fresh uniform action table each episode, keyed by (stream, t)."""

    def __init__(self, num_states: int, num_actions: int, horizon: int, stream: RngStream) -> None:
        self.shape = (horizon, num_states)
        self.num_actions = num_actions
        self.stream = stream

    def propose_policy(self, t: int) -> DeterministicPolicy:
        generator = self.stream.child(t).generator()
        return DeterministicPolicy(generator.integers(0, self.num_actions, size=self.shape))

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        return None

    def reset(self) -> None:
        return None


def make_slot(
    factory: LearnerFactory,
    nominal: NominalCoefficient,
    label: str,
    *,
    anytime: bool = True,
) -> BaseLearnerSlot:
    """Build a slot; learners without anytime guarantees get the doubling wrapper."""

    learner: BaseLearner = factory() if anytime else DoublingLearner(factory)
    return BaseLearnerSlot(learner=learner, nominal=nominal, label=label, anytime=anytime)


def check_slot_ordering(
    slots: Sequence[BaseLearnerSlot],
    horizon: int,
    log_args: Sequence[float] = (1.0, 5.0, 25.0, 100.0),
) -> None:
    """Raise ``ConfigError`` unless ℛ_i(d_i, H, x) ≤ ℛ_{i+1}(d_{i+1}, H, x) at every sample."""

    for index, (left, right) in enumerate(zip(slots, slots[1:]), start=1):
        for log_arg in log_args:
            lower = left.nominal(horizon, log_arg)
            upper = right.nominal(horizon, log_arg)
            if lower > upper + 1e-12:
                raise ConfigError(
                    f"slots must be ordered by regret: slot {index} ({left.label}) has "
                    f"ℛ={lower:.6g} > slot {index + 1} ({right.label}) "
                    f"ℛ={upper:.6g} at x={log_arg:g}"
                )
