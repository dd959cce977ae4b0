"""Test doubles: call-recording learners and tiny MDP builders."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from ece_select.base_learners import BaseLearnerSlot, ScriptedLearner
from ece_select.core import DeterministicPolicy, EpisodeTrace, TabularMdp, constant_nominal


class CountingLearner:
    """Plays one fixed policy and records every interaction."""

    def __init__(self, policy: DeterministicPolicy) -> None:
        self.policy = policy
        self.proposed: List[int] = []
        self.observed: List[Tuple[int, float]] = []
        self.resets = 0

    def propose_policy(self, t: int) -> DeterministicPolicy:
        self.proposed.append(t)
        return self.policy

    def observe(self, t: int, trace: EpisodeTrace, g: float) -> None:
        self.observed.append((t, g))

    def reset(self) -> None:
        self.resets += 1


def bandit_mdp(action_returns: Sequence[float], horizon: int = 1) -> TabularMdp:
    """One state; action a yields per-step reward action_returns[a] / H."""

    per_step = np.asarray(action_returns, dtype=float) / horizon
    rewards = np.tile(per_step, (horizon, 1, 1))
    transitions = np.ones((horizon, 1, len(action_returns), 1))
    return TabularMdp(rewards, transitions, np.ones(1))


def coin_mdp(p: float = 0.5) -> TabularMdp:
    """Two steps; the first-step action does not matter, the second pays 1 in state 1 only.

    V^π = p for every policy.
    """

    rewards = np.zeros((2, 2, 2))
    rewards[1, 1, :] = 1.0
    transitions = np.zeros((2, 2, 2, 2))
    transitions[0, :, :, 0] = 1.0 - p
    transitions[0, :, :, 1] = p
    transitions[1, :, :, 0] = 1.0
    return TabularMdp(rewards, transitions, np.array([1.0, 0.0]))


def constant_action(action: int, horizon: int = 1, num_states: int = 1) -> DeterministicPolicy:
    return DeterministicPolicy.constant(horizon, num_states, action)


def scripted_slot(
    action: int,
    nominal: float = 0.0,
    horizon: int = 1,
    num_states: int = 1,
    label: str = "",
) -> BaseLearnerSlot:
    return BaseLearnerSlot(
        learner=ScriptedLearner([constant_action(action, horizon, num_states)]),
        nominal=constant_nominal(nominal),
        label=label or f"action-{action}",
    )


def counting_slot(action: int, nominal: float = 0.0, horizon: int = 1) -> BaseLearnerSlot:
    return BaseLearnerSlot(
        learner=CountingLearner(constant_action(action, horizon)),
        nominal=constant_nominal(nominal),
        label=f"counting-{action}",
    )
