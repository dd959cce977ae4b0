"""Explore-Commit-Eliminate: the elimination meta-algorithm over ordered base learners."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .base_learners import BaseLearner, BaseLearnerSlot, check_slot_ordering
from .config import ConfigError, EceConfig
from .core import EpisodeTrace, NominalCoefficient, RngStream, episode_return
from .envs import SimulatedEnvironment, value_iteration
from .records import EliminationEvent, RunRecord, RunRecordRow

logger = logging.getLogger(__name__)


class InsufficientDataError(RuntimeError):
    """Raised when a statistic needs plays that have not happened yet."""


def effective_delta(delta_prime: float, num_slots: int, horizon_T: int) -> float:
    """δ = δ′ / (10·L·T²·max(1, log₂T))."""

    if horizon_T < 2:
        raise ConfigError(f"effective_delta requires T ≥ 2, got {horizon_T}")
    if num_slots < 1:
        raise ConfigError("effective_delta requires L ≥ 1")
    if not 0.0 < delta_prime < 1.0 / math.e:
        raise ConfigError(f"delta_prime must satisfy δ′ ∈ (0, 1/e), got {delta_prime}")
    return delta_prime / (10 * num_slots * horizon_T**2 * max(1.0, math.log2(horizon_T)))


def burn_in(delta: float, num_slots: int, kappa: float, c_min: float) -> int:
    """τ_min = ⌈C_min·L^{2/(1−κ)}·ln(1/δ)^{1/(1−κ)}⌉."""

    exponent = 1.0 / (1.0 - kappa)
    value = c_min * num_slots ** (2.0 * exponent) * math.log(1.0 / delta) ** exponent
    # Absorb float error so exact integers such as 8.000000000000002 stay 8.
    return max(1, math.ceil(value - 1e-9 * max(1.0, value)))


def exploration_probability(t: int, kappa: float) -> float:
    if t < 1:
        raise ConfigError("episode index starts at 1")
    return min(1.0, t ** (-kappa))


def exploration_draw(t: int, kappa: float, rng: np.random.Generator) -> bool:
    """U_t ~ Bernoulli(min(1, t^{−κ}))."""

    return bool(rng.random() < exploration_probability(t, kappa))


@dataclass
class EceState:
    """Candidate, exploration set and per-slot play statistics (1-based slots)."""

    num_slots: int
    candidate: int = 1
    explore_set: List[int] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    sums: List[float] = field(default_factory=list)
    t: int = 0
    terminal: bool = False

    @classmethod
    def initial(cls, num_slots: int) -> "EceState":
        return cls(
            num_slots=num_slots,
            explore_set=list(range(2, num_slots + 1)),
            counts=[0] * num_slots,
            sums=[0.0] * num_slots,
            terminal=num_slots == 1,
        )

    def count(self, index: int) -> int:
        return self.counts[index - 1]

    def total(self, index: int) -> float:
        return self.sums[index - 1]

    def record_play(self, index: int, g: float) -> None:
        self.counts[index - 1] += 1
        self.sums[index - 1] += g
        self.t += 1

    def advance_candidate(self) -> int:
        """î ← î + 1 and B ← B \\ {î}; returns the rejected candidate."""

        rejected = self.candidate
        self.candidate += 1
        if self.candidate in self.explore_set:
            self.explore_set.remove(self.candidate)
        self.terminal = self.candidate >= self.num_slots
        return rejected


def choose_index(state: EceState, u: bool, rng: np.random.Generator) -> int:
    """Candidate when not exploring or when B is empty, else uniform over B."""

    if not u or not state.explore_set:
        return state.candidate
    return state.explore_set[int(rng.integers(len(state.explore_set)))]


def excess_gap_statistic(state: EceState, i: int, j: int) -> float:
    """𝒢(i, j) = (n_i / n_j)·s_j − s_i."""

    n_j = state.count(j)
    if n_j == 0:
        raise InsufficientDataError(f"slot {j} has not been played")
    return (state.count(i) / n_j) * state.total(j) - state.total(i)


def log_horizon(config: EceConfig) -> int:
    return max(config.horizon_T, 2)


def threshold_w(n: int, nominal: NominalCoefficient, config: EceConfig, delta: float) -> float:
    """𝒲 = C_W·ℛ(d,H,ln(T/δ))·√n + C_W·H·√(L·n^{1+κ}·ln(1/δ)) + C_W·H·√(n·ln(1/δ))."""

    if n < 1:
        raise ConfigError("threshold_w requires n ≥ 1")
    log_inv = math.log(1.0 / delta)
    coefficient = nominal(config.H, math.log(log_horizon(config) / delta))
    return config.c_w * (
        coefficient * math.sqrt(n)
        + config.H * math.sqrt(config.L * n ** (1.0 + config.kappa) * log_inv)
        + config.H * math.sqrt(n * log_inv)
    )


def elimination_test(
    state: EceState,
    slots: Sequence[BaseLearnerSlot],
    config: EceConfig,
    delta: float,
    tau_min: Optional[int] = None,
) -> Tuple[bool, List[int]]:
    """Reject the candidate when some explored j beats it by more than 𝒲(n_î)."""

    if tau_min is None:
        tau_min = burn_in(delta, config.L, config.kappa, config.c_min)
    if state.t < tau_min or not state.explore_set:
        return False, []
    candidate = state.candidate
    n_candidate = state.count(candidate)
    if n_candidate == 0:
        return False, []
    threshold = threshold_w(n_candidate, slots[candidate - 1].nominal, config, delta)
    witnesses: List[int] = []
    for j in state.explore_set:
        try:
            statistic = excess_gap_statistic(state, candidate, j)
        except InsufficientDataError:
            continue
        if statistic > threshold:
            witnesses.append(j)
    return bool(witnesses), witnesses


class EliminationLoop:
    """Shared episode loop; variants override selection, bookkeeping and the test."""

    variant = "ece"

    def __init__(
        self,
        slots: Sequence[BaseLearnerSlot],
        config: EceConfig,
        env: SimulatedEnvironment,
        meta_stream: RngStream,
        *,
        v_star: Optional[float] = None,
        per_level_values: Sequence[float] = (),
        resolved_config: Optional[Dict[str, Any]] = None,
    ) -> None:
        if not slots:
            raise ConfigError("at least one base learner slot is required")
        horizon = env.mdp.horizon
        check_slot_ordering(slots, horizon)
        self.slots = list(slots)
        self.config = config.model_copy(update={"L": len(slots), "H": horizon})
        self.env = env
        self._rng = meta_stream.generator()
        self.delta = self.config.delta_override or effective_delta(
            self.config.delta_prime, self.config.L, log_horizon(self.config)
        )
        self.tau_min = self.burn_in_time()
        self.state = EceState.initial(len(slots))
        self.record = RunRecord(
            variant=self.variant,
            horizon=horizon,
            num_slots=len(slots),
            v_star=float(v_star) if v_star is not None else value_iteration(env.mdp).v_star,
            per_level_values=tuple(float(value) for value in per_level_values),
            resolved_config=dict(resolved_config or {}),
            labels=tuple(slot.label for slot in slots),
        )

    def burn_in_time(self) -> int:
        return burn_in(self.delta, self.config.L, self.config.kappa, self.config.c_min)

    def select(self, t: int) -> Tuple[int, bool]:
        if self.state.terminal:
            return self.config.L, False
        u = exploration_draw(t, self.config.kappa, self._rng)
        index = choose_index(self.state, u, self._rng)
        return index, u and index != self.state.candidate

    def learner_for(self, index: int, explored: bool) -> BaseLearner:
        return self.slots[index - 1].learner

    def after_episode(self, index: int, explored: bool, trace: EpisodeTrace, g: float) -> None:
        """Hook for variants that feed estimators."""

    def test(self) -> Tuple[bool, List[int]]:
        return elimination_test(self.state, self.slots, self.config, self.delta, self.tau_min)

    def step(self) -> RunRecordRow:
        t = self.state.t + 1
        index, explored = self.select(t)
        learner = self.learner_for(index, explored)
        policy = learner.propose_policy(t)
        trace = self.env.rollout(policy, t)
        g = episode_return(trace)
        learner.observe(t, trace, g)
        self.state.record_play(index, g)
        self.after_episode(index, explored, trace, g)

        candidate = self.state.candidate
        b_set_size = len(self.state.explore_set)
        if not self.state.terminal:
            reject, witnesses = self.test()
            if reject:
                self.state.advance_candidate()
                self.record.eliminations.append(EliminationEvent(t, candidate, tuple(witnesses)))
                logger.info(
                    "Eliminated slot %d at episode %d (witnesses %s); candidate is now %d",
                    candidate,
                    t,
                    witnesses,
                    self.state.candidate,
                )

        row = RunRecordRow(
            t=t,
            chosen_index=index,
            explored=explored,
            g=g,
            policy_value=self.env.value_of(policy),
            candidate=candidate,
            b_set_size=b_set_size,
            play_counts=tuple(self.state.counts),
        )
        self.record.rows.append(row)
        return row

    def run(self, horizon_T: Optional[int] = None) -> RunRecord:
        episodes = self.config.horizon_T if horizon_T is None else horizon_T
        for _ in range(episodes):
            self.step()
        return self.record


def ece_step(loop: EliminationLoop) -> RunRecordRow:
    """Advance ``loop`` by one episode."""

    return loop.step()


def run_ece(
    slots: Sequence[BaseLearnerSlot],
    config: EceConfig,
    env: SimulatedEnvironment,
    meta_stream: RngStream,
    **record_fields: Any,
) -> RunRecord:
    """Run T = ``config.horizon_T`` episodes of Explore-Commit-Eliminate."""

    return EliminationLoop(slots, config, env, meta_stream, **record_fields).run()
