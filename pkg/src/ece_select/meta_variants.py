"""Elimination variants: plug-in gap estimates, known V*, and estimated V*.

Each variant reuses :class:`~ece_select.meta_ece.EliminationLoop` and swaps
in its own learner routing and elimination test.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from .base_learners import BaseLearner, BaseLearnerSlot
from .config import ConfigError, EceConfig, NoiseMode
from .core import EpisodeTrace, NominalCoefficient, RngStream
from .envs import GapControlledFamily, SimulatedEnvironment
from .meta_ece import EliminationLoop, InsufficientDataError, log_horizon
from .records import RunRecord

logger = logging.getLogger(__name__)


def _bounded_noise(radius: float, mode: NoiseMode, rng: np.random.Generator) -> float:
    if mode == "worst-case-positive":
        return radius
    if mode == "worst-case-negative":
        return -radius
    return float(rng.uniform(-radius, radius))


class GapEstimator(Protocol):
    """Estimates Δ_{i,j} = V*_j − V*_i from exploration data of slot j."""

    def observe_exploration(self, j: int, trace: EpisodeTrace, g: float) -> None:
        ...

    def observe_candidate(self, i: int, trace: EpisodeTrace, g: float) -> None:
        ...

    def estimate(self, i: int, j: int) -> float:
        """Raises ``InsufficientDataError`` when j has no exploration episodes."""

    def consistency_radius(self, j: int) -> float:
        """𝒱_j."""


class VStarEstimator(Protocol):
    def observe_exploration(self, i: int, trace: EpisodeTrace, g: float) -> None:
        ...

    def estimate(self, i: int) -> float:
        """V̂_i from i's exploration episodes; ``InsufficientDataError`` if none."""


class OracleGapEstimator:
    """Perturbs true gaps by at most |Δ|/C + 𝒱_j/√n, the consistency envelope."""

    def __init__(
        self,
        slot_values: Sequence[float],
        consistency_c: float,
        radii: Sequence[float],
        noise_mode: NoiseMode,
        stream: RngStream,
    ) -> None:
        if consistency_c <= 1:
            raise ConfigError("consistency constant C must exceed 1")
        if len(radii) != len(slot_values):
            raise ConfigError("one consistency radius per slot is required")
        self.slot_values = tuple(float(value) for value in slot_values)
        self.consistency_c = consistency_c
        self.radii = tuple(float(radius) for radius in radii)
        self.noise_mode = noise_mode
        self._rng = stream.generator()
        self.exploration_counts = [0] * len(slot_values)

    def observe_exploration(self, j: int, trace: EpisodeTrace, g: float) -> None:
        self.exploration_counts[j - 1] += 1

    def observe_candidate(self, i: int, trace: EpisodeTrace, g: float) -> None:
        return None

    def true_gap(self, i: int, j: int) -> float:
        return self.slot_values[j - 1] - self.slot_values[i - 1]

    def envelope(self, i: int, j: int) -> float:
        n = self.exploration_counts[j - 1]
        return abs(self.true_gap(i, j)) / self.consistency_c + self.radii[j - 1] / math.sqrt(n)

    def estimate(self, i: int, j: int) -> float:
        if self.exploration_counts[j - 1] == 0:
            raise InsufficientDataError(f"slot {j} has no exploration episodes")
        return self.true_gap(i, j) + _bounded_noise(self.envelope(i, j), self.noise_mode, self._rng)

    def consistency_radius(self, j: int) -> float:
        return self.radii[j - 1]


def oracle_gap_estimator(
    family: GapControlledFamily,
    consistency_c: float,
    radii: Sequence[float],
    noise_mode: NoiseMode,
    stream: RngStream,
) -> OracleGapEstimator:
    """Oracle over the per-level best-in-class values of a generated family."""

    if len(radii) != family.features.num_levels:
        raise ConfigError(
            f"one consistency radius per level is required "
            f"({len(radii)} given for {family.features.num_levels} levels)"
        )
    return OracleGapEstimator(
        family.per_level_optimal_values, consistency_c, radii, noise_mode, stream
    )


class EmpiricalGapEstimator:
    """Mean exploration return of slot j minus mean candidate return of slot i.

    No consistency guarantee; the radius is a configured constant.
    """

    def __init__(self, num_slots: int, radius: float) -> None:
        self.radius = radius
        self._exploration = [[0, 0.0] for _ in range(num_slots)]
        self._candidate = [[0, 0.0] for _ in range(num_slots)]

    def observe_exploration(self, j: int, trace: EpisodeTrace, g: float) -> None:
        self._exploration[j - 1][0] += 1
        self._exploration[j - 1][1] += g

    def observe_candidate(self, i: int, trace: EpisodeTrace, g: float) -> None:
        self._candidate[i - 1][0] += 1
        self._candidate[i - 1][1] += g

    def estimate(self, i: int, j: int) -> float:
        n_j, s_j = self._exploration[j - 1]
        n_i, s_i = self._candidate[i - 1]
        if n_j == 0 or n_i == 0:
            raise InsufficientDataError(f"no data yet for the pair ({i}, {j})")
        return s_j / n_j - s_i / n_i

    def consistency_radius(self, j: int) -> float:
        return self.radius


@dataclass(frozen=True)
class VStarRates:
    """|V* − V̂^{(n)}| ≤ v/n^α + v′/n^β."""

    alpha: float
    beta: float
    v: float
    v_prime: float

    def __post_init__(self) -> None:
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ConfigError("alpha and beta must lie in (0, 1)")

    def radius(self, n: int) -> float:
        return self.v / n**self.alpha + self.v_prime / n**self.beta


SlotRates = Union[VStarRates, Sequence[VStarRates]]


def per_slot_rates(rates: SlotRates, num_slots: int) -> Tuple[VStarRates, ...]:
    """Broadcast a single rate envelope, or check one envelope per slot."""

    if isinstance(rates, VStarRates):
        return (rates,) * num_slots
    if len(rates) != num_slots:
        raise ConfigError(f"one VStarRates per slot is required ({len(rates)} for {num_slots})")
    return tuple(rates)


class OracleVStarEstimator:
    """Returns V* perturbed inside the rate envelope, per exploration count."""

    def __init__(
        self,
        v_star: float,
        rates: SlotRates,
        noise_mode: NoiseMode,
        stream: RngStream,
        num_slots: int,
    ) -> None:
        self.v_star = v_star
        self.rates = per_slot_rates(rates, num_slots)
        self.noise_mode = noise_mode
        self._rng = stream.generator()
        self.exploration_counts = [0] * num_slots

    def observe_exploration(self, i: int, trace: EpisodeTrace, g: float) -> None:
        self.exploration_counts[i - 1] += 1

    def estimate(self, i: int) -> float:
        n = self.exploration_counts[i - 1]
        if n == 0:
            raise InsufficientDataError(f"slot {i} has no exploration episodes")
        return self.v_star + _bounded_noise(self.rates[i - 1].radius(n), self.noise_mode, self._rng)


def threshold_z(n: int, v: float) -> float:
    """𝒵(n, 𝒱) = 𝒱/√n."""

    if n < 1:
        raise ConfigError("threshold_z requires n ≥ 1")
    return v / math.sqrt(n)


def threshold_w_vstar(
    n: int, nominal: NominalCoefficient, config: EceConfig, delta: float
) -> float:
    """C_W·ℛ(d,H,ln(1/δ))·√n + C_W·H·√(n·ln(1/δ))."""

    if n < 1:
        raise ConfigError("threshold_w_vstar requires n ≥ 1")
    log_inv = math.log(1.0 / delta)
    return config.c_w * (
        nominal(config.H, log_inv) * math.sqrt(n) + config.H * math.sqrt(n * log_inv)
    )


def threshold_zv(
    n: int,
    nominal: NominalCoefficient,
    rates: VStarRates,
    config: EceConfig,
    delta: float,
) -> float:
    """C_Z·(𝒱·L^α·n^{1−(1−κ)α} + 𝒱′·L^β·n^{1−(1−κ)β} + H√(n ln(1/δ)) + ℛ_î·√n).

    The estimator rates belong to the comparator j, ℛ to the candidate.
    """

    if n < 1:
        raise ConfigError("threshold_zv requires n ≥ 1")
    keep = 1.0 - config.kappa
    log_inv = math.log(1.0 / delta)
    return config.c_z * (
        rates.v * config.L**rates.alpha * n ** (1.0 - keep * rates.alpha)
        + rates.v_prime * config.L**rates.beta * n ** (1.0 - keep * rates.beta)
        + config.H * math.sqrt(n * log_inv)
        + nominal(config.H, math.log(log_horizon(config) / delta)) * math.sqrt(n)
    )


class _ExplorationRoutingLoop(EliminationLoop):
    """Exploration episodes roll out the forced-exploration learner Ã_j."""

    def __init__(
        self,
        slots: Sequence[BaseLearnerSlot],
        exploration_learners: Sequence[BaseLearner],
        config: EceConfig,
        env: SimulatedEnvironment,
        meta_stream: RngStream,
        **record_fields: Any,
    ) -> None:
        if len(exploration_learners) != len(slots):
            raise ConfigError(
                f"one exploration learner per slot is required "
                f"({len(exploration_learners)} given for {len(slots)} slots)"
            )
        super().__init__(slots, config, env, meta_stream, **record_fields)
        self.exploration_learners = list(exploration_learners)

    def learner_for(self, index: int, explored: bool) -> BaseLearner:
        if explored:
            return self.exploration_learners[index - 1]
        return self.slots[index - 1].learner


class GapEliminationLoop(_ExplorationRoutingLoop):
    variant = "ece-gap"

    def __init__(self, *args: Any, estimator: GapEstimator, **kwargs: Any) -> None:
        super().__init__(*args, **kwargs)
        self.estimator = estimator

    def after_episode(self, index: int, explored: bool, trace: EpisodeTrace, g: float) -> None:
        if explored:
            self.estimator.observe_exploration(index, trace, g)
        else:
            self.estimator.observe_candidate(index, trace, g)

    def test(self) -> Tuple[bool, List[int]]:
        if self.state.t < self.tau_min:
            return False, []
        candidate = self.state.candidate
        witnesses: List[int] = []
        for j in self.state.explore_set:
            n_j = self.state.count(j)
            if n_j == 0:
                continue
            try:
                estimate = self.estimator.estimate(candidate, j)
            except InsufficientDataError:
                continue
            if estimate > threshold_z(n_j, self.estimator.consistency_radius(j)):
                witnesses.append(j)
        return bool(witnesses), witnesses


class KnownVStarLoop(EliminationLoop):
    """No forced exploration; the candidate's shortfall against V* drives rejection."""

    variant = "ece-vstar-known"

    def __init__(self, *args: Any, known_v_star: float, **kwargs: Any) -> None:
        self.known_v_star = known_v_star
        kwargs.setdefault("v_star", known_v_star)
        super().__init__(*args, **kwargs)

    def burn_in_time(self) -> int:
        # τ_min as κ → ∞.
        return max(1, math.ceil(self.config.c_min - 1e-9))

    def select(self, t: int) -> Tuple[int, bool]:
        if self.state.terminal:
            return self.config.L, False
        return self.state.candidate, False

    def test(self) -> Tuple[bool, List[int]]:
        if self.state.t < self.tau_min:
            return False, []
        candidate = self.state.candidate
        n = self.state.count(candidate)
        if n == 0:
            return False, []
        shortfall = n * self.known_v_star - self.state.total(candidate)
        threshold = threshold_w_vstar(n, self.slots[candidate - 1].nominal, self.config, self.delta)
        return shortfall > threshold, []


class EstimatedVStarLoop(_ExplorationRoutingLoop):
    variant = "ece-vhat"

    def __init__(
        self, *args: Any, estimator: VStarEstimator, rates: SlotRates, **kwargs: Any
    ) -> None:
        super().__init__(*args, **kwargs)
        self.estimator = estimator
        self.rates = per_slot_rates(rates, len(self.slots))

    def after_episode(self, index: int, explored: bool, trace: EpisodeTrace, g: float) -> None:
        if explored:
            self.estimator.observe_exploration(index, trace, g)

    def test(self) -> Tuple[bool, List[int]]:
        if self.state.t < self.tau_min:
            return False, []
        candidate = self.state.candidate
        n = self.state.count(candidate)
        if n == 0:
            return False, []
        total = self.state.total(candidate)
        nominal = self.slots[candidate - 1].nominal
        witnesses: List[int] = []
        for j in self.state.explore_set:
            try:
                v_hat = self.estimator.estimate(j)
            except InsufficientDataError:
                continue
            threshold = threshold_zv(n, nominal, self.rates[j - 1], self.config, self.delta)
            if n * v_hat - total > threshold:
                witnesses.append(j)
        return bool(witnesses), witnesses


def run_ece_gap(
    slots: Sequence[BaseLearnerSlot],
    exploration_learners: Sequence[BaseLearner],
    estimator: GapEstimator,
    config: EceConfig,
    env: SimulatedEnvironment,
    meta_stream: RngStream,
    **record_fields: Any,
) -> RunRecord:
    loop = GapEliminationLoop(
        slots, exploration_learners, config, env, meta_stream, estimator=estimator, **record_fields
    )
    return loop.run()


def run_ece_vstar_known(
    slots: Sequence[BaseLearnerSlot],
    v_star: float,
    config: EceConfig,
    env: SimulatedEnvironment,
    meta_stream: RngStream,
    **record_fields: Any,
) -> RunRecord:
    loop = KnownVStarLoop(slots, config, env, meta_stream, known_v_star=v_star, **record_fields)
    return loop.run()


def run_ece_vhat(
    slots: Sequence[BaseLearnerSlot],
    exploration_learners: Sequence[BaseLearner],
    estimator: VStarEstimator,
    rates: SlotRates,
    config: EceConfig,
    env: SimulatedEnvironment,
    meta_stream: RngStream,
    **record_fields: Any,
) -> RunRecord:
    loop = EstimatedVStarLoop(
        slots,
        exploration_learners,
        config,
        env,
        meta_stream,
        estimator=estimator,
        rates=rates,
        **record_fields,
    )
    return loop.run()


def slot_radii(
    num_slots: int, value: float, overrides: Optional[Dict[int, float]] = None
) -> List[float]:
    """Per-slot consistency radii 𝒱_j, constant unless overridden."""

    radii = [value] * num_slots
    for index, radius in (overrides or {}).items():
        radii[index - 1] = radius
    return radii


def slot_rates(
    num_slots: int, base: VStarRates, overrides: Optional[Mapping[int, VStarRates]] = None
) -> List[VStarRates]:
    """Per-slot estimator envelopes, ``base`` unless overridden."""

    rates = [base] * num_slots
    for index, override in (overrides or {}).items():
        if not 1 <= index <= num_slots:
            raise ConfigError(f"rate override for slot {index} outside 1..{num_slots}")
        rates[index - 1] = override
    return rates
