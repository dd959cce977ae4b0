"""Environment construction, episode simulation and exact value oracles."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .config import ConfigError
from .core import (
    PROBABILITY_TOLERANCE,
    DeterministicPolicy,
    EpisodeTrace,
    RngStream,
    TabularMdp,
    draw_index,
    policy_matches,
)

logger = logging.getLogger(__name__)

# Upper bound on cluster action tables searched exhaustively per level.
MAX_EXHAUSTIVE_POLICIES = 2**20

RngLike = Union[RngStream, np.random.Generator]


def _as_generator(rng: RngLike) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


@dataclass(frozen=True, eq=False)
class FeatureLevel:
    """State aggregation: φ(s, u) is one-hot at (cluster_of_state[s], u)."""

    cluster_of_state: np.ndarray
    num_actions: int

    def __post_init__(self) -> None:
        labels = np.array(self.cluster_of_state, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ConfigError("cluster_of_state must be a nonempty 1-D array")
        if labels.min() < 0 or set(np.unique(labels).tolist()) != set(range(int(labels.max()) + 1)):
            raise ConfigError("cluster labels must be contiguous indices starting at 0")
        labels.setflags(write=False)
        object.__setattr__(self, "cluster_of_state", labels)

    @property
    def num_states(self) -> int:
        return int(self.cluster_of_state.size)

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_of_state.max()) + 1

    @property
    def dimension(self) -> int:
        return self.num_clusters * self.num_actions

    def feature_index(self, state: int, action: int) -> int:
        return int(self.cluster_of_state[state]) * self.num_actions + action

    def feature_matrix(self) -> np.ndarray:
        """One-hot features with shape (S, A, d)."""
        phi = np.zeros((self.num_states, self.num_actions, self.dimension))
        for s in range(self.num_states):
            for a in range(self.num_actions):
                phi[s, a, self.feature_index(s, a)] = 1.0
        return phi


@dataclass(frozen=True)
class NestedFeatureFamily:
    """Ordered aggregation levels, coarsest first; level i+1 refines level i."""

    levels: Tuple[FeatureLevel, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise ConfigError("a feature family needs at least one level")
        for coarse, fine in zip(self.levels, self.levels[1:]):
            if coarse.num_states != fine.num_states or coarse.num_actions != fine.num_actions:
                raise ConfigError("all levels must share the state and action spaces")
            if coarse.dimension > fine.dimension:
                raise ConfigError("feature dimensions must be nondecreasing across levels")
            for cluster in range(fine.num_clusters):
                members = coarse.cluster_of_state[fine.cluster_of_state == cluster]
                if np.unique(members).size != 1:
                    raise ConfigError("each level must coarsen the next finer level")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, index: int) -> FeatureLevel:
        """1-based access, matching slot indices."""
        if not 1 <= index <= len(self.levels):
            raise ConfigError(f"level {index} outside 1..{len(self.levels)}")
        return self.levels[index - 1]

    @property
    def dimensions(self) -> Tuple[int, ...]:
        return tuple(level.dimension for level in self.levels)


@dataclass(frozen=True)
class GapControlledFamily:
    """Generated MDP with nested features and exact per-level optimal values."""

    mdp: TabularMdp
    features: NestedFeatureFamily
    true_level: int
    per_level_optimal_values: Tuple[float, ...]
    achieved_gap: float
    target_met: bool

    @property
    def v_star(self) -> float:
        return self.per_level_optimal_values[-1]

    @property
    def gaps(self) -> Tuple[float, ...]:
        """Δ_{i,i_*} = V*_{i_*} − V*_i for every level i."""
        anchor = self.per_level_optimal_values[self.true_level - 1]
        return tuple(anchor - value for value in self.per_level_optimal_values)


@dataclass(frozen=True)
class ValueIterationResult:
    v_star: float
    q_star: np.ndarray
    pi_star: DeterministicPolicy


def sample_episode(
    mdp: TabularMdp,
    policy: DeterministicPolicy,
    rng: RngLike,
    t: int,
) -> EpisodeTrace:
    """Roll out ``policy`` once: s_1 ~ ρ, u_h = π(h, s_h), s_{h+1} ~ P_h(·|s_h, u_h)."""

    if not policy_matches(mdp, policy):
        raise ConfigError(
            f"policy shape {policy.actions.shape} does not match MDP "
            f"(H={mdp.horizon}, S={mdp.num_states}, A={mdp.num_actions})"
        )
    generator = _as_generator(rng)
    state = draw_index(mdp.initial_dist, generator)
    states = [state]
    actions: List[int] = []
    rewards: List[float] = []
    for h in range(mdp.horizon):
        action = int(policy.actions[h, state])
        actions.append(action)
        rewards.append(float(mdp.rewards[h, state, action]))
        state = draw_index(mdp.transitions[h, state, action], generator)
        states.append(state)
    return EpisodeTrace(tuple(states), tuple(actions), tuple(rewards), t)


def value_iteration(mdp: TabularMdp) -> ValueIterationResult:
    """Backward induction; greedy policy breaks ties toward the lowest action index."""

    q_star = np.zeros(mdp.rewards.shape)
    v_next = np.zeros(mdp.num_states)
    for h in reversed(range(mdp.horizon)):
        q_star[h] = mdp.rewards[h] + mdp.transitions[h] @ v_next
        v_next = q_star[h].max(axis=1)
    v_star = float(mdp.initial_dist @ v_next)
    q_star.setflags(write=False)
    return ValueIterationResult(v_star, q_star, DeterministicPolicy(q_star.argmax(axis=2)))


def policy_value(mdp: TabularMdp, policy: DeterministicPolicy) -> float:
    """Exact V^π by pushing the state distribution forward."""

    if not policy_matches(mdp, policy):
        raise ConfigError("policy dimensions do not match the MDP")
    states = np.arange(mdp.num_states)
    dist = mdp.initial_dist
    total = 0.0
    for h in range(mdp.horizon):
        chosen = policy.actions[h]
        total += float(dist @ mdp.rewards[h, states, chosen])
        dist = dist @ mdp.transitions[h, states, chosen]
    return total


def check_realizability(mdp: TabularMdp, family: NestedFeatureFamily, level: int) -> bool:
    """True iff states sharing a cluster have identical reward and transition rows."""

    return _rows_cluster_exact(mdp, family.level(level).cluster_of_state)


def _rows_cluster_exact(mdp: TabularMdp, clusters: np.ndarray) -> bool:
    for cluster in np.unique(clusters):
        members = np.flatnonzero(clusters == cluster)
        reference = members[0]
        for state in members[1:]:
            if not np.allclose(
                mdp.rewards[:, state, :], mdp.rewards[:, reference, :],
                atol=PROBABILITY_TOLERANCE, rtol=0.0,
            ):
                return False
            if not np.allclose(
                mdp.transitions[:, state], mdp.transitions[:, reference],
                atol=PROBABILITY_TOLERANCE, rtol=0.0,
            ):
                return False
    return True


def best_in_class(
    mdp: TabularMdp, family: NestedFeatureFamily, level: int
) -> Tuple[float, DeterministicPolicy]:
    """Best value (and a maximizer) over policies whose action depends only on (h, cluster)."""

    return _best_for_partition(mdp, family.level(level).cluster_of_state)


def best_in_class_value(mdp: TabularMdp, family: NestedFeatureFamily, level: int) -> float:
    return best_in_class(mdp, family, level)[0]


def _best_for_partition(mdp: TabularMdp, clusters: np.ndarray) -> Tuple[float, DeterministicPolicy]:
    if _rows_cluster_exact(mdp, clusters):
        # Identical rows make Q* constant on clusters, so the greedy policy is measurable.
        result = value_iteration(mdp)
        return result.v_star, result.pi_star

    num_clusters = int(clusters.max()) + 1
    table_count = mdp.num_actions ** (num_clusters * mdp.horizon)
    if table_count <= MAX_EXHAUSTIVE_POLICIES:
        return _exhaustive_search(mdp, clusters, num_clusters)

    logger.warning(
        "Best-in-class search over %d cluster policies exceeds the exhaustive cap; "
        "using coordinate ascent (value is a lower bound).",
        table_count,
    )
    return _coordinate_ascent(mdp, clusters, num_clusters)


def _exhaustive_search(
    mdp: TabularMdp, clusters: np.ndarray, num_clusters: int
) -> Tuple[float, DeterministicPolicy]:
    tables = np.array(
        list(itertools.product(range(mdp.num_actions), repeat=num_clusters)), dtype=np.int64
    )
    per_state = tables[:, clusters]  # (K, S)
    num_tables = per_state.shape[0]
    rows = np.arange(mdp.num_states)[None, :]

    dist = mdp.initial_dist[None, :]
    values = np.zeros(1)
    for h in range(mdp.horizon):
        step_rewards = mdp.rewards[h][rows, per_state]  # (K, S)
        values = (values[:, None] + dist @ step_rewards.T).reshape(-1)
        if h < mdp.horizon - 1:
            step_transitions = mdp.transitions[h][rows, per_state]  # (K, S, S)
            dist = np.einsum("ns,kst->nkt", dist, step_transitions).reshape(-1, mdp.num_states)

    best = int(np.argmax(values))
    chosen = np.zeros((mdp.horizon, mdp.num_states), dtype=np.int64)
    remainder = best
    for h in reversed(range(mdp.horizon)):
        chosen[h] = per_state[remainder % num_tables]
        remainder //= num_tables
    return float(values[best]), DeterministicPolicy(chosen)


def _coordinate_ascent(
    mdp: TabularMdp, clusters: np.ndarray, num_clusters: int
) -> Tuple[float, DeterministicPolicy]:
    table = np.zeros((mdp.horizon, num_clusters), dtype=np.int64)
    best = policy_value(mdp, DeterministicPolicy(table[:, clusters]))
    improved = True
    while improved:
        improved = False
        for h, cluster in itertools.product(range(mdp.horizon), range(num_clusters)):
            for action in range(mdp.num_actions):
                if action == table[h, cluster]:
                    continue
                candidate = table.copy()
                candidate[h, cluster] = action
                value = policy_value(mdp, DeterministicPolicy(candidate[:, clusters]))
                if value > best + 1e-12:
                    table, best, improved = candidate, value, True
    return best, DeterministicPolicy(table[:, clusters])


def random_mdp(num_states: int, num_actions: int, horizon: int, rng: RngLike) -> TabularMdp:
    """Dirichlet transitions, uniform rewards, uniform initial distribution."""

    generator = _as_generator(rng)
    transitions = generator.dirichlet(
        np.ones(num_states), size=(horizon, num_states, num_actions)
    )
    transitions /= transitions.sum(axis=-1, keepdims=True)
    rewards = generator.uniform(0.0, 1.0, size=(horizon, num_states, num_actions))
    return TabularMdp(rewards, transitions, np.full(num_states, 1.0 / num_states))


def generate_gap_family(
    num_clusters: int,
    duplication: int,
    levels: int,
    horizon: int,
    gap_knob: float,
    rng: RngLike,
    *,
    num_actions: int = 2,
    true_level: Optional[int] = None,
    action_influence: float = 0.3,
) -> GapControlledFamily:
    """Build an aggregated MDP whose coarse levels lose roughly ``gap_knob`` in value.

    States are ``duplication`` exact copies of each latent cluster, so the latent
    partition and everything finer is realizable. Coarse levels merge cluster
    pairs greedily to maximize the loss, and the reward separation η is searched
    until the gap of the finest coarse level reaches the target.
    """

    if levels < 2 or num_clusters < 2:
        raise ConfigError("generate_gap_family requires levels ≥ 2 and num_clusters ≥ 2")
    if not 0.0 < gap_knob < horizon / 2:
        raise ConfigError(f"gap_knob must lie in (0, H/2) = (0, {horizon / 2})")
    if true_level is None:
        true_level = min(max(2, levels - 1), num_clusters)
    if not 1 <= true_level <= levels:
        raise ConfigError(f"true_level must lie in 1..{levels}")
    if true_level - 1 > num_clusters - 1:
        raise ConfigError("not enough latent clusters for the requested coarse levels")

    generator = _as_generator(rng)
    m, k, a_count = num_clusters, duplication, num_actions
    shared_rows = generator.dirichlet(np.ones(m), size=(horizon, m))
    action_rows = generator.dirichlet(np.ones(m), size=(horizon, m, a_count))
    latent_transitions = (1.0 - action_influence) * shared_rows[:, :, None, :] + (
        action_influence * action_rows
    )
    reward_noise = generator.uniform(-1.0, 1.0, size=(horizon, m, a_count))
    preferred = np.arange(m) % a_count
    signs = np.where(np.arange(a_count)[None, :] == preferred[:, None], 1.0, -1.0)

    latent_labels = np.repeat(np.arange(m), k)
    fine_partitions = _refinements(latent_labels, k, levels - true_level)

    best: Optional[GapControlledFamily] = None
    for eta in np.linspace(0.05, 0.5, 10):
        latent_rewards = np.clip(
            0.5 + eta * signs[None, :, :] + 0.1 * (0.5 - eta) * reward_noise, 0.0, 1.0
        )
        mdp = _expand_latent(latent_rewards, latent_transitions, latent_labels, k)
        coarse = _greedy_coarsenings(mdp, latent_labels, true_level - 1)
        partitions = coarse + [latent_labels] + fine_partitions
        family = NestedFeatureFamily(tuple(FeatureLevel(p, a_count) for p in partitions))
        values = tuple(
            best_in_class_value(mdp, family, index) for index in range(1, levels + 1)
        )
        achieved = (
            values[true_level - 1] - values[true_level - 2] if true_level >= 2 else 0.0
        )
        candidate = GapControlledFamily(
            mdp, family, true_level, values, float(achieved), achieved >= gap_knob
        )
        if best is None or candidate.achieved_gap > best.achieved_gap:
            best = candidate
        if candidate.target_met:
            best = candidate
            break

    assert best is not None
    for index in range(best.true_level, levels + 1):
        if not check_realizability(best.mdp, best.features, index):
            raise RuntimeError(f"generated level {index} is not realizable")
    if not best.target_met:
        logger.warning(
            "Gap target %.4f not reachable; best achieved gap is %.4f.",
            gap_knob,
            best.achieved_gap,
        )
    return best


def _expand_latent(
    latent_rewards: np.ndarray,
    latent_transitions: np.ndarray,
    labels: np.ndarray,
    duplication: int,
) -> TabularMdp:
    rewards = latent_rewards[:, labels, :]
    transitions = latent_transitions[:, labels][..., labels] / duplication
    transitions /= transitions.sum(axis=-1, keepdims=True)
    num_states = labels.size
    return TabularMdp(rewards, transitions, np.full(num_states, 1.0 / num_states))


def _canonical(labels: np.ndarray) -> np.ndarray:
    return np.unique(labels, return_inverse=True)[1].astype(np.int64).reshape(-1)


def _greedy_coarsenings(mdp: TabularMdp, labels: np.ndarray, count: int) -> List[np.ndarray]:
    """Merge one cluster pair per step, always the pair that loses the most value."""

    partitions: List[np.ndarray] = []
    current = labels
    for _ in range(count):
        best_pair: Optional[Tuple[int, int]] = None
        best_value = math.inf
        for first, second in itertools.combinations(range(int(current.max()) + 1), 2):
            merged = _canonical(np.where(current == second, first, current))
            value = _best_for_partition(mdp, merged)[0]
            if value < best_value - 1e-12:
                best_pair, best_value = (first, second), value
        assert best_pair is not None
        current = _canonical(np.where(current == best_pair[1], best_pair[0], current))
        partitions.append(current)
    return list(reversed(partitions))


def _refinements(latent: np.ndarray, duplication: int, count: int) -> List[np.ndarray]:
    """Progressively split duplicated states; the last refinement is the identity."""

    num_clusters = int(latent.max()) + 1
    partitions: List[np.ndarray] = []
    for step in range(1, count + 1):
        split = math.ceil(step * num_clusters / count)
        labels = np.where(latent < split, num_clusters + np.arange(latent.size), latent)
        partitions.append(_canonical(labels))
    return partitions


class SimulatedEnvironment:
    """Owns the environment RNG stream and memoizes exact policy values."""

    def __init__(self, mdp: TabularMdp, stream: RngStream) -> None:
        self.mdp = mdp
        self._rng = stream.generator()
        self._values: Dict[bytes, float] = {}

    def rollout(self, policy: DeterministicPolicy, t: int) -> EpisodeTrace:
        return sample_episode(self.mdp, policy, self._rng, t)

    def value_of(self, policy: DeterministicPolicy) -> float:
        key = policy.key()
        if key not in self._values:
            self._values[key] = policy_value(self.mdp, policy)
        return self._values[key]


class MdpDocument(BaseModel):
    """JSON form of :class:`TabularMdp`."""

    schema_version: Literal[1] = 1
    rewards: List[List[List[float]]]
    transitions: List[List[List[List[float]]]]
    initial_dist: List[float]


class FamilyDocument(BaseModel):
    """JSON form of :class:`GapControlledFamily`."""

    schema_version: Literal[1] = 1
    mdp: MdpDocument
    num_actions: int
    levels: List[List[int]]
    true_level: int
    per_level_optimal_values: List[float]
    achieved_gap: float
    target_met: bool


def mdp_to_document(mdp: TabularMdp) -> Dict[str, Any]:
    return MdpDocument(
        rewards=mdp.rewards.tolist(),
        transitions=mdp.transitions.tolist(),
        initial_dist=mdp.initial_dist.tolist(),
    ).model_dump()


def mdp_from_document(document: Dict[str, Any]) -> TabularMdp:
    parsed = MdpDocument.model_validate(document)
    return TabularMdp(
        np.asarray(parsed.rewards), np.asarray(parsed.transitions), np.asarray(parsed.initial_dist)
    )


def family_to_document(family: GapControlledFamily) -> Dict[str, Any]:
    return FamilyDocument(
        mdp=MdpDocument.model_validate(mdp_to_document(family.mdp)),
        num_actions=family.features.levels[0].num_actions,
        levels=[level.cluster_of_state.tolist() for level in family.features.levels],
        true_level=family.true_level,
        per_level_optimal_values=list(family.per_level_optimal_values),
        achieved_gap=family.achieved_gap,
        target_met=family.target_met,
    ).model_dump()


def family_from_document(document: Dict[str, Any]) -> GapControlledFamily:
    parsed = FamilyDocument.model_validate(document)
    features = NestedFeatureFamily(
        tuple(FeatureLevel(np.asarray(labels), parsed.num_actions) for labels in parsed.levels)
    )
    return GapControlledFamily(
        mdp=mdp_from_document(parsed.mdp.model_dump()),
        features=features,
        true_level=parsed.true_level,
        per_level_optimal_values=tuple(parsed.per_level_optimal_values),
        achieved_gap=parsed.achieved_gap,
        target_met=parsed.target_met,
    )


def cluster_policy(level: FeatureLevel, table: Sequence[Sequence[int]]) -> DeterministicPolicy:
    """Lift an (H, clusters) action table to a state policy."""

    actions = np.asarray(table, dtype=np.int64)
    return DeterministicPolicy(actions[:, level.cluster_of_state])
