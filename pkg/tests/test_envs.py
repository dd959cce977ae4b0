from __future__ import annotations

import itertools
import logging

import numpy as np
import pytest

from ece_select import envs
from ece_select.config import ConfigError
from ece_select.core import (
    DeterministicPolicy,
    RngStream,
    TabularMdp,
    episode_return,
    iter_policies,
    validate_mdp,
)
from ece_select.envs import (
    FeatureLevel,
    NestedFeatureFamily,
    SimulatedEnvironment,
    best_in_class,
    best_in_class_value,
    check_realizability,
    cluster_policy,
    family_from_document,
    family_to_document,
    generate_gap_family,
    mdp_from_document,
    mdp_to_document,
    policy_value,
    random_mdp,
    sample_episode,
    value_iteration,
)
from tests.fake_learners import bandit_mdp, coin_mdp


def _brute_force_class_value(mdp: TabularMdp, labels: np.ndarray) -> float:
    level = FeatureLevel(labels, mdp.num_actions)
    tables = itertools.product(range(mdp.num_actions), repeat=mdp.horizon * level.num_clusters)
    shape = (mdp.horizon, level.num_clusters)
    return max(
        policy_value(mdp, cluster_policy(level, np.reshape(table, shape))) for table in tables
    )


def test_sample_episode_follows_deterministic_dynamics() -> None:
    mdp = bandit_mdp([0.3, 0.9], horizon=3)
    policy = DeterministicPolicy.constant(3, 1, 1)

    trace = sample_episode(mdp, policy, RngStream(0), t=4)

    assert trace.states == (0, 0, 0, 0)
    assert trace.actions == (1, 1, 1)
    assert episode_return(trace) == pytest.approx(0.9)
    assert trace.episode_index == 4


def test_sample_episode_rejects_mismatched_policy() -> None:
    with pytest.raises(ConfigError, match="does not match"):
        sample_episode(coin_mdp(), DeterministicPolicy.constant(1, 2, 0), RngStream(0), t=1)


def test_sample_episode_is_replayable_from_stream() -> None:
    mdp = random_mdp(4, 2, 3, RngStream(11))
    policy = DeterministicPolicy.constant(3, 4, 1)

    runs = []
    for _ in range(2):
        generator = RngStream(5).generator()
        runs.append([sample_episode(mdp, policy, generator, t) for t in range(1, 20)])

    assert runs[0] == runs[1]


def test_monte_carlo_returns_match_exact_value() -> None:
    mdp = random_mdp(3, 2, 3, RngStream(2))
    policy = DeterministicPolicy(np.array([[0, 1, 0], [1, 1, 0], [0, 0, 1]]))
    generator = RngStream(3).generator()

    returns = np.array(
        [episode_return(sample_episode(mdp, policy, generator, t)) for t in range(1, 4001)]
    )
    standard_error = returns.std(ddof=1) / np.sqrt(returns.size)

    assert abs(returns.mean() - policy_value(mdp, policy)) < 4 * standard_error


def test_value_iteration_matches_exhaustive_enumeration() -> None:
    for instance in range(50):
        stream = RngStream(100 + instance)
        generator = stream.generator()
        num_states = int(generator.integers(1, 4))
        horizon = int(generator.integers(1, 4))
        mdp = random_mdp(num_states, 2, horizon, generator)

        best = max(policy_value(mdp, policy) for policy in iter_policies(horizon, num_states, 2))
        result = value_iteration(mdp)

        assert result.v_star == pytest.approx(best, abs=1e-9)
        assert policy_value(mdp, result.pi_star) == pytest.approx(best, abs=1e-9)


def test_value_iteration_breaks_ties_toward_lowest_action() -> None:
    result = value_iteration(bandit_mdp([0.5, 0.5, 0.5]))

    assert result.pi_star.actions.tolist() == [[0]]
    assert result.v_star == pytest.approx(0.5)


def test_best_in_class_matches_brute_force_on_misspecified_partitions() -> None:
    for instance in range(20):
        generator = RngStream(500 + instance).generator()
        num_states = int(generator.integers(2, 5))
        horizon = int(generator.integers(1, 4))
        mdp = random_mdp(num_states, 2, horizon, generator)
        labels = np.zeros(num_states, dtype=np.int64)
        family = NestedFeatureFamily((FeatureLevel(labels, 2),))

        value, policy = best_in_class(mdp, family, 1)

        assert value == pytest.approx(_brute_force_class_value(mdp, labels), abs=1e-9)
        assert policy_value(mdp, policy) == pytest.approx(value, abs=1e-9)
        assert np.all(policy.actions == policy.actions[:, :1])


def test_realizable_level_short_circuits_to_value_iteration() -> None:
    mdp = random_mdp(3, 2, 2, RngStream(8))
    family = NestedFeatureFamily((FeatureLevel(np.arange(3), 2),))

    assert check_realizability(mdp, family, 1)
    assert best_in_class_value(mdp, family, 1) == pytest.approx(value_iteration(mdp).v_star)


def test_coordinate_ascent_fallback_warns_and_lower_bounds(
    monkeypatch: pytest.MonkeyPatch, caplog: pytest.LogCaptureFixture
) -> None:
    mdp = random_mdp(4, 2, 2, RngStream(21))
    labels = np.array([0, 0, 1, 1])
    family = NestedFeatureFamily((FeatureLevel(labels, 2),))
    exact = best_in_class_value(mdp, family, 1)
    monkeypatch.setattr(envs, "MAX_EXHAUSTIVE_POLICIES", 1)

    with caplog.at_level(logging.WARNING, logger="ece_select.envs"):
        approximate = best_in_class_value(mdp, family, 1)

    assert approximate <= exact + 1e-12
    assert "coordinate ascent" in caplog.text


def test_feature_level_one_hot_features() -> None:
    level = FeatureLevel(np.array([0, 0, 1]), num_actions=2)
    phi = level.feature_matrix()

    assert level.dimension == 4
    assert phi.shape == (3, 2, 4)
    assert np.all(phi.sum(axis=2) == 1.0)
    assert level.feature_index(2, 1) == 3
    assert np.array_equal(phi[0], phi[1])


def test_feature_level_rejects_gapped_labels() -> None:
    with pytest.raises(ConfigError, match="contiguous"):
        FeatureLevel(np.array([0, 2]), num_actions=2)


def test_family_requires_coarsening_order() -> None:
    coarse = FeatureLevel(np.array([0, 0, 1, 1]), 2)
    crossing = FeatureLevel(np.array([0, 1, 1, 2]), 2)

    with pytest.raises(ConfigError, match="coarsen"):
        NestedFeatureFamily((coarse, crossing))


def test_family_requires_nondecreasing_dimensions() -> None:
    fine = FeatureLevel(np.arange(4), 2)
    coarse = FeatureLevel(np.array([0, 0, 1, 1]), 2)

    with pytest.raises(ConfigError, match="nondecreasing"):
        NestedFeatureFamily((fine, coarse))


def test_generated_family_structure() -> None:
    family = generate_gap_family(2, 2, 3, 3, 0.1, RngStream(4))

    assert validate_mdp(family.mdp) == []
    assert family.true_level == 2
    assert family.features.num_levels == 3
    assert list(family.features.dimensions) == sorted(family.features.dimensions)
    assert family.features.level(3).num_clusters == 4
    for level in (2, 3):
        assert check_realizability(family.mdp, family.features, level)
    assert not check_realizability(family.mdp, family.features, 1)
    values = family.per_level_optimal_values
    assert values[0] <= values[1] + 1e-12
    assert values[1] == pytest.approx(values[2])
    assert family.v_star == pytest.approx(value_iteration(family.mdp).v_star)


def test_generated_family_meets_reachable_gap() -> None:
    family = generate_gap_family(2, 2, 3, 3, 0.1, RngStream(4))

    assert family.target_met
    assert family.achieved_gap >= 0.1
    assert family.gaps[0] == pytest.approx(family.achieved_gap)
    assert family.gaps[2] == pytest.approx(0.0, abs=1e-12)


def test_generated_family_is_deterministic() -> None:
    first = generate_gap_family(3, 2, 3, 2, 0.2, RngStream(9))
    second = generate_gap_family(3, 2, 3, 2, 0.2, RngStream(9))

    assert np.array_equal(first.mdp.transitions, second.mdp.transitions)
    assert first.per_level_optimal_values == second.per_level_optimal_values


def test_generate_gap_family_rejects_bad_gap() -> None:
    with pytest.raises(ConfigError, match="gap_knob"):
        generate_gap_family(2, 2, 3, 2, 1.5, RngStream(0))


def test_simulated_environment_memoizes_exact_values() -> None:
    mdp = random_mdp(3, 2, 2, RngStream(6))
    env = SimulatedEnvironment(mdp, RngStream(6, 1))
    policy = DeterministicPolicy.constant(2, 3, 1)

    assert env.value_of(policy) == pytest.approx(policy_value(mdp, policy))
    assert env.value_of(DeterministicPolicy.constant(2, 3, 1)) == env.value_of(policy)
    assert env.rollout(policy, 1).horizon == 2


def test_documents_preserve_mdp_and_family() -> None:
    family = generate_gap_family(2, 1, 2, 2, 0.1, RngStream(1))

    mdp = mdp_from_document(mdp_to_document(family.mdp))
    restored = family_from_document(family_to_document(family))

    assert np.array_equal(mdp.rewards, family.mdp.rewards)
    assert restored.per_level_optimal_values == family.per_level_optimal_values
    assert restored.features.dimensions == family.features.dimensions
    assert family_to_document(family)["schema_version"] == 1
