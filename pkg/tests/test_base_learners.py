from __future__ import annotations

import math
from typing import List

import numpy as np
import pytest

from ece_select.base_learners import (
    DoublingLearner,
    LsviUcbLearner,
    ScriptedLearner,
    UniformRandomLearner,
    check_slot_ordering,
    lsvi_beta,
    make_slot,
)
from ece_select.config import ConfigError
from ece_select.core import EpisodeTrace, RngStream, constant_nominal, lsvi_ucb_nominal
from ece_select.envs import FeatureLevel, SimulatedEnvironment
from tests.fake_learners import CountingLearner, bandit_mdp, constant_action, scripted_slot


def _single_step_trace(action: int, reward: float, t: int = 1) -> EpisodeTrace:
    return EpisodeTrace((0, 0), (action,), (reward,), t)


def test_lsvi_single_observation_regresses_toward_reward() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 1), horizon=1, beta=0.0, reg_lambda=1.0)

    learner.observe(1, _single_step_trace(0, 1.0), 1.0)

    assert learner.q_values(2)[0, 0, 0] == pytest.approx(0.5)


def test_lsvi_without_data_is_fully_optimistic() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0, 1]), 2), horizon=3, beta=5.0)

    q = learner.q_values(1)

    assert q.shape == (3, 2, 2)
    assert np.all(q == 3.0)
    assert learner.propose_policy(1).actions.tolist() == [[0, 0]] * 3


def test_lsvi_gram_trace_grows_by_one_per_step() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 2), horizon=1, beta=0.1)
    before = np.trace(learner.gram(0))

    for t in range(1, 6):
        learner.observe(t, _single_step_trace(t % 2, 0.5, t), 0.5)

    assert np.trace(learner.gram(0)) == pytest.approx(before + 5)


def test_lsvi_gram_copy_is_detached() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 1), horizon=1, beta=0.0)

    learner.gram(0)[0, 0] = 100.0

    assert learner.gram(0)[0, 0] == 1.0


def test_lsvi_prefers_better_action_after_data() -> None:
    mdp = bandit_mdp([0.2, 0.9])
    env = SimulatedEnvironment(mdp, RngStream(0, 1))
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 2), horizon=1, beta=0.0)

    for t in range(1, 11):
        trace = env.rollout(constant_action(t % 2), t)
        learner.observe(t, trace, sum(trace.rewards))

    assert learner.propose_policy(11).actions.tolist() == [[1]]


def test_lsvi_reset_forgets_data() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 1), horizon=1, beta=0.0)
    learner.observe(1, _single_step_trace(0, 1.0), 1.0)

    learner.reset()

    assert learner.q_values(2)[0, 0, 0] == 0.0
    assert learner.gram(0)[0, 0] == 1.0


def test_lsvi_rejects_wrong_trace_length() -> None:
    learner = LsviUcbLearner(FeatureLevel(np.array([0]), 1), horizon=2, beta=0.0)

    with pytest.raises(ConfigError, match="horizon"):
        learner.observe(1, _single_step_trace(0, 1.0), 1.0)


def test_lsvi_beta_closed_form() -> None:
    assert lsvi_beta(1.0, 1, 1, 1, 2 / math.e) == pytest.approx(1.0)
    assert lsvi_beta(0.5, 4, 2, 100, 0.01) == pytest.approx(
        0.5 * 4 * 2 * math.sqrt(math.log(2 * 4 * 100 * 2 / 0.01))
    )


def test_doubling_restarts_at_powers_of_two() -> None:
    built: List[CountingLearner] = []

    def factory() -> CountingLearner:
        learner = CountingLearner(constant_action(0))
        built.append(learner)
        return learner

    wrapper = DoublingLearner(factory)
    for t in range(1, 8):
        wrapper.propose_policy(t)
        wrapper.observe(t, _single_step_trace(0, 0.0, t), 0.0)

    assert wrapper.restart_points == [1, 2, 4, 8]
    assert wrapper.local_plays == 7
    assert len(built) == 4
    assert [len(learner.observed) for learner in built] == [1, 2, 4, 0]
    assert [t for t, _ in built[2].observed] == [1, 2, 3, 4]


def test_doubling_reset_starts_over() -> None:
    wrapper = DoublingLearner(lambda: CountingLearner(constant_action(0)))
    for t in range(1, 4):
        wrapper.observe(t, _single_step_trace(0, 0.0, t), 0.0)

    wrapper.reset()

    assert wrapper.restart_points == [1]
    assert wrapper.local_plays == 0


def test_scripted_learner_holds_last_policy() -> None:
    learner = ScriptedLearner([constant_action(0), constant_action(1)])

    plays = []
    for t in range(1, 5):
        plays.append(int(learner.propose_policy(t).actions[0, 0]))
        learner.observe(t, _single_step_trace(plays[-1], 0.0, t), 0.0)

    assert plays == [0, 1, 1, 1]


def test_scripted_learner_cycles_and_resets() -> None:
    learner = ScriptedLearner([constant_action(0), constant_action(1)], cycle=True)

    plays = []
    for t in range(1, 5):
        plays.append(int(learner.propose_policy(t).actions[0, 0]))
        learner.observe(t, _single_step_trace(plays[-1], 0.0, t), 0.0)
    learner.reset()

    assert plays == [0, 1, 0, 1]
    assert learner.local_plays == 0


def test_scripted_learner_needs_policies() -> None:
    with pytest.raises(ConfigError, match="at least one policy"):
        ScriptedLearner([])


def test_uniform_learner_is_keyed_by_episode() -> None:
    first = UniformRandomLearner(4, 2, 3, RngStream(1, 2))
    second = UniformRandomLearner(4, 2, 3, RngStream(1, 2))

    assert first.propose_policy(5) == second.propose_policy(5)
    assert len({first.propose_policy(t).key() for t in range(1, 20)}) > 1
    assert first.propose_policy(5).actions.shape == (3, 4)


def test_make_slot_wraps_non_anytime_learners() -> None:
    anytime = make_slot(lambda: CountingLearner(constant_action(0)), constant_nominal(1.0), "a")
    wrapped = make_slot(
        lambda: CountingLearner(constant_action(0)), constant_nominal(1.0), "b", anytime=False
    )

    assert isinstance(anytime.learner, CountingLearner)
    assert isinstance(wrapped.learner, DoublingLearner)
    assert wrapped.anytime is False


def test_slot_ordering_accepts_nondecreasing_coefficients() -> None:
    slots = [
        scripted_slot(0, nominal=1.0),
        scripted_slot(1, nominal=1.0),
        scripted_slot(0, nominal=2.0),
    ]

    check_slot_ordering(slots, horizon=1)


def test_slot_ordering_rejects_inversion() -> None:
    slots = [
        scripted_slot(0, nominal=3.0, label="big"),
        scripted_slot(1, nominal=1.0, label="small"),
    ]

    with pytest.raises(ConfigError, match="slots must be ordered by regret"):
        check_slot_ordering(slots, horizon=1)


def test_lsvi_nominals_order_by_dimension() -> None:
    small = make_slot(lambda: CountingLearner(constant_action(0)), lsvi_ucb_nominal(0.05, 2), "d2")
    large = make_slot(lambda: CountingLearner(constant_action(0)), lsvi_ucb_nominal(0.05, 8), "d8")

    check_slot_ordering([small, large], horizon=3)
    with pytest.raises(ConfigError):
        check_slot_ordering([large, small], horizon=3)
