"""Scenario assembly: environments, slots and meta-algorithm dispatch for one run."""

from __future__ import annotations

import dataclasses
import functools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .base_learners import (
    BaseLearner,
    BaseLearnerSlot,
    LsviUcbLearner,
    ScriptedLearner,
    UniformRandomLearner,
    lsvi_beta,
    make_slot,
)
from .config import ConfigError, EnvironmentConfig, ExperimentConfig, resolve_document
from .core import (
    ENVIRONMENT_STREAM,
    ESTIMATOR_STREAM,
    GENERATOR_STREAM,
    LEARNER_STREAM,
    META_STREAM,
    DeterministicPolicy,
    RngStream,
    TabularMdp,
    constant_nominal,
    lsvi_ucb_nominal,
)
from .envs import (
    GapControlledFamily,
    SimulatedEnvironment,
    best_in_class,
    generate_gap_family,
)
from .logging import set_log_context
from .meta_ece import run_ece
from .meta_variants import (
    EmpiricalGapEstimator,
    GapEstimator,
    OracleGapEstimator,
    OracleVStarEstimator,
    VStarRates,
    oracle_gap_estimator,
    run_ece_gap,
    run_ece_vhat,
    run_ece_vstar_known,
    slot_radii,
    slot_rates,
)
from .records import RunRecord

logger = logging.getLogger(__name__)

Arm = Literal["ece", "oracle", "misspecified"]
ARMS: Tuple[Arm, ...] = ("ece", "oracle", "misspecified")


@dataclass
class Experiment:
    """Everything one run needs, built from a config and a run seed."""

    scenario: str
    mdp: TabularMdp
    slots: List[BaseLearnerSlot]
    slot_values: Tuple[float, ...]
    v_star: float
    true_index: int
    run_seed: int
    family: Optional[GapControlledFamily] = None
    exploration_learners: List[BaseLearner] = field(default_factory=list)

    def environment(self) -> SimulatedEnvironment:
        return SimulatedEnvironment(self.mdp, RngStream(self.run_seed, ENVIRONMENT_STREAM))


@functools.lru_cache(maxsize=8)
def _cached_family(environment_json: str, seed: int) -> GapControlledFamily:
    env_cfg = EnvironmentConfig.model_validate_json(environment_json)
    family = generate_gap_family(
        env_cfg.num_clusters,
        env_cfg.duplication,
        env_cfg.levels,
        env_cfg.horizon,
        env_cfg.gap,
        RngStream(seed, GENERATOR_STREAM),
        num_actions=env_cfg.num_actions,
        true_level=env_cfg.true_level,
        action_influence=env_cfg.action_influence,
    )
    logger.info("Generated family %s", describe_family(family))
    return family


def build_family(config: ExperimentConfig) -> GapControlledFamily:
    """The generated family depends only on the base seed, never on the run seed."""

    return _cached_family(config.environment.model_dump_json(), config.seed)


def shortfall_mdp(shortfalls: List[float], horizon: int) -> TabularMdp:
    """One state; action a returns H − shortfalls[a] deterministically."""

    if any(value > horizon for value in shortfalls):
        raise ConfigError(f"shortfalls cannot exceed the horizon H={horizon}")
    per_step = np.array([1.0 - value / horizon for value in shortfalls])
    num_actions = len(shortfalls)
    rewards = np.tile(per_step, (horizon, 1, 1))
    transitions = np.ones((horizon, 1, num_actions, 1))
    return TabularMdp(rewards, transitions, np.ones(1))


def apply_gap(config: ExperimentConfig, gap: float) -> ExperimentConfig:
    """Copy of ``config`` with its misspecification gap set to ``gap``."""

    if config.scenario == "scripted-shortfall":
        shortfalls = config.scripted.shortfalls
        if not any(value > 0 for value in shortfalls):
            raise ConfigError("scripted.shortfalls has no misspecified slot to resize")
        scripted = config.scripted.model_copy(
            update={"shortfalls": [gap if value > 0 else 0.0 for value in shortfalls]}
        )
        return config.model_copy(update={"scripted": scripted})
    try:
        environment = EnvironmentConfig.model_validate(
            {**config.environment.model_dump(), "gap": gap}
        )
    except ValidationError as exc:
        raise ConfigError(f"gap {gap:g}: {exc.errors()[0]['msg']}") from exc
    return config.model_copy(update={"environment": environment})


def _nominals(config: ExperimentConfig, count: int) -> List[float]:
    nominals = list(config.scripted.nominals)
    if nominals and len(nominals) != count:
        raise ConfigError(f"scripted.nominals needs {count} entries, got {len(nominals)}")
    return nominals or [0.0] * count


def build_experiment(config: ExperimentConfig, run_seed: Optional[int] = None) -> Experiment:
    """Assemble the environment and slots of ``config.scenario``."""

    seed = config.seed if run_seed is None else run_seed
    horizon = config.environment.horizon

    if config.scenario == "scripted-shortfall":
        shortfalls = list(config.scripted.shortfalls)
        mdp = shortfall_mdp(shortfalls, horizon)
        nominals = _nominals(config, len(shortfalls))
        slots = [
            make_slot(
                functools.partial(
                    ScriptedLearner, [DeterministicPolicy.constant(horizon, 1, action)]
                ),
                constant_nominal(nominals[action]),
                f"shortfall={shortfall:g}",
            )
            for action, shortfall in enumerate(shortfalls)
        ]
        slot_values = tuple(horizon - value for value in shortfalls)
        experiment = Experiment(
            scenario=config.scenario,
            mdp=mdp,
            slots=slots,
            slot_values=slot_values,
            v_star=float(horizon),
            true_index=shortfalls.index(0.0) + 1,
            run_seed=seed,
        )
    else:
        family = build_family(config)
        mdp = family.mdp
        if config.scenario == "scripted-gap":
            slots = _scripted_family_slots(config, family)
        else:
            slots = _lsvi_family_slots(config, family)
        experiment = Experiment(
            scenario=config.scenario,
            mdp=mdp,
            slots=slots,
            slot_values=family.per_level_optimal_values,
            v_star=family.v_star,
            true_index=family.true_level,
            run_seed=seed,
            family=family,
        )

    learner_stream = RngStream(seed, LEARNER_STREAM)
    experiment.exploration_learners = [
        UniformRandomLearner(
            mdp.num_states, mdp.num_actions, mdp.horizon, learner_stream.child(index)
        )
        for index in range(1, len(experiment.slots) + 1)
    ]

    set_log_context(scenario=config.scenario, variant=config.variant, seed=seed)
    logger.debug(
        "Built %s with %d slots; true slot %d, V*=%.6f",
        config.scenario,
        len(experiment.slots),
        experiment.true_index,
        experiment.v_star,
    )
    return experiment


def _scripted_family_slots(
    config: ExperimentConfig, family: GapControlledFamily
) -> List[BaseLearnerSlot]:
    nominals = _nominals(config, family.features.num_levels)
    slots: List[BaseLearnerSlot] = []
    for level in range(1, family.features.num_levels + 1):
        _, policy = best_in_class(family.mdp, family.features, level)
        slots.append(
            make_slot(
                functools.partial(ScriptedLearner, [policy]),
                constant_nominal(nominals[level - 1], family.features.level(level).dimension),
                f"scripted-level-{level}",
            )
        )
    return slots


def _lsvi_family_slots(
    config: ExperimentConfig, family: GapControlledFamily
) -> List[BaseLearnerSlot]:
    lsvi = config.lsvi
    horizon = family.mdp.horizon
    slots: List[BaseLearnerSlot] = []
    for level in range(1, family.features.num_levels + 1):
        features = family.features.level(level)
        beta = lsvi_beta(lsvi.c_beta, features.dimension, horizon, config.ece.horizon_T, lsvi.delta)
        slots.append(
            make_slot(
                functools.partial(
                    LsviUcbLearner, features, horizon, beta=beta, reg_lambda=lsvi.reg_lambda
                ),
                lsvi_ucb_nominal(lsvi.c_r, features.dimension),
                f"lsvi-level-{level}",
                anytime=lsvi.anytime,
            )
        )
    return slots


def build_gap_estimator(config: ExperimentConfig, experiment: Experiment) -> GapEstimator:
    """Oracle estimators perturb the true per-slot best-in-class values."""

    gap = config.gap
    if gap.estimator == "heuristic":
        return EmpiricalGapEstimator(len(experiment.slots), gap.consistency_value)
    radii = slot_radii(len(experiment.slots), gap.consistency_value)
    stream = RngStream(experiment.run_seed, ESTIMATOR_STREAM)
    if experiment.family is not None:
        return oracle_gap_estimator(
            experiment.family, gap.consistency_c, radii, gap.noise_mode, stream
        )
    return OracleGapEstimator(
        experiment.slot_values, gap.consistency_c, radii, gap.noise_mode, stream
    )


def build_vstar_rates(config: ExperimentConfig, num_slots: int) -> List[VStarRates]:
    vhat = config.vhat
    base = VStarRates(vhat.alpha, vhat.beta, vhat.v, vhat.v_prime)
    overrides = {
        index: dataclasses.replace(base, **override.model_dump(exclude_none=True))
        for index, override in vhat.slot_overrides.items()
    }
    return slot_rates(num_slots, base, overrides)


def run_experiment(
    config: ExperimentConfig,
    arm: Arm = "ece",
    run_seed: Optional[int] = None,
) -> RunRecord:
    """Run the configured variant, or a single-slot baseline arm."""

    experiment = build_experiment(config, run_seed)
    seed = experiment.run_seed
    document: Dict[str, Any] = resolve_document(config)
    document["run"] = {"arm": arm, "run_seed": seed, "horizon_T": config.ece.horizon_T}
    meta_stream = RngStream(seed, META_STREAM)
    env = experiment.environment()
    set_log_context(arm=arm, horizon_T=config.ece.horizon_T)

    if arm != "ece":
        index = experiment.true_index if arm == "oracle" else 1
        return run_ece(
            [experiment.slots[index - 1]],
            config.ece,
            env,
            meta_stream,
            v_star=experiment.v_star,
            per_level_values=(experiment.slot_values[index - 1],),
            resolved_config=document,
        )

    fields: Dict[str, Any] = {
        "v_star": experiment.v_star,
        "per_level_values": experiment.slot_values,
        "resolved_config": document,
    }
    if config.variant == "ece":
        return run_ece(experiment.slots, config.ece, env, meta_stream, **fields)
    if config.variant == "ece-gap":
        return run_ece_gap(
            experiment.slots,
            experiment.exploration_learners,
            build_gap_estimator(config, experiment),
            config.ece,
            env,
            meta_stream,
            **fields,
        )
    if config.variant == "ece-vstar-known":
        fields.pop("v_star")
        return run_ece_vstar_known(
            experiment.slots, experiment.v_star, config.ece, env, meta_stream, **fields
        )
    rates = build_vstar_rates(config, len(experiment.slots))
    estimator = OracleVStarEstimator(
        experiment.v_star,
        rates,
        config.vhat.noise_mode,
        RngStream(seed, ESTIMATOR_STREAM),
        len(experiment.slots),
    )
    return run_ece_vhat(
        experiment.slots,
        experiment.exploration_learners,
        estimator,
        rates,
        config.ece,
        env,
        meta_stream,
        **fields,
    )


def describe_family(family: GapControlledFamily) -> str:
    return json.dumps(
        {
            "true_level": family.true_level,
            "dimensions": list(family.features.dimensions),
            "values": [round(value, 6) for value in family.per_level_optimal_values],
            "achieved_gap": round(family.achieved_gap, 6),
            "target_met": family.target_met,
        }
    )
