"""Configuration loading for model-selection experiments."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, MutableMapping, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

Variant = Literal["ece", "ece-gap", "ece-vstar-known", "ece-vhat"]
Scenario = Literal["scripted-gap", "lsvi-nested", "scripted-shortfall"]
NoiseMode = Literal["uniform", "worst-case-positive", "worst-case-negative"]

SCHEMA_VERSION = 1


class ConfigError(RuntimeError):
    """Raised when configuration is invalid."""


class _StrictModel(BaseModel):
    """Unknown fields are errors so typos in threshold constants surface early."""

    model_config = ConfigDict(extra="forbid")


class EceConfig(_StrictModel):
    """Inputs of the Explore-Commit-Eliminate loop."""

    kappa: float = 1.0 / 3.0
    delta_prime: float = 0.05
    horizon_T: int = Field(1000, ge=0)
    c_w: float = Field(1.0, gt=0)
    c_min: float = Field(1.0, gt=0)
    c_z: float = Field(1.0, gt=0)
    H: int = Field(1, ge=1)
    L: int = Field(1, ge=1)
    delta_override: Optional[float] = Field(None, gt=0, lt=1)

    @field_validator("kappa")
    @classmethod
    def _kappa_range(cls, value: float) -> float:
        if not 0.0 < value <= 0.5:
            raise ValueError(f"kappa must satisfy κ ∈ (0, 1/2], got {value}")
        return value

    @field_validator("delta_prime")
    @classmethod
    def _delta_prime_range(cls, value: float) -> float:
        if not 0.0 < value < 1.0 / math.e:
            raise ValueError(f"delta_prime must satisfy δ′ ∈ (0, 1/e), got {value}")
        return value


class EnvironmentConfig(_StrictModel):
    """Generator settings for gap-controlled nested families."""

    num_clusters: int = Field(2, ge=2)
    duplication: int = Field(2, ge=1)
    levels: int = Field(3, ge=2)
    true_level: Optional[int] = Field(None, ge=1)
    num_actions: int = Field(2, ge=2)
    horizon: int = Field(3, ge=1)
    gap: float = Field(0.3, gt=0)
    action_influence: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _gap_below_half_horizon(self) -> "EnvironmentConfig":
        if self.gap >= self.horizon / 2:
            raise ValueError(f"gap must lie in (0, H/2) = (0, {self.horizon / 2})")
        if self.true_level is not None and self.true_level > self.levels:
            raise ValueError("true_level cannot exceed levels")
        return self


class LsviConfig(_StrictModel):
    """LSVI-UCB knobs and its nominal regret coefficient constant."""

    c_beta: float = Field(0.1, ge=0)
    c_r: float = Field(0.05, ge=0)
    reg_lambda: float = Field(1.0, gt=0)
    delta: float = Field(0.05, gt=0, lt=1)
    anytime: bool = False


class ScriptedConfig(_StrictModel):
    """Scripted slots: constant nominal coefficients and per-slot shortfalls."""

    nominals: List[float] = Field(default_factory=list)
    shortfalls: List[float] = Field(default_factory=lambda: [0.3, 0.0, 0.0])

    @field_validator("nominals", "shortfalls")
    @classmethod
    def _nonnegative(cls, values: List[float]) -> List[float]:
        if any(value < 0 for value in values):
            raise ValueError("entries must be nonnegative")
        return values


class GapVariantConfig(_StrictModel):
    """Gap estimator used by the forced-exploration variant."""

    estimator: Literal["oracle", "heuristic"] = "oracle"
    consistency_c: float = Field(2.0, gt=1)
    consistency_value: float = Field(0.5, ge=0)
    noise_mode: NoiseMode = "uniform"


class VhatRateOverride(_StrictModel):
    """Fields left unset fall back to the shared rates."""

    alpha: Optional[float] = Field(None, gt=0, lt=1)
    beta: Optional[float] = Field(None, gt=0, lt=1)
    v: Optional[float] = Field(None, ge=0)
    v_prime: Optional[float] = Field(None, ge=0)


class VhatConfig(_StrictModel):
    """Rates of the optimal-value estimator used by the estimated-V* variant.

    ``slot_overrides`` maps a 1-based slot index to its own rates.
    """

    alpha: float = Field(0.5, gt=0, lt=1)
    beta: float = Field(0.25, gt=0, lt=1)
    v: float = Field(0.0, ge=0)
    v_prime: float = Field(0.0, ge=0)
    noise_mode: NoiseMode = "uniform"
    slot_overrides: Dict[int, VhatRateOverride] = Field(default_factory=dict)


class SweepConfig(_StrictModel):
    """Grid of horizons, seeds and, optionally, misspecification gaps for a sweep.

    An empty ``gap_grid`` runs the configured environment as is. Otherwise every gap
    is applied in turn: it replaces ``environment.gap`` for generated families and
    every nonzero entry of ``scripted.shortfalls``. ``seed_count``, when set, replaces
    ``seeds`` with 0..seed_count−1.
    """

    T_grid: List[int] = Field(default_factory=lambda: [1000, 3000, 10000])
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    seed_count: Optional[int] = Field(None, ge=1)
    gap_grid: List[float] = Field(default_factory=list)
    baselines: bool = True

    @field_validator("T_grid", "seeds")
    @classmethod
    def _nonempty(cls, values: List[int]) -> List[int]:
        if not values:
            raise ValueError("grid must be nonempty")
        if any(value < 0 for value in values):
            raise ValueError("grid entries must be nonnegative")
        return values

    @field_validator("gap_grid")
    @classmethod
    def _positive_gaps(cls, values: List[float]) -> List[float]:
        if any(value <= 0 for value in values):
            raise ValueError("gap_grid entries must be positive")
        if len(set(values)) != len(values):
            raise ValueError("gap_grid entries must be distinct")
        return values

    @property
    def seed_list(self) -> List[int]:
        return list(range(self.seed_count)) if self.seed_count is not None else list(self.seeds)


class ExperimentConfig(_StrictModel):
    """Top-level configuration document."""

    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "ece-experiment"
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "INFO"
    seed: int = Field(0, ge=0)
    variant: Variant = "ece"
    scenario: Scenario = "scripted-gap"
    workers: Optional[int] = Field(None, ge=1)
    ece: EceConfig = Field(default_factory=EceConfig)
    environment: EnvironmentConfig = Field(default_factory=EnvironmentConfig)
    lsvi: LsviConfig = Field(default_factory=LsviConfig)
    scripted: ScriptedConfig = Field(default_factory=ScriptedConfig)
    gap: GapVariantConfig = Field(default_factory=GapVariantConfig)
    vhat: VhatConfig = Field(default_factory=VhatConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)


@dataclass
class ConfigOverrides:
    """CLI-provided overrides."""

    log_level: Optional[str] = None
    seed: Optional[int] = None
    variant: Optional[str] = None
    scenario: Optional[str] = None
    workers: Optional[int] = None
    horizon_T: Optional[int] = None
    kappa: Optional[float] = None

    def as_dict(self) -> Dict[str, Any]:
        """Convert overrides into nested dictionary structure."""
        data: Dict[str, Any] = {}
        if self.log_level is not None:
            data["log_level"] = self.log_level
        if self.seed is not None:
            data["seed"] = self.seed
        if self.variant is not None:
            data["variant"] = self.variant
        if self.scenario is not None:
            data["scenario"] = self.scenario
        if self.workers is not None:
            data["workers"] = self.workers

        ece: Dict[str, Any] = {}
        if self.horizon_T is not None:
            ece["horizon_T"] = self.horizon_T
        if self.kappa is not None:
            ece["kappa"] = self.kappa
        if ece:
            data["ece"] = ece

        return data


def load_config(
    path: Optional[Path] = None,
    overrides: Optional[ConfigOverrides] = None,
    env: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Load the experiment configuration from file + environment + overrides."""

    merged: Dict[str, Any] = {}
    if path is not None:
        merged = _deep_update(merged, _load_document(path))
    merged = _deep_update(merged, _load_from_env(os.environ if env is None else env))
    if overrides is not None:
        merged = _deep_update(merged, overrides.as_dict())

    try:
        config = ExperimentConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(_describe_validation_error(exc)) from exc

    _validate_config(config)
    return config


def resolve_document(config: ExperimentConfig) -> Dict[str, Any]:
    """Materialize every default into a JSON-ready document."""

    return config.model_dump(mode="json")


def _load_document(path: Path) -> Dict[str, Any]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config file '{path}': {exc}") from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object.")
    return document


def _load_from_env(env: Mapping[str, str]) -> Dict[str, Any]:
    """Read configuration values from environment variables."""

    data: Dict[str, Any] = {}

    level = env.get("ECE_LOG_LEVEL")
    if level:
        data["log_level"] = level.upper()
    if env.get("ECE_SEED"):
        data["seed"] = _to_int("ECE_SEED", env["ECE_SEED"])
    if env.get("ECE_VARIANT"):
        data["variant"] = env["ECE_VARIANT"].lower()
    if env.get("ECE_SCENARIO"):
        data["scenario"] = env["ECE_SCENARIO"].lower()
    if env.get("ECE_WORKERS"):
        data["workers"] = _to_int("ECE_WORKERS", env["ECE_WORKERS"])

    ece: Dict[str, Any] = {}
    for name, key in (
        ("ECE_KAPPA", "kappa"),
        ("ECE_DELTA_PRIME", "delta_prime"),
        ("ECE_C_W", "c_w"),
        ("ECE_C_MIN", "c_min"),
    ):
        if env.get(name):
            ece[key] = _to_float(name, env[name])
    if env.get("ECE_HORIZON_T"):
        ece["horizon_T"] = _to_int("ECE_HORIZON_T", env["ECE_HORIZON_T"])
    if ece:
        data["ece"] = ece

    if "ECE_SWEEP_BASELINES" in env:
        data["sweep"] = {"baselines": _to_bool(env["ECE_SWEEP_BASELINES"])}

    return data


def _to_int(name: str, value: str) -> int:
    try:
        return int(value.strip())
    except ValueError as exc:
        raise ConfigError(f"{name} must be an integer, got '{value}'.") from exc


def _to_float(name: str, value: str) -> float:
    try:
        return float(value.strip())
    except ValueError as exc:
        raise ConfigError(f"{name} must be a number, got '{value}'.") from exc


def _to_bool(value: str) -> bool:
    truthy = {"1", "true", "t", "yes", "y", "on"}
    falsy = {"0", "false", "f", "no", "n", "off"}
    lower = value.strip().lower()
    if lower in truthy:
        return True
    if lower in falsy:
        return False
    raise ConfigError(f"Cannot parse boolean value '{value}'.")


def _deep_update(base: MutableMapping[str, Any], updates: Mapping[str, Any]) -> Dict[str, Any]:
    result: Dict[str, Any] = dict(base)
    for key, value in updates.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            base_sub = base.get(key, {})
            if not isinstance(base_sub, Mapping):
                base_sub = {}
            result[key] = _deep_update(dict(base_sub), value)
        else:
            result[key] = value
    return result


def _describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error["loc"]) or "<root>"
        parts.append(f"{location}: {error['msg']}")
    return "; ".join(parts)


def _validate_config(config: ExperimentConfig) -> None:
    if config.scenario == "scripted-shortfall" and not config.scripted.shortfalls:
        raise ConfigError("scripted-shortfall scenario requires scripted.shortfalls.")
    if config.scenario == "scripted-shortfall" and min(config.scripted.shortfalls) > 0:
        raise ConfigError("scripted.shortfalls must contain a zero-shortfall slot.")
    if config.scripted.nominals:
        pairs = zip(config.scripted.nominals, config.scripted.nominals[1:])
        if any(left > right for left, right in pairs):
            raise ConfigError("scripted.nominals must be nondecreasing (slots ordered by regret).")
    _validate_gap_grid(config)


def _validate_gap_grid(config: ExperimentConfig) -> None:
    gaps = config.sweep.gap_grid
    if not gaps:
        return
    horizon = config.environment.horizon
    if config.scenario == "scripted-shortfall":
        if max(config.scripted.shortfalls) == 0:
            raise ConfigError("sweep.gap_grid needs a slot with a nonzero shortfall to resize.")
        if max(gaps) > horizon:
            raise ConfigError(f"sweep.gap_grid entries cannot exceed the horizon H={horizon}.")
    elif max(gaps) >= horizon / 2:
        raise ConfigError(f"sweep.gap_grid entries must lie in (0, H/2) = (0, {horizon / 2}).")
