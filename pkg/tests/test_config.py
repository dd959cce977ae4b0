from __future__ import annotations

import json
from pathlib import Path

import pytest

from ece_select.config import (
    ConfigError,
    ConfigOverrides,
    ExperimentConfig,
    load_config,
    resolve_document,
)


def _write(tmp_path: Path, document: object, name: str = "config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


def test_defaults_load_without_file() -> None:
    config = load_config(env={})

    assert config.variant == "ece"
    assert config.scenario == "scripted-gap"
    assert config.ece.kappa == pytest.approx(1 / 3)
    assert config.schema_version == 1


def test_file_env_and_overrides_merge_in_order(tmp_path: Path) -> None:
    path = _write(tmp_path, {"seed": 1, "ece": {"horizon_T": 50, "c_w": 2.0}})
    env = {"ECE_SEED": "2", "ECE_C_W": "3.5", "ECE_VARIANT": "ECE-GAP"}

    config = load_config(path, overrides=ConfigOverrides(seed=9), env=env)

    assert config.seed == 9
    assert config.variant == "ece-gap"
    assert config.ece.c_w == 3.5
    assert config.ece.horizon_T == 50


def test_kappa_out_of_range_names_constraint(tmp_path: Path) -> None:
    path = _write(tmp_path, {"ece": {"kappa": 0.7}})

    with pytest.raises(ConfigError, match=r"ece\.kappa.*κ ∈ \(0, 1/2\]"):
        load_config(path, env={})


def test_delta_prime_must_stay_below_inverse_e() -> None:
    with pytest.raises(ConfigError, match="delta_prime"):
        load_config(overrides=None, env={"ECE_DELTA_PRIME": "0.5"})


def test_unknown_field_is_rejected(tmp_path: Path) -> None:
    path = _write(tmp_path, {"ece": {"c_ww": 1.0}})

    with pytest.raises(ConfigError, match="ece.c_ww"):
        load_config(path, env={})


def test_json_syntax_error_reports_line_and_column(tmp_path: Path) -> None:
    path = tmp_path / "broken.json"
    path.write_text('{\n  "seed": 1,\n  "ece": {,}\n}', encoding="utf-8")

    with pytest.raises(ConfigError, match="line 3 column"):
        load_config(path, env={})


def test_bad_env_integer_is_reported() -> None:
    with pytest.raises(ConfigError, match="ECE_SEED must be an integer"):
        load_config(env={"ECE_SEED": "abc"})


def test_gap_must_be_below_half_horizon(tmp_path: Path) -> None:
    path = _write(tmp_path, {"environment": {"horizon": 1, "gap": 0.6}})

    with pytest.raises(ConfigError, match="H/2"):
        load_config(path, env={})


def test_shortfall_scenario_needs_zero_shortfall(tmp_path: Path) -> None:
    document = {"scenario": "scripted-shortfall", "scripted": {"shortfalls": [0.2, 0.1]}}
    path = _write(tmp_path, document)

    with pytest.raises(ConfigError, match="zero-shortfall"):
        load_config(path, env={})


def test_nominals_must_be_ordered(tmp_path: Path) -> None:
    path = _write(tmp_path, {"scripted": {"nominals": [2.0, 1.0, 3.0]}})

    with pytest.raises(ConfigError, match="nondecreasing"):
        load_config(path, env={})


def test_sweep_baselines_env_flag() -> None:
    config = load_config(env={"ECE_SWEEP_BASELINES": "no"})

    assert config.sweep.baselines is False


def test_resolved_document_round_trips() -> None:
    config = load_config(overrides=ConfigOverrides(kappa=0.5, horizon_T=20), env={})

    document = resolve_document(config)

    assert document["ece"]["kappa"] == 0.5
    assert ExperimentConfig.model_validate(document) == config


def test_gap_grid_is_checked_against_the_horizon(tmp_path: Path) -> None:
    document = {"environment": {"horizon": 2}, "sweep": {"gap_grid": [0.2, 0.5, 1.0]}}
    path = _write(tmp_path, document)

    with pytest.raises(ConfigError, match="gap_grid"):
        load_config(path, env={})


def test_gap_grid_rejects_non_positive_entries(tmp_path: Path) -> None:
    path = _write(tmp_path, {"sweep": {"gap_grid": [0.1, 0.0]}})

    with pytest.raises(ConfigError, match="positive"):
        load_config(path, env={})


def test_gap_grid_for_shortfall_scenario(tmp_path: Path) -> None:
    document = {
        "scenario": "scripted-shortfall",
        "environment": {"horizon": 2},
        "scripted": {"shortfalls": [0.3, 0.0]},
        "sweep": {"gap_grid": [0.2, 0.8, 1.6]},
    }

    config = load_config(_write(tmp_path, document), env={})

    assert config.sweep.gap_grid == [0.2, 0.8, 1.6]


EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


@pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.json")), ids=lambda path: path.stem)
def test_shipped_experiment_configs_load(path: Path) -> None:
    config = load_config(path, env={})

    assert config.sweep.seed_list


def test_shipped_experiments_variants() -> None:
    variants = {load_config(path, env={}).variant for path in EXPERIMENTS.glob("*.json")}

    assert variants == {"ece", "ece-gap", "ece-vstar-known"}
