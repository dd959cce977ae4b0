from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict

from typer.testing import CliRunner

from ece_select.cli import EXIT_CONFIG, EXIT_RUNTIME, app
from ece_select.records import HEADER_FILE, ROWS_FILE
from ece_select.version import __version__

runner = CliRunner()

SHORTFALL: Dict[str, Any] = {
    "scenario": "scripted-shortfall",
    "log_level": "WARNING",
    "ece": {"kappa": 0.5},
    "environment": {"horizon": 2},
    "scripted": {"shortfalls": [0.5, 0.0]},
    "sweep": {"T_grid": [20, 40, 80], "seeds": [0], "baselines": False},
}


def _config_file(tmp_path: Path, document: Dict[str, Any]) -> Path:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


def test_version_flag() -> None:
    result = runner.invoke(app, ["--version"])

    assert result.exit_code == 0
    assert __version__ in result.output


def test_run_writes_record_and_resolved_config(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    out = tmp_path / "run"

    result = runner.invoke(app, ["run", "--config", str(config), "--out", str(out), "-T", "50"])

    assert result.exit_code == 0, result.output
    assert (out / HEADER_FILE).is_file()
    assert len((out / ROWS_FILE).read_text(encoding="utf-8").splitlines()) == 50
    resolved = json.loads((out / "resolved_config.json").read_text(encoding="utf-8"))
    assert resolved["ece"]["horizon_T"] == 50
    assert resolved["ece"]["c_w"] == 1.0


def test_run_rejects_out_of_range_kappa(tmp_path: Path) -> None:
    config = _config_file(tmp_path, {**SHORTFALL, "ece": {"kappa": 0.7}})

    result = runner.invoke(app, ["run", "--config", str(config), "--out", str(tmp_path / "run")])

    assert result.exit_code == EXIT_CONFIG
    assert "κ ∈ (0, 1/2]" in " ".join(result.output.split())
    assert not (tmp_path / "run").exists()


def test_run_refuses_existing_artifacts_unless_forced(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    args = ["run", "--config", str(config), "--out", str(tmp_path / "run"), "-T", "10"]
    assert runner.invoke(app, args).exit_code == 0

    again = runner.invoke(app, args)
    forced = runner.invoke(app, [*args, "--force"])

    assert again.exit_code == EXIT_RUNTIME
    assert "artifacts exist" in again.output
    assert forced.exit_code == 0


def test_validate_reports_clean_record(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    out = tmp_path / "run"
    runner.invoke(app, ["run", "--config", str(config), "--out", str(out), "-T", "30"])
    report_path = tmp_path / "report.json"

    result = runner.invoke(app, ["validate", str(out), "--out", str(report_path)])

    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["ok"] is True
    assert report["records"][0]["violations"] == []


def test_validate_fails_on_truncated_rows(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    out = tmp_path / "run"
    runner.invoke(app, ["run", "--config", str(config), "--out", str(out), "-T", "30"])
    lines = (out / ROWS_FILE).read_text(encoding="utf-8").splitlines()
    (out / ROWS_FILE).write_text("\n".join(lines[:10]) + "\n", encoding="utf-8")

    result = runner.invoke(app, ["validate", str(out)])

    assert result.exit_code == EXIT_RUNTIME
    assert "expected 30 rows" in " ".join(result.output.split())


def test_sweep_then_analyze(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    sweep_out = tmp_path / "sweep"

    swept = runner.invoke(
        app, ["sweep", "--config", str(config), "--out", str(sweep_out), "--workers", "1"]
    )
    analyzed = runner.invoke(
        app, ["analyze", str(sweep_out / "records"), "--out", str(tmp_path / "analysis")]
    )

    assert swept.exit_code == 0, swept.output
    assert (sweep_out / "summary.json").is_file()
    assert (sweep_out / "records" / "ece" / "T80_s0" / HEADER_FILE).is_file()
    assert analyzed.exit_code == 0, analyzed.output
    assert (tmp_path / "analysis" / "slope_fits.csv").is_file()


def test_sweep_refuses_rerun_without_resume(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    args = ["sweep", "--config", str(config), "--out", str(tmp_path / "sweep"), "--workers", "1"]
    assert runner.invoke(app, args).exit_code == 0

    again = runner.invoke(app, args)
    resumed = runner.invoke(app, [*args, "--resume"])

    assert again.exit_code == EXIT_RUNTIME
    assert resumed.exit_code == 0


def test_analyze_empty_directory_fails(tmp_path: Path) -> None:
    result = runner.invoke(app, ["analyze", str(tmp_path), "--out", str(tmp_path / "analysis")])

    assert result.exit_code == EXIT_RUNTIME
    assert "no records" in result.output


def test_run_known_vstar_variant(tmp_path: Path) -> None:
    config = _config_file(tmp_path, SHORTFALL)
    out = tmp_path / "run"

    result = runner.invoke(
        app,
        ["run", "--config", str(config), "--out", str(out), "-T", "30"]
        + ["--variant", "ece-vstar-known"],
    )

    assert result.exit_code == 0, result.output
    header = json.loads((out / HEADER_FILE).read_text(encoding="utf-8"))
    assert header["variant"] == "ece-vstar-known"
    assert header["v_star"] == 2.0
