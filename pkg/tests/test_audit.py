from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import pytest

from ece_select.audit import RecordAuditor, audit_record, validate_directory
from ece_select.config import ExperimentConfig
from ece_select.records import ROWS_FILE, EliminationEvent, RunRecord, write_record
from ece_select.scenarios import run_experiment


def _clean_record() -> RunRecord:
    config = ExperimentConfig(
        scenario="scripted-shortfall",
        ece={"kappa": 0.5, "horizon_T": 60},
        environment={"horizon": 2},
        scripted={"shortfalls": [0.5, 0.0]},
    )
    return run_experiment(config, run_seed=0)


def _checks(record: RunRecord) -> set:
    return {violation.check for violation in audit_record(record)}


class TestAuditRecord:
    """Hard invariant checks over a single record."""

    def test_clean_run_has_no_violations(self) -> None:
        """Test that a freshly produced record passes every check."""
        assert audit_record(_clean_record()) == []

    def test_flags_count_that_ignores_chosen_index(self) -> None:
        """Test that play counts must advance only the chosen slot."""
        record = _clean_record()
        row = record.rows[5]
        counts = list(row.play_counts)
        other = 1 if row.chosen_index == 2 else 2
        counts[row.chosen_index - 1] -= 1
        counts[other - 1] += 1
        record.rows[5] = dataclasses.replace(row, play_counts=tuple(counts))

        assert "data_isolation" in _checks(record)

    def test_flags_skipped_episode(self) -> None:
        """Test that episode indices must run 1..T without gaps."""
        record = _clean_record()
        record.rows[3] = dataclasses.replace(record.rows[3], t=99)

        checks = _checks(record)

        assert "episode_index" in checks
        assert "count_identity" in checks

    def test_flags_candidate_moving_backwards(self) -> None:
        """Test that the candidate index can never decrease."""
        record = _clean_record()
        last = record.rows[-1]
        record.rows[-2] = dataclasses.replace(record.rows[-2], candidate=last.candidate + 1)

        assert "candidate_monotone" in _checks(record)

    def test_flags_policy_value_above_v_star(self) -> None:
        """Test that policy values above V* are rejected."""
        record = _clean_record()
        record.rows[0] = dataclasses.replace(record.rows[0], policy_value=record.v_star + 1)

        assert "policy_value" in _checks(record)

    def test_flags_too_many_eliminations(self) -> None:
        """Test that at most L − 1 eliminations are accepted."""
        record = _clean_record()
        record.eliminations = [EliminationEvent(1, 1, (2,)), EliminationEvent(2, 2, (1,))]

        assert "elimination_count" in _checks(record)


class TestRecordAuditor:
    """Per-record reports combining audits and event statistics."""

    def test_report_includes_event_statistics(self) -> None:
        """Test that ECE reports carry the exploration-envelope counts."""
        report = RecordAuditor(_clean_record(), "run").report()

        assert report["ok"] is True
        assert report["arm"] == "ece"
        assert report["rows"] == 60
        assert "event_e1_violations" in report
        assert report["event_e3_stat"] == pytest.approx(0.0, abs=1e-12)

    def test_report_is_json_serializable(self) -> None:
        """Test that reports serialize with sorted keys."""
        report = RecordAuditor(_clean_record(), "run").report()

        assert json.loads(RecordAuditor.to_json(report))["label"] == "run"


class TestValidateDirectory:
    """Directory-wide validation."""

    def test_reports_all_records(self, tmp_path: Path) -> None:
        """Test that every record below the root is audited."""
        write_record(_clean_record(), tmp_path / "ece" / "a")
        write_record(_clean_record(), tmp_path / "ece" / "b")

        report = validate_directory(tmp_path)

        assert report["ok"] is True
        assert sorted(entry["label"] for entry in report["records"]) == ["ece/a", "ece/b"]
        assert report["event_e1_by_scenario"]["scripted-shortfall"]["records"] == 2

    def test_unreadable_record_fails_validation(self, tmp_path: Path) -> None:
        """Test that a truncated record is listed as unreadable."""
        write_record(_clean_record(), tmp_path / "good")
        write_record(_clean_record(), tmp_path / "bad")
        (tmp_path / "bad" / ROWS_FILE).write_text("", encoding="utf-8")

        report = validate_directory(tmp_path)

        assert report["ok"] is False
        assert len(report["records"]) == 1
        assert report["unreadable"][0]["path"].endswith("bad")
