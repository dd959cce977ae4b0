"""Invariant audits over persisted run records."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

from .harness import iter_record_dirs, verify_event_e1, verify_event_e3
from .records import RecordError, RunRecord, read_record

logger = logging.getLogger(__name__)

TOLERANCE = 1e-9


@dataclass(frozen=True)
class AuditViolation:
    check: str
    row: Optional[int]
    message: str


def audit_record(record: RunRecord) -> List[AuditViolation]:
    """Hard invariant checks; ``row`` is the 0-based row index when applicable."""

    violations: List[AuditViolation] = []
    num_slots = record.num_slots
    previous_counts = [0] * num_slots
    previous_candidate = 1

    for index, row in enumerate(record.rows):
        if row.t != index + 1:
            violations.append(
                AuditViolation("episode_index", index, f"expected t={index + 1}, found {row.t}")
            )
        if not 1 <= row.chosen_index <= num_slots:
            violations.append(
                AuditViolation(
                    "chosen_index",
                    index,
                    f"chosen index {row.chosen_index} outside 1..{num_slots}",
                )
            )
            continue
        if not -TOLERANCE <= row.policy_value <= record.v_star + TOLERANCE:
            violations.append(
                AuditViolation(
                    "policy_value",
                    index,
                    f"policy value {row.policy_value:.12g} outside [0, V*={record.v_star:.12g}]",
                )
            )
        if abs(row.return_noise) > record.horizon + TOLERANCE:
            violations.append(
                AuditViolation(
                    "return_noise", index, f"|g − V^π| = {abs(row.return_noise):.6g} exceeds H"
                )
            )
        if row.candidate < previous_candidate:
            violations.append(
                AuditViolation(
                    "candidate_monotone",
                    index,
                    f"candidate decreased from {previous_candidate} to {row.candidate}",
                )
            )
        previous_candidate = row.candidate

        counts = list(row.play_counts)
        if len(counts) != num_slots:
            violations.append(
                AuditViolation(
                    "play_counts", index, f"expected {num_slots} counts, found {len(counts)}"
                )
            )
            continue
        if sum(counts) != row.t:
            violations.append(
                AuditViolation("count_identity", index, f"Σ n_i = {sum(counts)} but t = {row.t}")
            )
        expected = list(previous_counts)
        expected[row.chosen_index - 1] += 1
        if counts != expected:
            violations.append(
                AuditViolation(
                    "data_isolation",
                    index,
                    f"play counts {counts} do not match chosen index {row.chosen_index}",
                )
            )
        previous_counts = counts

    if len(record.eliminations) > max(0, num_slots - 1):
        violations.append(
            AuditViolation(
                "elimination_count",
                None,
                f"{len(record.eliminations)} eliminations exceed L−1 = {num_slots - 1}",
            )
        )
    for event in record.eliminations:
        if not 1 <= event.t <= len(record.rows):
            violations.append(
                AuditViolation(
                    "elimination_event", None, f"elimination at t={event.t} outside the run"
                )
            )
            continue
        row = record.rows[event.t - 1]
        if row.candidate != event.old_candidate:
            violations.append(
                AuditViolation(
                    "elimination_event",
                    event.t - 1,
                    f"elimination of {event.old_candidate} recorded while "
                    f"candidate was {row.candidate}",
                )
            )
    return violations


@dataclass
class RecordAuditor:
    """Combines hard invariant audits with event statistics for one record."""

    record: RunRecord
    label: str

    def report(self) -> Dict[str, Any]:
        violations = audit_record(self.record)
        run = self.record.resolved_config.get("run", {})
        report: Dict[str, Any] = {
            "label": self.label,
            "scenario": self.record.resolved_config.get("scenario"),
            "variant": self.record.variant,
            "arm": run.get("arm", "ece"),
            "rows": len(self.record.rows),
            "violations": [asdict(violation) for violation in violations],
            "ok": not violations,
        }
        if self.record.variant == "ece" and self.record.num_slots > 1:
            e1 = verify_event_e1(self.record)
            report["event_e1_violations"] = len(e1)
            report["event_e1_first"] = asdict(e1[0]) if e1 else None
        report["event_e3_stat"] = verify_event_e3(self.record)
        return report

    @staticmethod
    def to_json(report: Dict[str, Any]) -> str:
        return json.dumps(report, indent=2, sort_keys=True)


def validate_directory(root: Path) -> Dict[str, Any]:
    """Audit every record under ``root``; unreadable records are listed, not raised."""

    root = Path(root)
    reports: List[Dict[str, Any]] = []
    unreadable: List[Dict[str, str]] = []
    for directory in iter_record_dirs(root):
        try:
            record = read_record(directory)
        except RecordError as exc:
            logger.warning("Unreadable record %s: %s", directory, exc)
            unreadable.append({"path": str(directory), "error": str(exc)})
            continue
        label = str(directory.relative_to(root)) if directory != root else directory.name
        reports.append(RecordAuditor(record, label).report())

    per_scenario: Dict[str, Dict[str, Any]] = {}
    for report in reports:
        if "event_e1_violations" not in report:
            continue
        entry = per_scenario.setdefault(
            str(report["scenario"]), {"records": 0, "with_violations": 0}
        )
        entry["records"] += 1
        entry["with_violations"] += int(report["event_e1_violations"] > 0)
    for entry in per_scenario.values():
        entry["event_e1_violation_rate"] = entry["with_violations"] / entry["records"]

    return {
        "schema_version": 1,
        "records": reports,
        "unreadable": unreadable,
        "event_e1_by_scenario": per_scenario,
        "ok": not unreadable and all(report["ok"] for report in reports),
    }
