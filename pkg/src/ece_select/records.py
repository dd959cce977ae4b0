"""Run records produced by the meta-algorithms and their on-disk format.

A persisted record is a directory holding ``header.json`` (resolved config,
benchmarks, eliminations) and ``rows.ndjson`` (one JSON object per episode).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

HEADER_FILE = "header.json"
ROWS_FILE = "rows.ndjson"


class RecordError(RuntimeError):
    """Raised when a persisted record cannot be read or written."""


class ArtifactsExistError(RecordError):
    """Raised when a record directory is already populated."""


@dataclass(frozen=True)
class RunRecordRow:
    """One episode of a meta-algorithm run; ``play_counts`` is taken after the step."""

    t: int
    chosen_index: int
    explored: bool
    g: float
    policy_value: float
    candidate: int
    b_set_size: int
    play_counts: Tuple[int, ...]

    @property
    def return_noise(self) -> float:
        """ε_t = g_t − V^{π_t}."""
        return self.g - self.policy_value

    def to_json(self) -> str:
        payload = asdict(self)
        payload["play_counts"] = list(self.play_counts)
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_mapping(cls, data: Dict[str, Any]) -> "RunRecordRow":
        return cls(
            t=int(data["t"]),
            chosen_index=int(data["chosen_index"]),
            explored=bool(data["explored"]),
            g=float(data["g"]),
            policy_value=float(data["policy_value"]),
            candidate=int(data["candidate"]),
            b_set_size=int(data["b_set_size"]),
            play_counts=tuple(int(count) for count in data["play_counts"]),
        )


@dataclass(frozen=True)
class EliminationEvent:
    t: int
    old_candidate: int
    witnesses: Tuple[int, ...]


@dataclass
class RunRecord:
    """Every episode of one run plus the benchmarks needed to score it."""

    variant: str
    horizon: int
    num_slots: int
    v_star: float
    per_level_values: Tuple[float, ...] = ()
    resolved_config: Dict[str, Any] = field(default_factory=dict)
    labels: Tuple[str, ...] = ()
    rows: List[RunRecordRow] = field(default_factory=list)
    eliminations: List[EliminationEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def final_candidate(self) -> int:
        """Candidate after the last episode, counting an elimination on that episode."""
        return 1 + len(self.eliminations)

    @property
    def true_index(self) -> Optional[int]:
        """First slot whose best-in-class value attains V*, if the record carries them."""
        for index, value in enumerate(self.per_level_values, start=1):
            if value >= self.v_star - 1e-6:
                return index
        return None

    def policy_values(self) -> np.ndarray:
        return np.array([row.policy_value for row in self.rows], dtype=float)

    def returns(self) -> np.ndarray:
        return np.array([row.g for row in self.rows], dtype=float)

    def chosen_indices(self) -> np.ndarray:
        return np.array([row.chosen_index for row in self.rows], dtype=np.int64)

    def elimination_time(self, old_candidate: int) -> Optional[int]:
        """Episode at which ``old_candidate`` was rejected, if ever."""
        for event in self.eliminations:
            if event.old_candidate == old_candidate:
                return event.t
        return None

    def candidacy_start(self, index: int) -> Optional[int]:
        """First episode at which ``index`` was the candidate (τ_i)."""
        if index == 1:
            return 1 if self.rows else None
        for event in self.eliminations:
            if event.old_candidate == index - 1:
                return event.t + 1
        return None


class _EliminationModel(BaseModel):
    t: int
    old_candidate: int
    witnesses: List[int]


class RecordHeader(BaseModel):
    """JSON header of a persisted record."""

    schema_version: Literal[1] = 1
    variant: str
    horizon: int
    num_slots: int
    v_star: float
    per_level_values: List[float]
    labels: List[str]
    resolved_config: Dict[str, Any]
    eliminations: List[_EliminationModel]
    num_rows: int


def write_record(record: RunRecord, directory: Path, *, force: bool = False) -> Path:
    """Persist ``record`` under ``directory``; refuses to overwrite unless ``force``."""

    directory = Path(directory)
    header_path = directory / HEADER_FILE
    if header_path.exists() and not force:
        raise ArtifactsExistError(f"artifacts exist in '{directory}' (use --force to overwrite)")
    directory.mkdir(parents=True, exist_ok=True)

    header = RecordHeader(
        variant=record.variant,
        horizon=record.horizon,
        num_slots=record.num_slots,
        v_star=record.v_star,
        per_level_values=list(record.per_level_values),
        labels=list(record.labels),
        resolved_config=record.resolved_config,
        eliminations=[
            _EliminationModel(t=e.t, old_candidate=e.old_candidate, witnesses=list(e.witnesses))
            for e in record.eliminations
        ],
        num_rows=len(record.rows),
    )
    with (directory / ROWS_FILE).open("w", encoding="utf-8") as handle:
        for row in record.rows:
            handle.write(row.to_json())
            handle.write("\n")
    header_path.write_text(
        json.dumps(header.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return directory


def read_record(directory: Path) -> RunRecord:
    directory = Path(directory)
    header_path = directory / HEADER_FILE
    rows_path = directory / ROWS_FILE
    try:
        header_text = header_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RecordError(f"Cannot read '{header_path}': {exc}") from exc
    try:
        header = RecordHeader.model_validate_json(header_text)
    except ValidationError as exc:
        raise RecordError(f"{header_path}: malformed header: {exc.errors()[0]['msg']}") from exc

    rows: List[RunRecordRow] = []
    try:
        lines = rows_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise RecordError(f"Cannot read '{rows_path}': {exc}") from exc
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(RunRecordRow.from_mapping(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{rows_path}:{number}: malformed row: {exc}") from exc
    if len(rows) != header.num_rows:
        raise RecordError(
            f"{rows_path}: expected {header.num_rows} rows, found {len(rows)}"
        )

    return RunRecord(
        variant=header.variant,
        horizon=header.horizon,
        num_slots=header.num_slots,
        v_star=header.v_star,
        per_level_values=tuple(header.per_level_values),
        resolved_config=header.resolved_config,
        labels=tuple(header.labels),
        rows=rows,
        eliminations=[
            EliminationEvent(e.t, e.old_candidate, tuple(e.witnesses)) for e in header.eliminations
        ],
    )


def is_record_dir(directory: Path) -> bool:
    return (Path(directory) / HEADER_FILE).is_file()
