"""Regret accounting, scaling fits, event checks and seeded sweeps."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from rich.progress import Progress
from scipy import stats

from .config import EceConfig, ExperimentConfig, resolve_document
from .core import mix_seed
from .logging import log_context, setup_logging
from .meta_ece import burn_in, effective_delta, log_horizon
from .records import ArtifactsExistError, RunRecord, is_record_dir, read_record, write_record
from .scenarios import ARMS, Arm, apply_gap, run_experiment

logger = logging.getLogger(__name__)

AGGREGATES_FILE = "aggregates.csv"
SUMMARY_FILE = "summary.json"


class HarnessError(RuntimeError):
    """Raised when an analysis precondition does not hold."""


def cumulative_regret(record: RunRecord, benchmark: Optional[float] = None) -> np.ndarray:
    """Prefix sums of (benchmark − V^{π_t}) using exact policy values."""

    reference = record.v_star if benchmark is None else benchmark
    return np.cumsum(reference - record.policy_values())


@dataclass(frozen=True)
class ScalingFit:
    """Least-squares line through (ln x, ln y)."""

    points: Tuple[Tuple[float, float], ...]
    slope: float
    intercept: float
    r_squared: float

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["points"] = [list(point) for point in self.points]
        return payload


def fit_loglog_slope(points: Iterable[Tuple[float, float]]) -> ScalingFit:
    """Slope of ln y against ln x; (T, R) for regret scaling, (Δ, τ) for gap scaling."""

    kept: List[Tuple[float, float]] = []
    for x_value, y_value in points:
        if x_value <= 0 or y_value <= 0:
            logger.warning(
                "Dropping non-positive point (x=%s, y=%s) from log-log fit.", x_value, y_value
            )
            continue
        kept.append((float(x_value), float(y_value)))
    if len({x_value for x_value, _ in kept}) < 3:
        raise HarnessError("a log-log fit needs at least 3 distinct positive x values")

    x = np.log([x_value for x_value, _ in kept])
    y = np.log([y_value for _, y_value in kept])
    result = stats.linregress(x, y)
    r_squared = float(min(1.0, max(0.0, result.rvalue**2)))
    return ScalingFit(tuple(kept), float(result.slope), float(result.intercept), r_squared)


def true_slot_start(record: RunRecord) -> Optional[int]:
    """Episodes completed before the true slot became the candidate (τ_*)."""

    true_index = record.true_index
    if true_index is None:
        return None
    start = record.candidacy_start(true_index)
    return None if start is None else start - 1


def post_elimination_fit(record: RunRecord, max_points: int = 50) -> ScalingFit:
    """Fit R(τ_* + s) − R(τ_*) against s over the episodes after τ_*."""

    tau = true_slot_start(record)
    if tau is None:
        raise HarnessError("the true slot never became the candidate")
    regret = cumulative_regret(record)
    tail = regret[tau:] - (regret[tau - 1] if tau > 0 else 0.0)
    if tail.size < 3:
        raise HarnessError("fewer than 3 episodes follow the true slot's candidacy")
    offsets = np.unique(np.geomspace(1, tail.size, num=min(max_points, tail.size)).astype(np.int64))
    points = [(float(s), float(tail[s - 1])) for s in offsets if tail[s - 1] > 1e-9]
    return fit_loglog_slope(points)


def ece_config_of(record: RunRecord) -> EceConfig:
    """The EceConfig a record ran with, synced to its slot count and horizon."""

    document = record.resolved_config.get("ece", {})
    config = EceConfig.model_validate(document) if document else EceConfig()
    return config.model_copy(update={"L": record.num_slots, "H": record.horizon})


def record_delta(config: EceConfig) -> float:
    if config.delta_override:
        return config.delta_override
    return effective_delta(config.delta_prime, config.L, log_horizon(config))


def play_count_matrix(record: RunRecord) -> np.ndarray:
    """|𝒯^i_t| with shape (T, L), rebuilt from chosen indices."""

    counts = np.zeros((len(record.rows), record.num_slots), dtype=np.int64)
    if record.rows:
        chosen = record.chosen_indices() - 1
        counts[np.arange(len(chosen)), chosen] = 1
        counts = np.cumsum(counts, axis=0)
    return counts


@dataclass(frozen=True)
class EventViolation:
    slot: int
    t: int
    count: int
    bound: float
    side: str


def verify_event_e1(record: RunRecord, config: Optional[EceConfig] = None) -> List[EventViolation]:
    """Play-count envelope: t^{1−κ}/(8L) ≤ n_i ≤ 4t^{1−κ} before i becomes the candidate,
    n_i ≤ t − τ_i + 4t^{1−κ} afterwards.
    """

    config = config or ece_config_of(record)
    config = config.model_copy(update={"L": record.num_slots})
    tau_min = burn_in(record_delta(config), config.L, config.kappa, config.c_min)
    counts = play_count_matrix(record)
    total = len(record.rows)
    violations: List[EventViolation] = []
    for slot in range(1, record.num_slots + 1):
        # Slots that never became the candidate stay under the exploration envelope.
        tau_i = record.candidacy_start(slot) or total + 1
        for t in range(max(tau_min, 1), total + 1):
            n = int(counts[t - 1, slot - 1])
            scale = t ** (1.0 - config.kappa)
            if t < tau_i:
                lower, upper = scale / (8 * config.L), 4 * scale
                if n < lower:
                    violations.append(EventViolation(slot, t, n, lower, "lower"))
                elif n > upper:
                    violations.append(EventViolation(slot, t, n, upper, "upper"))
            else:
                upper = t - tau_i + 4 * scale
                if n > upper:
                    violations.append(EventViolation(slot, t, n, upper, "upper"))
    return violations


def verify_event_e3(record: RunRecord, delta: Optional[float] = None) -> float:
    """max over (j, t) of |Σ ε| / (H·√(2·n_j·ln(2/δ))); at most 1 when the event held."""

    if not record.rows:
        return 0.0
    if delta is None:
        delta = record_delta(ece_config_of(record))
    log_term = math.log(2.0 / delta)
    chosen = record.chosen_indices()
    noise = record.returns() - record.policy_values()
    worst = 0.0
    for slot in range(1, record.num_slots + 1):
        mask = chosen == slot
        if not mask.any():
            continue
        sums = np.cumsum(noise[mask])
        n = np.arange(1, sums.size + 1)
        ratio = np.abs(sums) / (record.horizon * np.sqrt(2.0 * n * log_term))
        worst = max(worst, float(ratio.max()))
    return worst


@dataclass(frozen=True)
class SweepCell:
    arm: Arm
    horizon_T: int
    seed: int
    run_seed: int
    directory: str
    gap: Optional[float] = None


@dataclass
class CellResult:
    arm: str
    horizon_T: int
    seed: int
    status: str
    final_regret: float = float("nan")
    final_candidate: int = 0
    elimination_times: List[int] = field(default_factory=list)
    event_e1_violations: int = 0
    event_e3_stat: float = float("nan")
    error: str = ""
    gap: Optional[float] = None
    true_slot_rejected: bool = False
    post_elimination_slope: float = float("nan")


def summarize_record(record: RunRecord, cell: SweepCell) -> CellResult:
    regret = cumulative_regret(record)
    true_index = record.true_index
    try:
        post_slope = post_elimination_fit(record).slope
    except HarnessError:
        post_slope = float("nan")
    return CellResult(
        arm=cell.arm,
        horizon_T=cell.horizon_T,
        seed=cell.seed,
        status="ok",
        final_regret=float(regret[-1]) if regret.size else 0.0,
        final_candidate=record.final_candidate,
        elimination_times=[event.t for event in record.eliminations],
        event_e1_violations=(
            len(verify_event_e1(record)) if cell.arm == "ece" and record.variant == "ece" else 0
        ),
        event_e3_stat=verify_event_e3(record),
        gap=cell.gap,
        true_slot_rejected=(
            true_index is not None and record.elimination_time(true_index) is not None
        ),
        post_elimination_slope=post_slope,
    )


def _cell_name(horizon_T: int, seed: int, gap: Optional[float]) -> str:
    name = f"T{horizon_T}_s{seed}"
    return name if gap is None else f"g{gap:g}_{name}"


def sweep_cells(config: ExperimentConfig, out_dir: Path) -> List[SweepCell]:
    arms: List[Arm] = list(ARMS) if config.sweep.baselines else ["ece"]
    gaps: List[Optional[float]] = list(config.sweep.gap_grid) or [None]
    cells: List[SweepCell] = []
    for arm in arms:
        for gap in gaps:
            for horizon_T in config.sweep.T_grid:
                for seed in config.sweep.seed_list:
                    name = _cell_name(horizon_T, seed, gap)
                    cells.append(
                        SweepCell(
                            arm=arm,
                            horizon_T=horizon_T,
                            seed=seed,
                            run_seed=mix_seed(config.seed, horizon_T, seed),
                            directory=str(Path(out_dir) / "records" / arm / name),
                            gap=gap,
                        )
                    )
    return cells


def _run_cell(document: Dict[str, Any], cell: SweepCell, force: bool) -> CellResult:
    try:
        config = ExperimentConfig.model_validate(document)
        if cell.gap is not None:
            config = apply_gap(config, cell.gap)
        config = config.model_copy(
            update={"ece": config.ece.model_copy(update={"horizon_T": cell.horizon_T})}
        )
        with log_context(arm=cell.arm, seed=cell.run_seed, horizon_T=cell.horizon_T):
            record = run_experiment(config, arm=cell.arm, run_seed=cell.run_seed)
        write_record(record, Path(cell.directory), force=force)
        return summarize_record(record, cell)
    except Exception as exc:  # sweep continues past failed cells
        error = f"{type(exc).__name__}: {exc}"
        return CellResult(
            cell.arm, cell.horizon_T, cell.seed, status="failed", error=error, gap=cell.gap
        )


def run_sweep(
    config: ExperimentConfig,
    out_dir: Path,
    *,
    workers: Optional[int] = None,
    resume: bool = False,
    force: bool = False,
    show_progress: bool = True,
) -> Dict[str, Any]:
    """Run every (arm, T, seed) cell, persist records and write the aggregates."""

    out_dir = Path(out_dir)
    cells = sweep_cells(config, out_dir)
    if not resume and not force:
        existing = [cell.directory for cell in cells if is_record_dir(Path(cell.directory))]
        if existing:
            raise ArtifactsExistError(
                f"artifacts exist in '{out_dir}' ({len(existing)} records); use --resume or --force"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    document = resolve_document(config)

    results: List[CellResult] = []
    pending: List[SweepCell] = []
    for cell in cells:
        if resume and is_record_dir(Path(cell.directory)):
            results.append(summarize_record(read_record(Path(cell.directory)), cell))
        else:
            pending.append(cell)
    if resume:
        logger.info("Resuming sweep: %d cells done, %d pending.", len(results), len(pending))

    max_workers = workers or config.workers or os.cpu_count() or 1
    with Progress(disable=not show_progress) as progress:
        task = progress.add_task("sweep", total=len(pending))
        if max_workers == 1 or len(pending) <= 1:
            for cell in pending:
                results.append(_run_cell(document, cell, force))
                progress.advance(task)
        else:
            with ProcessPoolExecutor(
                max_workers=max_workers, initializer=setup_logging, initargs=(config.log_level,)
            ) as pool:
                futures = [pool.submit(_run_cell, document, cell, force) for cell in pending]
                for future in as_completed(futures):
                    results.append(future.result())
                    progress.advance(task)

    for result in results:
        if result.status != "ok":
            logger.warning(
                "Sweep cell %s gap=%s T=%d seed=%d failed: %s",
                result.arm,
                result.gap,
                result.horizon_T,
                result.seed,
                result.error,
            )

    frame = results_frame(results, config.scenario)
    frame.to_csv(out_dir / AGGREGATES_FILE, index=False)
    summary = summarize_frame(frame, config)
    (out_dir / SUMMARY_FILE).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return summary


RESULT_COLUMNS = [
    "scenario",
    "arm",
    "gap",
    "horizon_T",
    "seed",
    "status",
    "final_regret",
    "final_candidate",
    "elimination_times",
    "true_slot_rejected",
    "post_elimination_slope",
    "event_e1_violations",
    "event_e3_stat",
    "error",
]


def results_frame(results: Sequence[CellResult], scenario: str) -> pd.DataFrame:
    """One row per cell, sorted so seed order never changes the output."""

    rows = []
    for result in results:
        payload = asdict(result)
        payload["elimination_times"] = json.dumps(result.elimination_times)
        payload["gap"] = float("nan") if result.gap is None else float(result.gap)
        payload["scenario"] = scenario
        rows.append(payload)
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    return frame.sort_values(
        ["arm", "gap", "horizon_T", "seed"], kind="mergesort"
    ).reset_index(drop=True)


def _first_eliminations(cells: pd.DataFrame) -> List[int]:
    parsed = (json.loads(text) for text in cells["elimination_times"])
    return [times[0] for times in parsed if times]


def _median_or_none(values: Sequence[float]) -> Optional[float]:
    finite = [value for value in values if not math.isnan(value)]
    return float(np.median(finite)) if finite else None


def _horizon_block(cells: pd.DataFrame) -> Dict[str, Any]:
    regrets = cells["final_regret"].to_numpy(dtype=float)
    first_eliminations = _first_eliminations(cells)
    return {
        "runs": int(regrets.size),
        "mean": float(regrets.mean()),
        "q10": float(np.quantile(regrets, 0.1)),
        "median": float(np.quantile(regrets, 0.5)),
        "q90": float(np.quantile(regrets, 0.9)),
        "first_elimination_median": (
            float(np.median(first_eliminations)) if first_eliminations else None
        ),
        "true_slot_rejection_rate": float(cells["true_slot_rejected"].astype(bool).mean()),
        "post_elimination_slope_median": _median_or_none(
            cells["post_elimination_slope"].astype(float).tolist()
        ),
        "event_e3_exceedance_rate": float((cells["event_e3_stat"] > 1.0).mean()),
        "event_e1_violation_rate": float((cells["event_e1_violations"] > 0).mean()),
    }


def _gap_scaling(group: pd.DataFrame) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Per-gap elimination medians of one arm and the (Δ, median τ) log-log fit."""

    by_gap: Dict[str, Any] = {}
    points: List[Tuple[float, float]] = []
    for gap, cells in group.groupby("gap", sort=True):
        first_eliminations = _first_eliminations(cells)
        median_tau = float(np.median(first_eliminations)) if first_eliminations else None
        by_gap[f"{gap:g}"] = {
            "runs": int(len(cells)),
            "eliminated_runs": len(first_eliminations),
            "first_elimination_median": median_tau,
            "post_elimination_slope_median": _median_or_none(
                cells["post_elimination_slope"].astype(float).tolist()
            ),
            "final_regret_median": float(cells["final_regret"].median()),
        }
        if median_tau is not None:
            points.append((float(gap), median_tau))
    try:
        fit: Dict[str, Any] = fit_loglog_slope(points).to_dict()
    except HarnessError as exc:
        fit = {"error": str(exc)}
    return by_gap, fit


def summarize_frame(frame: pd.DataFrame, config: ExperimentConfig) -> Dict[str, Any]:
    """Per-arm regret statistics and fits; per-horizon blocks pool the gap grid."""

    ok = frame[frame["status"] == "ok"]
    per_arm: Dict[str, Any] = {}
    fits: Dict[str, Any] = {}
    gaps: Dict[str, Any] = {}
    gap_fits: Dict[str, Any] = {}
    for arm, group in ok.groupby("arm", sort=True):
        by_horizon: Dict[str, Any] = {}
        means: List[Tuple[float, float]] = []
        for horizon_T, cells in group.groupby("horizon_T", sort=True):
            block = _horizon_block(cells)
            by_horizon[str(horizon_T)] = block
            means.append((float(horizon_T), block["mean"]))
        per_arm[str(arm)] = by_horizon
        try:
            fits[str(arm)] = fit_loglog_slope(means).to_dict()
        except HarnessError as exc:
            fits[str(arm)] = {"error": str(exc)}
        if config.sweep.gap_grid:
            gaps[str(arm)], gap_fits[str(arm)] = _gap_scaling(group)
    summary: Dict[str, Any] = {
        "schema_version": 1,
        "scenario": config.scenario,
        "variant": config.variant,
        "cells": int(len(frame)),
        "failed": int((frame["status"] != "ok").sum()),
        "arms": per_arm,
        "fits": fits,
        "resolved_config": resolve_document(config),
    }
    if config.sweep.gap_grid:
        summary["gaps"] = gaps
        summary["gap_fits"] = gap_fits
    return summary


def iter_record_dirs(root: Path) -> List[Path]:
    root = Path(root)
    if is_record_dir(root):
        return [root]
    return sorted(path.parent for path in root.rglob("header.json"))


def regret_curve_frame(record: RunRecord, label: str, max_points: int = 200) -> pd.DataFrame:
    """Cumulative regret at log-spaced episodes (always including the last)."""

    regret = cumulative_regret(record)
    if regret.size == 0:
        return pd.DataFrame(columns=["run", "t", "cumulative_regret"])
    points = np.geomspace(1, regret.size, num=min(max_points, regret.size))
    grid = np.unique(points.astype(np.int64))
    return pd.DataFrame({"run": label, "t": grid, "cumulative_regret": regret[grid - 1]})


def analyze_records(root: Path, out_dir: Path) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Write regret_curves.csv and slope_fits.csv from persisted records."""

    curves: List[pd.DataFrame] = []
    finals: List[Dict[str, Any]] = []
    for directory in iter_record_dirs(root):
        record = read_record(directory)
        label = str(directory.relative_to(root)) if directory != Path(root) else directory.name
        curves.append(regret_curve_frame(record, label))
        run = record.resolved_config.get("run", {})
        regret = cumulative_regret(record)
        finals.append(
            {
                "arm": run.get("arm", "ece"),
                "horizon_T": int(run.get("horizon_T", len(record.rows))),
                "final_regret": float(regret[-1]) if regret.size else 0.0,
            }
        )
    if not finals:
        raise HarnessError(f"no records found under '{root}'")

    curve_frame = pd.concat(curves, ignore_index=True)
    finals_frame = pd.DataFrame(finals)
    fit_rows = []
    for arm, group in finals_frame.groupby("arm", sort=True):
        means = group.groupby("horizon_T")["final_regret"].mean()
        row: Dict[str, Any] = {"arm": arm, "num_T": int(means.size)}
        try:
            fit = fit_loglog_slope(zip(means.index.tolist(), means.tolist()))
            row.update(slope=fit.slope, intercept=fit.intercept, r_squared=fit.r_squared, error="")
        except HarnessError as exc:
            row.update(slope=np.nan, intercept=np.nan, r_squared=np.nan, error=str(exc))
        fit_rows.append(row)
    fit_frame = pd.DataFrame(
        fit_rows, columns=["arm", "num_T", "slope", "intercept", "r_squared", "error"]
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_frame.to_csv(out_dir / "regret_curves.csv", index=False)
    fit_frame.to_csv(out_dir / "slope_fits.csv", index=False)
    return curve_frame, fit_frame
