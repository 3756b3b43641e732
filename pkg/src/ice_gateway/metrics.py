"""Offline accounting: parameter sweeps and transcript replay, written as CSV."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from ice_gateway.errors import IceError
from ice_gateway.scheduler import (
    BoundUndefined,
    RatioReport,
    asymptotic_q,
    effective_s_ice,
    guaranteed_lower_bound,
    ice_overhead,
    predicted_ratio,
    ratio_report,
)
from ice_gateway.tokenizer import TokenCounter
from ice_gateway.transcript import CONTROL_KINDS, SegmentKind, parse_jsonl

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ("t", "s_ice", "feasible", "asymptotic_q", "overhead_at_l_max",
                 "lower_bound_at_l_max", "baseline_ratio")
TRAJECTORY_COLUMNS = ("l", "measured_ratio", "predicted_ratio", "lower_bound")


class EmptySpec(IceError):
    pass


def _num(x: Fraction | None) -> str:
    return "" if x is None else repr(float(x))


@dataclass(frozen=True)
class SweepSpec:
    t_values: Sequence[int]
    s_ice_values: Sequence[int]
    s_p: int = 0
    l_max: int = 100_000

    def __post_init__(self) -> None:
        if any(t < 1 for t in self.t_values) or any(s < 0 for s in self.s_ice_values):
            raise ValueError("t values must be positive and s_ice values nonnegative")
        if self.s_p < 0 or self.l_max < 1:
            raise ValueError("s_p must be nonnegative and l_max positive")


@dataclass(frozen=True)
class SweepRow:
    t: int
    s_ice: int
    feasible: bool
    asymptotic_q: Fraction | None = None
    overhead_at_l_max: Fraction | None = None
    lower_bound_at_l_max: Fraction | None = None
    baseline_ratio: Fraction | None = None

    def as_csv(self) -> list[str]:
        return [str(self.t), str(self.s_ice), "true" if self.feasible else "false",
                _num(self.asymptotic_q), _num(self.overhead_at_l_max),
                _num(self.lower_bound_at_l_max), _num(self.baseline_ratio)]


def sweep(spec: SweepSpec) -> list[SweepRow]:
    """One row per ``(t, s_ice)`` pair; pairs with ``s_ice >= t`` come back flagged infeasible."""
    if not spec.t_values or not spec.s_ice_values:
        raise EmptySpec("sweep needs at least one t and one s_ice value")
    rows = []
    baseline = Fraction(spec.s_p, spec.l_max)
    for t in spec.t_values:
        for s_ice in spec.s_ice_values:
            if s_ice >= t:
                rows.append(SweepRow(t, s_ice, False))
                continue
            try:
                bound = guaranteed_lower_bound(s_ice, t, spec.l_max)
            except BoundUndefined:
                bound = None
            rows.append(SweepRow(t, s_ice, True, asymptotic_q(s_ice, t),
                                 ice_overhead(s_ice, t, spec.l_max), bound, baseline))
    return rows


def write_csv(header: Sequence[str], rows: Iterable[Sequence[str]], out: str | Path | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text, encoding="utf-8")
    return text


def sweep_csv(spec: SweepSpec, out: str | Path | None = None) -> str:
    return write_csv(SWEEP_COLUMNS, (r.as_csv() for r in sweep(spec)), out)


@dataclass(frozen=True)
class TrajectoryPoint:
    l: int
    measured_ratio: Fraction
    predicted_ratio: Fraction
    lower_bound: Fraction | None

    def as_csv(self) -> list[str]:
        return [str(self.l), _num(self.measured_ratio), _num(self.predicted_ratio), _num(self.lower_bound)]


@dataclass
class ReplayResult:
    trajectory: list[TrajectoryPoint]
    report: RatioReport
    mismatches: list[tuple[int, int, int]] = field(default_factory=list)  # (line, stored, recounted)

    def trajectory_csv(self, out: str | Path | None = None) -> str:
        return write_csv(TRAJECTORY_COLUMNS, (p.as_csv() for p in self.trajectory), out)


def replay_text(text: str, period_t: int, counter: TokenCounter | None = None,
                nominal_s_ice: int = 0) -> ReplayResult:
    """Recount a persisted transcript from its raw text.

    Stored token counts are only compared, never trusted. The trajectory has
    one point per nonempty prefix ending at a segment boundary.
    """
    counter = counter or TokenCounter()
    records = parse_jsonl(text)
    total = control = s_p = 0
    ice: list[int] = []
    points: list[TrajectoryPoint] = []
    mismatches = []
    for rec in records:
        n = counter.count(rec.text)
        if n != rec.stored_token_count:
            mismatches.append((rec.line, rec.stored_token_count, n))
            logger.warning("line %d: stored token_count %d, recounted %d", rec.line, rec.stored_token_count, n)
        total += n
        if rec.kind in CONTROL_KINDS:
            control += n
        if rec.kind is SegmentKind.SYSTEM_PROMPT:
            s_p = n
        if rec.kind is SegmentKind.ICE_CONTROL:
            ice.append(n)
        if total == 0:
            continue
        s_ice = effective_s_ice(ice, nominal_s_ice)
        try:
            bound = guaranteed_lower_bound(s_ice, period_t, total)
        except BoundUndefined:
            bound = None
        points.append(TrajectoryPoint(total, Fraction(control, total),
                                      predicted_ratio(s_p, s_ice, period_t, total), bound))
    report = ratio_report(total, control, ice, period_t, nominal_s_ice)
    return ReplayResult(points, report, mismatches)


def replay(path: str | Path, period_t: int, counter: TokenCounter | None = None,
           nominal_s_ice: int = 0) -> ReplayResult:
    return replay_text(Path(path).read_text(encoding="utf-8"), period_t, counter, nominal_s_ice)
