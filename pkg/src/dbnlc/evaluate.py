"""Per-subject goodness-of-fit and the forecast report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import RATINGS


def _pair(pred, actual):
    p = np.asarray(pred, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape or p.ndim != 1:
        raise ValueError(f"length mismatch: {p.shape} vs {a.shape}")
    if p.size == 0:
        raise ValueError("empty vectors")
    return p, a


def rmse(pred: Sequence[float], actual: Sequence[float]) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def r2(pred: Sequence[float], actual: Sequence[float]) -> float:
    """1 - SS_res / SS_tot about the mean of the actuals; may be negative."""
    p, a = _pair(pred, actual)
    if p.size < 2:
        raise ValueError("r2 needs at least two values")
    ss_tot = float(((a - a.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("undefined R²: actual values have zero variance")
    return 1.0 - float(((a - p) ** 2).sum()) / ss_tot


@dataclass(frozen=True)
class ReportRow:
    subject: str
    week: int
    predicted: tuple[float, ...]
    actual: tuple[float, ...] | None
    rmse: float | None
    r2: float | None


@dataclass(frozen=True)
class PredictionReport:
    targets: tuple[str, ...]
    rows: tuple[ReportRow, ...]

    def __len__(self):
        return len(self.rows)

    def with_metrics(self) -> list[ReportRow]:
        return [r for r in self.rows if r.rmse is not None]


def build_report(
    predictions: Mapping[tuple[str, int], Sequence[float]],
    actuals: Mapping[tuple[str, int], Sequence[float | None] | None],
    targets: Sequence[str] = RATINGS,
) -> PredictionReport:
    """Join predictions to actuals by (subject, week).

    Rows whose actuals are absent, or have any missing entry, keep their
    predictions and carry no metrics. An actuals key with no prediction is an
    error, as is a duplicate key.
    """
    for key in actuals:
        if key not in predictions:
            raise KeyError(f"actuals for {key} have no matching prediction")
    rows = []
    seen = set()
    for key, pred in predictions.items():
        if key in seen:
            raise KeyError(f"duplicate prediction key {key}")
        seen.add(key)
        pred = tuple(float(x) for x in pred)
        if len(pred) != len(targets):
            raise ValueError(f"{key}: expected {len(targets)} predictions")
        act = actuals.get(key)
        if act is None or any(x is None or (isinstance(x, float) and math.isnan(x)) for x in act):
            rows.append(ReportRow(key[0], int(key[1]), pred, None if act is None else tuple(act), None, None))
            continue
        act = tuple(float(x) for x in act)
        try:
            r2v = r2(pred, act)
        except ValueError:
            r2v = None
        rows.append(ReportRow(key[0], int(key[1]), pred, act, rmse(pred, act), r2v))
    return PredictionReport(tuple(targets), tuple(rows))


def _cell(x):
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def write_report_csv(report: PredictionReport, path: str | Path) -> None:
    """subject, week, pred_*, actual_*, rmse, r2 (empty where unavailable)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["subject", "week", *(f"pred_{t}" for t in report.targets),
             *(f"actual_{t}" for t in report.targets), "rmse", "r2"]
        )
        for r in report.rows:
            act = r.actual if r.actual is not None else (None,) * len(report.targets)
            w.writerow(
                [r.subject, r.week, *(_cell(x) for x in r.predicted), *(_cell(x) for x in act),
                 "" if r.rmse is None else f"{r.rmse:.2f}", "" if r.r2 is None else f"{r.r2:.4f}"]
            )


def read_report_csv(path: str | Path) -> PredictionReport:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        targets = tuple(h[5:] for h in reader.fieldnames if h.startswith("pred_"))
        preds, acts = {}, {}
        for row in reader:
            key = (row["subject"], int(row["week"]))
            preds[key] = [float(row[f"pred_{t}"]) for t in targets]
            a = [row[f"actual_{t}"] for t in targets]
            acts[key] = None if all(x == "" for x in a) else [None if x == "" else float(x) for x in a]
    return build_report(preds, {k: v for k, v in acts.items() if v is not None}, targets)


def format_table(report: PredictionReport) -> str:
    """Aligned text: predicted(actual) per rating, then RMSE and R² (-- if unavailable)."""
    header = ["S", "t", *report.targets, "RMSE", "R2"]
    lines = []
    for r in report.rows:
        cells = [r.subject, str(r.week)]
        for i, p in enumerate(r.predicted):
            a = None if r.actual is None else r.actual[i]
            cells.append(f"{p:.2f}" if a is None or (isinstance(a, float) and math.isnan(a)) else f"{p:.2f}({a:g})")
        cells.append("--" if r.rmse is None else f"{r.rmse:.2f}")
        cells.append("--" if r.r2 is None else f"{r.r2:.4f}")
        lines.append(cells)
    widths = [max(len(x) for x in col) for col in zip(header, *lines)]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    for cells in lines:
        out.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    return "\n".join(out) + "\n"
