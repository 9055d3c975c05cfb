"""Schema, dataset containers, quantization and two-slice unrolling.

Discrete values are stored as 1-based levels in ``LongitudinalDataset`` (and
its CSV form). ``TwoSliceDataset`` stores 0-based state codes, which is what
the structure/params/infer modules work with.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SLICE_SUFFIXES = ("_t-1", "_t")


class DataError(ValueError):
    """Invalid input data (bad file, bad cell, violated precondition)."""


class Kind(str, Enum):
    CONTINUOUS = "continuous"
    DISCRETE = "discrete"


@dataclass(frozen=True)
class NodeSpec:
    name: str
    layer: int
    cardinality: int
    kind: Kind = Kind.CONTINUOUS
    # measured once per subject and replicated over weeks
    static: bool = False
    # AU-state nodes carry the sub-session their features come from
    sub_session: str | None = None

    def __post_init__(self):
        if self.layer not in (1, 2, 3):
            raise ValueError(f"{self.name}: layer must be 1, 2 or 3, got {self.layer}")
        if self.cardinality < 2:
            raise ValueError(f"{self.name}: cardinality must be >= 2")
        object.__setattr__(self, "kind", Kind(self.kind))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layer": self.layer,
            "cardinality": self.cardinality,
            "kind": self.kind.value,
            "static": self.static,
            "sub_session": self.sub_session,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodeSpec":
        return cls(
            name=d["name"],
            layer=int(d["layer"]),
            cardinality=int(d["cardinality"]),
            kind=Kind(d.get("kind", "continuous")),
            static=bool(d.get("static", False)),
            sub_session=d.get("sub_session"),
        )


PERSONALITY = ("Ext", "Agr", "Consc", "Neur", "Open")
RATINGS = ("Anth", "Ani", "Like", "PerInt", "RM", "Conv", "Sens", "dRC")


def paper_schema() -> list[NodeSpec]:
    """The 16-node slice: personality + wellbeing, two AU states, eight ratings."""
    nodes = [NodeSpec(p, 1, 3, Kind.CONTINUOUS, static=True) for p in PERSONALITY]
    nodes.append(NodeSpec("WB", 1, 3))
    nodes.append(NodeSpec("AU_med", 2, 4, Kind.DISCRETE, sub_session="Meditation"))
    nodes.append(NodeSpec("AU_int", 2, 4, Kind.DISCRETE, sub_session="Interaction"))
    nodes.extend(NodeSpec(r, 3, 3) for r in RATINGS)
    return nodes


def with_cardinality(schema: Sequence[NodeSpec], name: str, cardinality: int) -> list[NodeSpec]:
    out = []
    for s in schema:
        if s.name == name:
            s = NodeSpec(s.name, s.layer, cardinality, s.kind, s.static, s.sub_session)
        out.append(s)
    return out


@dataclass(frozen=True)
class LongitudinalDataset:
    """subjects x weeks x variables, with an explicit missing mask.

    ``values[s, w, v]`` is NaN wherever ``missing[s, w, v]`` is True; the mask
    is the authority. Week index ``w`` corresponds to week ``w + 1``.
    """

    subjects: tuple[str, ...]
    variables: tuple[str, ...]
    values: np.ndarray
    missing: np.ndarray

    def __post_init__(self):
        s, v = len(self.subjects), len(self.variables)
        if self.values.ndim != 3 or self.values.shape[0] != s or self.values.shape[2] != v:
            raise DataError(f"values shape {self.values.shape} does not match ({s}, T, {v})")
        if self.missing.shape != self.values.shape:
            raise DataError("missing mask shape mismatch")
        self.values.setflags(write=False)
        self.missing.setflags(write=False)

    @property
    def weeks(self) -> int:
        return self.values.shape[1]

    def column(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise KeyError(f"unknown variable {name!r}") from None

    def get(self, subject: str, week: int, name: str) -> float | None:
        s = self.subjects.index(subject)
        v = self.column(name)
        if self.missing[s, week - 1, v]:
            return None
        return float(self.values[s, week - 1, v])

    def select_weeks(self, first: int, last: int) -> "LongitudinalDataset":
        sl = slice(first - 1, last)
        return LongitudinalDataset(
            self.subjects, self.variables, self.values[:, sl].copy(), self.missing[:, sl].copy()
        )

    def select_variables(self, names: Sequence[str]) -> "LongitudinalDataset":
        idx = [self.column(n) for n in names]
        return LongitudinalDataset(
            self.subjects, tuple(names), self.values[:, :, idx].copy(), self.missing[:, :, idx].copy()
        )

    def merge(self, other: "LongitudinalDataset") -> "LongitudinalDataset":
        """Append the variables of ``other`` (same subjects and weeks)."""
        if other.subjects != self.subjects or other.weeks != self.weeks:
            raise DataError("cannot merge datasets with different subjects/weeks")
        clash = set(self.variables) & set(other.variables)
        if clash:
            raise DataError(f"variables present in both datasets: {sorted(clash)}")
        return LongitudinalDataset(
            self.subjects,
            self.variables + other.variables,
            np.concatenate([self.values, other.values], axis=2),
            np.concatenate([self.missing, other.missing], axis=2),
        )

    def has_missing(self) -> bool:
        return bool(self.missing.any())

    def missing_rows(self) -> list[tuple[str, int]]:
        """(subject, week) pairs where every variable is missing."""
        out = []
        full = self.missing.all(axis=2)
        for s, w in zip(*np.nonzero(full)):
            out.append((self.subjects[s], int(w) + 1))
        return out


def make_dataset(subjects, variables, values, missing=None) -> LongitudinalDataset:
    values = np.asarray(values, dtype=float)
    if missing is None:
        missing = np.isnan(values)
    missing = np.asarray(missing, dtype=bool)
    values = np.where(missing, np.nan, values)
    return LongitudinalDataset(tuple(subjects), tuple(variables), values, missing)


# --------------------------------------------------------------------------- I/O


def _parse_week(raw: str, lineno: int) -> int:
    try:
        w = float(raw)
    except ValueError:
        raise DataError(f"line {lineno}: week {raw!r} is not a number") from None
    if w != int(w) or w < 1:
        raise DataError(f"line {lineno}: week must be a positive integer, got {raw!r}")
    return int(w)


def load_dataset(path: str | Path, schema: Sequence[NodeSpec]) -> LongitudinalDataset:
    """Read a ``subject, week, <variables...>`` CSV.

    Blank cells become missing. Weeks run 1..max(week); absent (subject, week)
    rows are all-missing. Static variables are replicated to every week of the
    subject from the week(s) where they were recorded.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: no rows") from None
        body = [(i + 2, row) for i, row in enumerate(reader) if any(c.strip() for c in row)]
    if not body:
        raise DataError(f"{path}: no rows")
    for col in ("subject", "week"):
        if col not in header:
            raise DataError(f"{path}: missing required column {col!r}")
    names = [s.name for s in schema]
    for n in names:
        if n not in header:
            raise DataError(f"{path}: schema variable {n!r} not found in header")
    si, wi = header.index("subject"), header.index("week")
    ci = [header.index(n) for n in names]

    records: dict[tuple[str, int], list[float]] = {}
    subjects: list[str] = []
    for lineno, row in body:
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        subj = row[si].strip()
        week = _parse_week(row[wi].strip(), lineno)
        if (subj, week) in records:
            raise DataError(f"{path}:{lineno}: duplicate row for subject {subj!r} week {week}")
        cells = []
        for n, c in zip(names, ci):
            raw = row[c].strip()
            if raw == "":
                cells.append(math.nan)
                continue
            try:
                val = float(raw)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value {raw!r} for {n}") from None
            if not math.isfinite(val):
                raise DataError(f"{path}:{lineno}: non-finite value {raw!r} for {n}")
            cells.append(val)
        records[(subj, week)] = cells
        if subj not in subjects:
            subjects.append(subj)

    T = max(w for _, w in records)
    values = np.full((len(subjects), T, len(names)), np.nan)
    for (subj, week), cells in records.items():
        values[subjects.index(subj), week - 1] = cells
    missing = np.isnan(values)

    for v, spec in enumerate(schema):
        if spec.kind == Kind.DISCRETE:
            obs = values[:, :, v][~missing[:, :, v]]
            bad = obs[(obs != np.round(obs)) | (obs < 1) | (obs > spec.cardinality)]
            if bad.size:
                raise DataError(f"{path}: {spec.name} has values outside 1..{spec.cardinality}: {bad[:3]}")
        if spec.static:
            for s in range(len(subjects)):
                obs = values[s, :, v][~missing[s, :, v]]
                if obs.size == 0:
                    continue
                if np.ptp(obs) > 0:
                    raise DataError(f"{path}: static variable {spec.name} varies for subject {subjects[s]}")
                values[s, :, v] = obs[0]
                missing[s, :, v] = False
    return make_dataset(subjects, names, values, missing)


def _fmt(x: float) -> str:
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def save_dataset(data: LongitudinalDataset, path: str | Path) -> None:
    """Write the wide CSV form read by :func:`load_dataset`. All-missing rows are dropped."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "week", *data.variables])
        for s, subj in enumerate(data.subjects):
            for t in range(data.weeks):
                if data.missing[s, t].all():
                    continue
                cells = ["" if data.missing[s, t, v] else _fmt(data.values[s, t, v]) for v in range(len(data.variables))]
                w.writerow([subj, t + 1, *cells])


# ------------------------------------------------------------------ quantization


@dataclass(frozen=True)
class QuantizationEntry:
    cutpoints: tuple[float, ...]
    representatives: tuple[float, ...]
    # training range, kept so out-of-range profiles can be flagged
    lower: float = -math.inf
    upper: float = math.inf

    @property
    def cardinality(self) -> int:
        return len(self.representatives)

    def level(self, x: float) -> int:
        """1-based bin of ``x``; values equal to a cutpoint go to the lower bin."""
        return int(np.searchsorted(self.cutpoints, x, side="left")) + 1

    def levels(self, x: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.cutpoints, x, side="left") + 1

    def bin_range(self, level: int) -> tuple[float, float]:
        lo = -math.inf if level == 1 else self.cutpoints[level - 2]
        hi = math.inf if level == self.cardinality else self.cutpoints[level - 1]
        return lo, hi

    def in_training_range(self, x: float) -> bool:
        return self.lower <= x <= self.upper


QuantizationMap = dict[str, QuantizationEntry]


def _cutpoints(sorted_vals: np.ndarray, k: int) -> tuple[list[float], bool]:
    """Equal-frequency cutpoints; returns (cuts, has_empty_bins)."""
    n = len(sorted_vals)
    distinct = np.unique(sorted_vals)
    d = len(distinct)
    if d >= k:
        # choose each cut among distinct values below the max, strictly increasing
        idx = []
        for j in range(1, k):
            pos = math.ceil(j * n / k) - 1
            i = int(np.searchsorted(distinct, sorted_vals[pos]))
            lo = idx[-1] + 1 if idx else 0
            hi = d - 1 - (k - j)
            idx.append(min(max(i, lo), hi))
        return [float(distinct[i]) for i in idx], False
    # fewer distinct values than bins: one value per bin, trailing bins empty
    cuts = [float(x) for x in distinct[:-1]]
    top = float(distinct[-1])
    while len(cuts) < k - 1:
        top += 1.0
        cuts.append(top)
    return cuts, True


def fit_quantization(values: np.ndarray, cardinality: int, name: str = "") -> QuantizationEntry:
    vals = np.sort(np.asarray(values, dtype=float))
    if vals.size == 0:
        raise DataError(f"{name}: no values to quantize")
    if vals[0] == vals[-1]:
        raise DataError(f"{name}: constant column cannot be split into {cardinality} bins")
    cuts, empty = _cutpoints(vals, cardinality)
    if empty:
        log.warning("%s: only %d distinct values for %d bins; upper bins are empty",
                    name, len(np.unique(vals)), cardinality)
    levels = np.searchsorted(cuts, vals, side="left") + 1
    reps = []
    for lev in range(1, cardinality + 1):
        members = vals[levels == lev]
        if members.size:
            reps.append(float(members.mean()))
        else:
            # empty bin: its upper edge (a cutpoint) lies inside the closed range
            reps.append(float(cuts[lev - 2]) if lev > 1 else float(cuts[0]))
    return QuantizationEntry(tuple(cuts), tuple(reps), float(vals[0]), float(vals[-1]))


def apply_quantization(data: LongitudinalDataset, schema: Sequence[NodeSpec], qmap: QuantizationMap) -> LongitudinalDataset:
    """Map continuous variables to levels with an existing map; discrete ones pass through."""
    values = np.array(data.values)
    for spec in schema:
        if spec.kind != Kind.CONTINUOUS:
            continue
        v = data.column(spec.name)
        obs = ~data.missing[:, :, v]
        values[:, :, v][obs] = qmap[spec.name].levels(data.values[:, :, v][obs])
    return make_dataset(data.subjects, data.variables, values, data.missing)


def quantize(data: LongitudinalDataset, schema: Sequence[NodeSpec]) -> tuple[LongitudinalDataset, QuantizationMap]:
    """Equal-frequency binning of every continuous variable.

    Cutpoints are order statistics at the j/k quantiles; a value equal to a
    cutpoint belongs to the lower bin. Each bin's representative is the mean of
    the values that fell into it.
    """
    qmap: QuantizationMap = {}
    for spec in schema:
        if spec.kind != Kind.CONTINUOUS:
            continue
        v = data.column(spec.name)
        if data.missing[:, :, v].any():
            raise DataError(f"{spec.name}: quantize requires imputed data (missing cells present)")
        qmap[spec.name] = fit_quantization(data.values[:, :, v].ravel(), spec.cardinality, spec.name)
    return apply_quantization(data, schema, qmap), qmap


def dequantize_expectation(posterior: Sequence[float], entry: QuantizationEntry) -> float:
    p = np.asarray(posterior, dtype=float)
    if p.shape != (entry.cardinality,):
        raise ValueError(f"posterior length {p.size} != cardinality {entry.cardinality}")
    if abs(p.sum() - 1.0) > 1e-9 or (p < 0).any():
        raise ValueError("posterior is not normalized")
    return float(p @ np.asarray(entry.representatives))


def save_qmap(qmap: QuantizationMap, path: str | Path) -> None:
    doc = {
        name: {
            "cutpoints": list(e.cutpoints),
            "representatives": list(e.representatives),
            "training_range": [e.lower, e.upper],
        }
        for name, e in qmap.items()
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_qmap(path: str | Path) -> QuantizationMap:
    doc = json.loads(Path(path).read_text())
    out = {}
    for name, d in doc.items():
        lo, hi = d.get("training_range", [-math.inf, math.inf])
        out[name] = QuantizationEntry(tuple(d["cutpoints"]), tuple(d["representatives"]), lo, hi)
    return out


# ----------------------------------------------------------------- two slices


def slice_names(base: Sequence[str]) -> tuple[str, ...]:
    return tuple(f"{n}{SLICE_SUFFIXES[0]}" for n in base) + tuple(f"{n}{SLICE_SUFFIXES[1]}" for n in base)


@dataclass(frozen=True)
class TwoSliceDataset:
    """Rows of (slice t-1, slice t) 0-based state codes.

    ``provenance[i]`` is the (subject, week t) the row's second slice came from.
    """

    base: tuple[str, ...]
    cardinalities: tuple[int, ...]  # per base variable
    codes: np.ndarray
    provenance: tuple[tuple[str, int], ...] = field(default=())

    def __post_init__(self):
        n = len(self.base)
        if self.codes.ndim != 2 or self.codes.shape[1] != 2 * n:
            raise DataError(f"codes must have {2 * n} columns")
        card = np.asarray(self.node_cardinalities)
        if self.codes.size and ((self.codes < 0).any() or (self.codes >= card).any()):
            raise DataError("codes out of range")
        self.codes.setflags(write=False)

    @property
    def names(self) -> tuple[str, ...]:
        return slice_names(self.base)

    @property
    def node_cardinalities(self) -> tuple[int, ...]:
        return tuple(self.cardinalities) * 2

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]


def unroll_two_slice(data: LongitudinalDataset, schema: Sequence[NodeSpec], weeks_used: int) -> TwoSliceDataset:
    """Concatenate consecutive weeks (t-1, t) for t = 2..weeks_used, per subject."""
    if weeks_used < 2:
        raise DataError("need at least two slices")
    if weeks_used > data.weeks:
        raise DataError(f"weeks_used={weeks_used} exceeds the {data.weeks} available weeks")
    names = [s.name for s in schema]
    sub = data.select_variables(names).select_weeks(1, weeks_used)
    if sub.has_missing():
        raise DataError("unroll_two_slice requires complete data in the used weeks")
    levels = sub.values.astype(int)
    for v, spec in enumerate(schema):
        col = levels[:, :, v]
        if (col < 1).any() or (col > spec.cardinality).any():
            raise DataError(f"{spec.name}: levels outside 1..{spec.cardinality}; quantize first")
    rows, prov = [], []
    for s, subj in enumerate(sub.subjects):
        for t in range(1, weeks_used):
            rows.append(np.concatenate([levels[s, t - 1], levels[s, t]]) - 1)
            prov.append((subj, t + 1))
    codes = np.array(rows, dtype=np.int64).reshape(len(rows), 2 * len(names))
    return TwoSliceDataset(tuple(names), tuple(s.cardinality for s in schema), codes, tuple(prov))


@dataclass(frozen=True)
class DiscreteTable:
    """Plain rows of 0-based codes over named nodes (no slice structure)."""

    names: tuple[str, ...]
    node_cardinalities: tuple[int, ...]
    codes: np.ndarray

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[1] != len(self.names):
            raise DataError("codes must be (rows, nodes)")
        card = np.asarray(self.node_cardinalities)
        if self.codes.size and ((self.codes < 0).any() or (self.codes >= card).any()):
            raise DataError("codes out of range")

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]
