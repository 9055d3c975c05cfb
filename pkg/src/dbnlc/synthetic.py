"""Hand-built ground-truth network and a synthetic study generated from it.

Used by the structure-recovery checks and to bundle a 9-subject x 5-week
dataset (questionnaire CSV plus frame-level AU files) for the pipeline.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PERSONALITY, NodeSpec, paper_schema
from .params import CptSet, cptset_from_tables
from .preprocess import AU_NAMES, au_file_name
from .structure import TwoSliceDag

# slice-t families of the ground truth, by base name: (within parents, between parents)
GROUND_TRUTH = {
    "WB": ((), ("WB",)),
    "AU_med": (("Open",), ("AU_med",)),
    "AU_int": (("Agr",), ("AU_int",)),
    "Anth": (("AU_int",), ("Anth",)),
    "Ani": (("Ext",), ()),
    "Like": (("Open",), ()),
    "PerInt": (("Like",), ()),
    "RM": (("Consc",), ("RM",)),
    "Conv": ((), ("Consc",)),
    "Sens": (("WB", "Conv"), ()),
    "dRC": (("Neur",), ("dRC",)),
}

# questionnaire value ranges used to turn levels back into raw scores
SCALES = {name: (1.0, 5.0) for name in PERSONALITY + ("WB", "Anth", "Ani", "Like", "PerInt", "RM", "Conv", "Sens")}
SCALES["dRC"] = (-1.0, 3.0)


def ground_truth_dag(schema: Sequence[NodeSpec] | None = None) -> TwoSliceDag:
    schema = list(schema or paper_schema())
    base = [s.name for s in schema]
    n = len(base)
    parents_t = []
    for name in base:
        within, between = GROUND_TRUTH.get(name, ((), ()))
        parents_t.append(tuple(n + base.index(p) for p in within) + tuple(base.index(p) for p in between))
    return TwoSliceDag.from_slice_t_parents(base, parents_t)


def _peaked_table(parent_cards, r, strength, rng):
    """Each row puts ``strength`` on the state tracking the mean parent position."""
    if not parent_cards:
        p = rng.dirichlet(np.full(r, 20.0))
        return p[None, :]
    rows = []
    for cfg in np.ndindex(*parent_cards):
        pos = np.mean([s / (c - 1) for s, c in zip(cfg, parent_cards)])
        k = int(round(pos * (r - 1)))
        row = np.full(r, (1.0 - strength) / (r - 1))
        row[k] = strength
        rows.append(row)
    return np.array(rows)


def ground_truth_cpts(dag: TwoSliceDag, cardinalities: Sequence[int], strength: float = 0.8, seed: int = 7) -> CptSet:
    rng = np.random.default_rng(seed)
    cards = tuple(cardinalities) * 2 if len(cardinalities) == dag.n_per_slice else tuple(cardinalities)
    tables = []
    for v, ps in enumerate(dag.parents):
        tables.append(_peaked_table([cards[p] for p in ps], cards[v], strength, rng))
    return cptset_from_tables(dag, cards, tables)


def rollout(dag: TwoSliceDag, cpts: CptSet, n_subjects: int, weeks: int, seed: int = 0,
            carry: Sequence[str] = PERSONALITY) -> np.ndarray:
    """(subjects, weeks, N) 0-based codes; week 1 from slice t-1, later weeks
    from slice t given the previous week. ``carry`` nodes keep their week-1 value."""
    rng = np.random.default_rng(seed)
    N = dag.n_per_slice
    carry_idx = [dag.base.index(c) for c in carry]
    out = np.zeros((n_subjects, weeks, N), dtype=np.int64)
    order = dag.topological_order()
    for s in range(n_subjects):
        full = np.zeros(2 * N, dtype=np.int64)
        for v in (v for v in order if v < N):
            full[v] = _draw(cpts[v], full, rng)
        out[s, 0] = full[:N]
        for w in range(1, weeks):
            full[:N] = out[s, w - 1]
            for v in (v for v in order if v >= N):
                if v - N in carry_idx:
                    full[v] = full[v - N]
                else:
                    full[v] = _draw(cpts[v], full, rng)
            out[s, w] = full[N:]
    return out


def _draw(cpt, state, rng):
    p = cpt.row([state[q] for q in cpt.parents])
    return int(rng.choice(len(p), p=p))


def _prototypes(k: int, rng) -> np.ndarray:
    # distinct AU activation patterns per state; baseline kept above the
    # intensity gate so summaries are not exactly tied within a state
    protos = rng.uniform(1.6, 2.2, size=(k, len(AU_NAMES)))
    for i in range(k):
        active = rng.choice(len(AU_NAMES), size=6, replace=False)
        protos[i, active] = rng.uniform(3.0, 4.5, size=6)
    return protos


def write_synthetic_study(
    directory: str | Path,
    n_subjects: int = 9,
    weeks: int = 5,
    seed: int = 2021,
    drop: Sequence[tuple[str, int]] = (("S6", 2), ("S7", 3), ("S8", 1), ("S9", 5)),
    n_frames: int = 60,
) -> dict:
    """Generate questionnaire.csv, au_frames/ and config.json under ``directory``.

    ``drop`` lists (subject, week) sessions that were missed: their
    questionnaire row and AU files are omitted.
    """
    directory = Path(directory)
    (directory / "au_frames").mkdir(parents=True, exist_ok=True)
    schema = paper_schema()
    dag = ground_truth_dag(schema)
    cards = [s.cardinality for s in schema]
    cpts = ground_truth_cpts(dag, cards, seed=seed)
    codes = rollout(dag, cpts, n_subjects, weeks, seed=seed)
    rng = np.random.default_rng(seed + 1)
    subjects = [f"S{i + 1}" for i in range(n_subjects)]
    base = [s.name for s in schema]
    quest = [s for s in schema if s.sub_session is None]

    values = np.zeros((n_subjects, weeks, len(quest)))
    for j, spec in enumerate(quest):
        lo, hi = SCALES[spec.name]
        width = (hi - lo) / spec.cardinality
        lev = codes[:, :, base.index(spec.name)]
        raw = lo + (lev + rng.uniform(0.05, 0.95, size=lev.shape)) * width
        if spec.static:
            raw = np.repeat(raw[:, :1], weeks, axis=1)
        values[:, :, j] = np.round(raw, 2)

    dropped = set(drop)
    with (directory / "questionnaire.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "week", *(s.name for s in quest)])
        for i, subj in enumerate(subjects):
            for t in range(weeks):
                if (subj, t + 1) in dropped:
                    continue
                w.writerow([subj, t + 1, *(f"{x:.2f}" for x in values[i, t])])

    for spec in schema:
        if spec.sub_session is None:
            continue
        protos = _prototypes(spec.cardinality, rng)
        col = base.index(spec.name)
        for i, subj in enumerate(subjects):
            for t in range(weeks):
                if (subj, t + 1) in dropped:
                    continue
                # per-session offset plus per-frame jitter
                proto = protos[codes[i, t, col]] + rng.normal(0.0, 0.15, size=len(AU_NAMES))
                frames = np.clip(proto + rng.normal(0.0, 0.2, size=(n_frames, len(AU_NAMES))), 0.0, 5.0)
                path = directory / "au_frames" / au_file_name(subj, t + 1, spec.sub_session)
                with path.open("w", newline="") as fh:
                    wr = csv.writer(fh, lineterminator="\n")
                    wr.writerow(["frame", *AU_NAMES])
                    for f, row in enumerate(frames):
                        wr.writerow([f + 1, *(f"{x:.3f}" for x in row)])

    config = {
        "questionnaire": "questionnaire.csv",
        "au_dir": "au_frames",
        "out_dir": "out",
        "seed": 0,
        "train_weeks": [1, 3],
        "forecast_weeks": [4, 5],
        "profiles": {
            "C1": {"Ext": 3, "Agr": 3, "Consc": 1, "Neur": 3, "Open": 3, "WB": 3},
            "C2": {"Ext": 3, "Agr": 3, "Consc": 5, "Neur": 3, "Open": 3, "WB": 3},
        },
    }

    (directory / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    return {"codes": codes, "subjects": subjects, "dag": dag, "cpts": cpts}
