"""Dirichlet-smoothed CPT estimation.

The "MAP" estimate used throughout is the Dirichlet posterior mean under the
BDeu prior, theta_jk = (N_jk + a_jk) / (N_j + a_j) with a_jk = ess / (r q).
It is strictly positive, which keeps junction-tree propagation and EM away
from zero-probability evidence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .structure import Dag, TwoSliceDag, dag_from_dict, dag_to_dict, family_counts


@dataclass(frozen=True)
class Cpt:
    node: int
    parents: tuple[int, ...]
    cardinality: int
    parent_cardinalities: tuple[int, ...]
    table: np.ndarray  # (q, r), rows in C order over parent states

    def __post_init__(self):
        q = int(np.prod(self.parent_cardinalities)) if self.parents else 1
        if self.table.shape != (q, self.cardinality):
            raise ValueError(f"node {self.node}: table shape {self.table.shape} != ({q}, {self.cardinality})")
        self.table.setflags(write=False)

    def as_factor_array(self) -> np.ndarray:
        """Table reshaped to (*parent_cards, r), axes in (parents..., node) order."""
        return self.table.reshape(*self.parent_cardinalities, self.cardinality)

    def row(self, parent_states: Sequence[int]) -> np.ndarray:
        if not self.parents:
            return self.table[0]
        return self.table[np.ravel_multi_index(tuple(parent_states), self.parent_cardinalities)]


@dataclass(frozen=True)
class CptSet:
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]
    cpts: tuple[Cpt, ...]

    def __getitem__(self, node: int | str) -> Cpt:
        if isinstance(node, str):
            node = self.names.index(node)
        return self.cpts[node]

    def __len__(self):
        return len(self.cpts)

    def check_dag(self, dag: Dag) -> None:
        if tuple(dag.names) != self.names:
            raise ValueError("CPT set and DAG have different nodes")
        for c, ps in enumerate(dag.parents):
            if tuple(ps) != self.cpts[c].parents:
                raise ValueError(f"parents of {self.names[c]} disagree with the DAG")


def map_from_counts(counts: np.ndarray, ess: float) -> np.ndarray:
    """(N_jk + a_jk) / (N_j + a_j); rows with no data come out uniform."""
    if ess <= 0:
        raise ValueError("ess must be positive")
    q, r = counts.shape
    a_jk = ess / (r * q)
    num = counts + a_jk
    return num / num.sum(1, keepdims=True)


def cpts_from_counts(dag: Dag, cardinalities: Sequence[int], counts: Sequence[np.ndarray], ess: float) -> CptSet:
    cards = tuple(int(c) for c in cardinalities)
    cpts = []
    for c, ps in enumerate(dag.parents):
        cpts.append(Cpt(c, tuple(ps), cards[c], tuple(cards[p] for p in ps), map_from_counts(counts[c], ess)))
    return CptSet(tuple(dag.names), cards, tuple(cpts))


def fit_map(data, dag: Dag, ess: float = 1.0) -> CptSet:
    """Posterior-mean CPTs from complete discrete data."""
    if tuple(data.names) != tuple(dag.names):
        raise ValueError("data columns do not match DAG nodes")
    codes = np.asarray(data.codes)
    cards = tuple(int(c) for c in data.node_cardinalities)
    counts = [family_counts(codes, cards, c, ps) for c, ps in enumerate(dag.parents)]
    return cpts_from_counts(dag, cards, counts, ess)


def cptset_from_tables(dag: Dag, cardinalities: Sequence[int], tables: Sequence[np.ndarray]) -> CptSet:
    """Wrap explicit tables (each (q, r) or (*parent_cards, r)); rows must sum to 1."""
    cards = tuple(int(c) for c in cardinalities)
    cpts = []
    for c, ps in enumerate(dag.parents):
        t = np.asarray(tables[c], dtype=float).reshape(-1, cards[c])
        if not np.allclose(t.sum(1), 1.0, atol=1e-9):
            raise ValueError(f"rows of {dag.names[c]} do not sum to 1")
        cpts.append(Cpt(c, tuple(ps), cards[c], tuple(cards[p] for p in ps), t.copy()))
    return CptSet(tuple(dag.names), cards, tuple(cpts))


# ------------------------------------------------------------------ JSON model

TABLE_ORDER = (
    "table[j][k] = P(node = k | parents = j); j enumerates parent state tuples "
    "in row-major order (last listed parent varies fastest); states are 0-based"
)


def save_model(dag: TwoSliceDag, cpts: CptSet, path: str | Path, extra: dict | None = None) -> None:
    cpts.check_dag(dag)
    doc = {
        "structure": dag_to_dict(dag),
        "table_order": TABLE_ORDER,
        "nodes": [
            {
                "node": cpts.names[c.node],
                "cardinality": c.cardinality,
                "parents": [cpts.names[p] for p in c.parents],
                "parent_cardinalities": list(c.parent_cardinalities),
                "table": [[float(x) for x in row] for row in c.table],
            }
            for c in cpts.cpts
        ],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_model(path: str | Path) -> tuple[TwoSliceDag, CptSet, dict]:
    doc = json.loads(Path(path).read_text())
    dag = dag_from_dict(doc["structure"])
    cards = [0] * dag.n_nodes
    tables = [None] * dag.n_nodes
    for entry in doc["nodes"]:
        i = dag.names.index(entry["node"])
        if [dag.names[p] for p in dag.parents[i]] != entry["parents"]:
            raise ValueError(f"model file: parents of {entry['node']} disagree with its structure")
        cards[i] = entry["cardinality"]
        tables[i] = np.array(entry["table"], dtype=float)
    cpts = cptset_from_tables(dag, cards, tables)
    return dag, cpts, doc
