"""Shared generators and brute-force oracles."""
from __future__ import annotations

import itertools

import numpy as np
import pytest
from scipy.special import gammaln

from dbnlc.core import DiscreteTable
from dbnlc.params import cptset_from_tables
from dbnlc.structure import Dag


def random_dag(rng, n_nodes, max_parents=3, density=0.5) -> Dag:
    order = rng.permutation(n_nodes)
    parents = [[] for _ in range(n_nodes)]
    for i in range(n_nodes):
        for j in range(i):
            if len(parents[order[i]]) < max_parents and rng.random() < density:
                parents[order[i]].append(int(order[j]))
    return Dag(tuple(f"X{i}" for i in range(n_nodes)), tuple(tuple(p) for p in parents))


def random_cpts(rng, dag, cards, concentration=1.0):
    tables = []
    for v, ps in enumerate(dag.parents):
        q = int(np.prod([cards[p] for p in ps])) if ps else 1
        tables.append(rng.dirichlet(np.full(cards[v], concentration), size=q))
    return cptset_from_tables(dag, cards, tables)


def random_network(rng, max_nodes=6, max_states=4):
    n = int(rng.integers(1, max_nodes + 1))
    cards = tuple(int(c) for c in rng.integers(2, max_states + 1, size=n))
    dag = random_dag(rng, n)
    return dag, cards, random_cpts(rng, dag, cards)


def joint_table(dag, cpts) -> np.ndarray:
    """Full joint by explicit enumeration of every configuration."""
    cards = cpts.cardinalities
    joint = np.zeros(cards)
    for cfg in itertools.product(*(range(c) for c in cards)):
        p = 1.0
        for v, ps in enumerate(dag.parents):
            p *= cpts[v].row([cfg[u] for u in ps])[cfg[v]]
        joint[cfg] = p
    return joint


def brute_marginals(dag, cpts, evidence):
    joint = joint_table(dag, cpts)
    mask = np.ones_like(joint, dtype=bool)
    for v, s in evidence.items():
        sl = [slice(None)] * joint.ndim
        keep = np.zeros(joint.shape[v], dtype=bool)
        keep[s] = True
        shape = [1] * joint.ndim
        shape[v] = -1
        mask &= keep.reshape(shape)
    masked = np.where(mask, joint, 0.0)
    z = masked.sum()
    margs = []
    for v in range(joint.ndim):
        axes = tuple(a for a in range(joint.ndim) if a != v)
        margs.append(masked.sum(axis=axes) / z)
    return margs, float(np.log(z))


def direct_bdeu(codes, cards, node, parents, ess):
    """Plain loop over parent configurations and states."""
    r = cards[node]
    pcs = [cards[p] for p in parents]
    q = int(np.prod(pcs)) if pcs else 1
    total = 0.0
    for j, cfg in enumerate(itertools.product(*(range(c) for c in pcs)) if pcs else [()]):
        rows = np.ones(len(codes), dtype=bool)
        for p, s in zip(parents, cfg):
            rows &= codes[:, p] == s
        nij = int(rows.sum())
        total += gammaln(ess / q) - gammaln(ess / q + nij)
        for k in range(r):
            nijk = int((rows & (codes[:, node] == k)).sum())
            total += gammaln(ess / (q * r) + nijk) - gammaln(ess / (q * r))
    return total


def table(codes, cards, names=None) -> DiscreteTable:
    codes = np.asarray(codes, dtype=np.int64)
    names = names or tuple(f"X{i}" for i in range(codes.shape[1]))
    return DiscreteTable(tuple(names), tuple(cards), codes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines, echoed after the run even when output is captured
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
