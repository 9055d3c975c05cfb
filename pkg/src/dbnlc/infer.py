"""Exact inference on the two-slice network and its uses.

Junction tree: moralize, triangulate by min-fill, keep maximal cliques, join
them with a maximum-weight spanning tree over separator sizes. Propagation is
two-pass sum-product (Shafer-Shenoy messages, rescaled to stay in range).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import xlogy

from .core import RATINGS, DiscreteTable, QuantizationEntry, TwoSliceDataset, dequantize_expectation
from .params import CptSet, cpts_from_counts
from .structure import Dag, TwoSliceDag, family_counts

log = logging.getLogger(__name__)


class ImpossibleEvidenceError(ValueError):
    """The evidence has probability zero under the model."""


Evidence = Mapping[str, int]


def _einsum(operands: Sequence[tuple[Sequence[int], np.ndarray]], out: Sequence[int]) -> np.ndarray:
    # relabel global variable ids to 0..m-1 for einsum's sublist interface
    local: dict[int, int] = {}
    args = []
    for vars_, arr in operands:
        args.append(arr)
        args.append([local.setdefault(v, len(local)) for v in vars_])
    for v in out:
        local.setdefault(v, len(local))
    args.append([local[v] for v in out])
    return np.einsum(*args, optimize=len(operands) > 2)


# ------------------------------------------------------------------ building


def moral_graph(dag: Dag) -> list[set[int]]:
    adj = [set() for _ in range(dag.n_nodes)]
    for c, ps in enumerate(dag.parents):
        for p in ps:
            adj[p].add(c)
            adj[c].add(p)
        for a in ps:
            for b in ps:
                if a != b:
                    adj[a].add(b)
    return adj


def min_fill_cliques(adj: Sequence[set[int]]) -> list[tuple[int, ...]]:
    """Eliminate by fewest fill-in edges (ties: smallest index); return maximal cliques."""
    g = [set(a) for a in adj]
    alive = set(range(len(g)))
    cliques: list[frozenset] = []
    while alive:
        best, best_fill = None, None
        for v in sorted(alive):
            nb = sorted(g[v])
            fill = sum(1 for i, a in enumerate(nb) for b in nb[i + 1:] if b not in g[a])
            if best_fill is None or fill < best_fill:
                best, best_fill = v, fill
        nb = g[best]
        cliques.append(frozenset(nb | {best}))
        for a in nb:
            g[a] |= nb - {a}
            g[a].discard(best)
        alive.remove(best)
        g[best] = set()
    maximal = []
    for i, c in enumerate(cliques):
        if any(c < d for d in cliques) or any(c == d for d in cliques[:i]):
            continue
        maximal.append(tuple(sorted(c)))
    return maximal


@dataclass
class JunctionTree:
    names: tuple[str, ...]
    cardinalities: tuple[int, ...]
    cliques: list[tuple[int, ...]]
    edges: list[tuple[int, int]]  # (i, j) with i < j
    separators: dict[tuple[int, int], tuple[int, ...]]
    assignment: list[int]  # CPT of node v lives in clique assignment[v]
    potentials: list[np.ndarray] = field(default_factory=list)
    # traversal from clique 0: order[k] has parent up[order[k]]
    order: list[int] = field(default_factory=list)
    up: list[int] = field(default_factory=list)

    def neighbours(self, i: int) -> list[int]:
        return [b if a == i else a for a, b in self.edges if i in (a, b)]

    def separator(self, i: int, j: int) -> tuple[int, ...]:
        return self.separators[(min(i, j), max(i, j))]

    def home_clique(self, v: int) -> int:
        """Smallest clique containing v (ties: lowest index)."""
        return min((len(c), i) for i, c in enumerate(self.cliques) if v in c)[1]

    def set_potentials(self, cpts: CptSet) -> None:
        pots = []
        for i, c in enumerate(self.cliques):
            ops = []
            for v in range(len(self.names)):
                if self.assignment[v] == i:
                    cpt = cpts[v]
                    ops.append((cpt.parents + (v,), cpt.as_factor_array()))
            covered = {u for vars_, _ in ops for u in vars_}
            # unit factors for clique members no assigned CPT mentions
            ops.extend(((v,), np.ones(self.cardinalities[v])) for v in c if v not in covered)
            pots.append(_einsum(ops, c))
        self.potentials = pots


def build_junction_tree(dag: Dag, cpts: CptSet) -> JunctionTree:
    cpts.check_dag(dag)
    cliques = min_fill_cliques(moral_graph(dag))
    sets = [set(c) for c in cliques]
    cand = []
    for i in range(len(cliques)):
        for j in range(i + 1, len(cliques)):
            cand.append((-len(sets[i] & sets[j]), i, j))
    cand.sort()
    comp = list(range(len(cliques)))

    def find(x):
        while comp[x] != x:
            comp[x] = comp[comp[x]]
            x = comp[x]
        return x

    edges, seps = [], {}
    for _, i, j in cand:
        a, b = find(i), find(j)
        if a != b:
            comp[a] = b
            edges.append((i, j))
            seps[(i, j)] = tuple(sorted(sets[i] & sets[j]))
    assignment = []
    for v, ps in enumerate(dag.parents):
        fam = set(ps) | {v}
        assignment.append(min((len(c), k) for k, c in enumerate(cliques) if fam <= set(c))[1])
    jt = JunctionTree(tuple(dag.names), tuple(cpts.cardinalities), cliques, edges, seps, assignment)
    # BFS from clique 0 fixes message order
    order, up, seen = [0], [-1] * len(cliques), {0}
    k = 0
    while k < len(order):
        i = order[k]
        for j in sorted(jt.neighbours(i)):
            if j not in seen:
                seen.add(j)
                up[j] = i
                order.append(j)
        k += 1
    jt.order, jt.up = order, up
    jt.set_potentials(cpts)
    return jt


# --------------------------------------------------------------- propagation


@dataclass
class Propagation:
    jt: JunctionTree
    beliefs: list[np.ndarray]  # normalized clique marginals given the evidence
    log_evidence: float
    evidence: dict[int, int]

    def marginal(self, node: int | str) -> np.ndarray:
        v = node if isinstance(node, (int, np.integer)) else self.jt.names.index(node)
        i = self.jt.home_clique(v)
        return _einsum([(self.jt.cliques[i], self.beliefs[i])], (v,))

    def marginals(self) -> dict[str, np.ndarray]:
        return {n: self.marginal(i) for i, n in enumerate(self.jt.names)}

    def family_marginal(self, vars_: Sequence[int]) -> np.ndarray:
        """Joint posterior over ``vars_`` (must share a clique), axes in the given order."""
        s = set(vars_)
        i = min((len(c), k) for k, c in enumerate(self.jt.cliques) if s <= set(c))[1]
        return _einsum([(self.jt.cliques[i], self.beliefs[i])], tuple(vars_))


def _normalize_evidence(jt: JunctionTree, evidence: Mapping) -> dict[int, int]:
    ev = {}
    for k, s in evidence.items():
        v = k if isinstance(k, (int, np.integer)) else jt.names.index(k)
        s = int(s)
        if not 0 <= s < jt.cardinalities[v]:
            raise ValueError(f"state {s} out of range for {jt.names[v]}")
        ev[int(v)] = s
    return ev


def propagate(jt: JunctionTree, evidence: Mapping | None = None) -> Propagation:
    """Calibrate the tree under hard evidence {node: 0-based state}.

    Raises :class:`ImpossibleEvidenceError` when P(evidence) = 0.
    """
    ev = _normalize_evidence(jt, evidence or {})
    pots = []
    for i, c in enumerate(jt.cliques):
        p = jt.potentials[i]
        ops = [(c, p)]
        for v, s in ev.items():
            if v in c and jt.home_clique(v) == i:
                ind = np.zeros(jt.cardinalities[v])
                ind[s] = 1.0
                ops.append(((v,), ind))
        pots.append(_einsum(ops, c) if len(ops) > 1 else p)

    n = len(jt.cliques)
    msg: dict[tuple[int, int], np.ndarray] = {}
    log_scale = 0.0

    def send(i, j):
        ops = [(jt.cliques[i], pots[i])]
        for k in jt.neighbours(i):
            if k != j:
                ops.append((jt.separator(k, i), msg[(k, i)]))
        return _einsum(ops, jt.separator(i, j))

    for i in reversed(jt.order[1:]):
        m = send(i, jt.up[i])
        s = float(m.sum())
        if s <= 0.0:
            raise ImpossibleEvidenceError("evidence has zero probability")
        msg[(i, jt.up[i])] = m / s
        log_scale += math.log(s)
    for i in jt.order[1:]:
        m = send(jt.up[i], i)
        s = float(m.sum())
        msg[(jt.up[i], i)] = m / s if s > 0 else m

    beliefs = []
    z_root = None
    for i in range(n):
        ops = [(jt.cliques[i], pots[i])] + [(jt.separator(k, i), msg[(k, i)]) for k in jt.neighbours(i)]
        b = _einsum(ops, jt.cliques[i]) if len(ops) > 1 else pots[i].copy()
        z = float(b.sum())
        if i == 0:
            z_root = z
        if z <= 0.0:
            raise ImpossibleEvidenceError("evidence has zero probability")
        beliefs.append(b / z)
    return Propagation(jt, beliefs, math.log(z_root) + log_scale, ev)


# ------------------------------------------------------------------------ EM


def _xlogy_sum(counts, table) -> float:
    # 0 * log 0 = 0
    return float(xlogy(counts, table).sum())


def _prior_term(cpts: CptSet, ess: float) -> float:
    total = 0.0
    for c in cpts.cpts:
        q, r = c.table.shape
        total += ess / (r * q) * float(np.log(c.table).sum())
    return total


@dataclass(frozen=True)
class EmResult:
    cpts: CptSet
    trace: tuple[float, ...]  # penalized: log-likelihood + Dirichlet log-prior term
    loglik: tuple[float, ...]  # observed-data log-likelihood
    iterations: int


def _as_evidence_rows(rows, names) -> list[dict[int, int]]:
    out = []
    for r in rows:
        d = {}
        for k, s in r.items():
            if s is None:
                continue
            v = k if isinstance(k, (int, np.integer)) else names.index(k)
            d[int(v)] = int(s)
        out.append(d)
    return out


def em_update(
    dag: Dag,
    cpts: CptSet,
    rows: Sequence[Mapping],
    ess: float = 1.0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> EmResult:
    """EM for CPTs from partially observed rows ({node: state}, unobserved omitted).

    E-step: expected family counts from junction-tree posteriors (families
    fully observed in a row take hard counts). M-step: the same smoothed
    estimator as :func:`dbnlc.params.fit_map`. Stops when the penalized
    log-likelihood gains less than ``tol``.
    """
    cpts.check_dag(dag)
    names = tuple(dag.names)
    n = dag.n_nodes
    ev_rows = _as_evidence_rows(rows, names)
    for i, r in enumerate(ev_rows):
        if not r:
            raise ValueError(f"row {i} observes no node")
    cards = cpts.cardinalities
    complete = [r for r in ev_rows if len(r) == n]
    partial = [(i, r) for i, r in enumerate(ev_rows) if len(r) < n]
    fams = [tuple(ps) + (v,) for v, ps in enumerate(dag.parents)]

    hard = []
    if complete:
        codes = np.array([[r[v] for v in range(n)] for r in complete], dtype=np.int64)
        hard = [family_counts(codes, cards, v, dag.parents[v]) for v in range(n)]
    else:
        hard = [np.zeros(c.table.shape) for c in cpts.cpts]

    jt = build_junction_tree(dag, cpts) if partial else None

    def e_step(cur: CptSet):
        counts = [h.copy() for h in hard]
        ll = sum(_xlogy_sum(hard[v], cur[v].table) for v in range(n))
        if partial:
            jt.set_potentials(cur)
        for i, r in partial:
            try:
                prop = propagate(jt, r)
            except ImpossibleEvidenceError:
                raise ImpossibleEvidenceError(f"row {i} has zero probability under the model") from None
            ll += prop.log_evidence
            for v in range(n):
                fam = fams[v]
                if all(u in r for u in fam):
                    j = np.ravel_multi_index(tuple(r[u] for u in fam[:-1]), cur[v].parent_cardinalities) if fam[:-1] else 0
                    counts[v][j, r[v]] += 1.0
                else:
                    counts[v] += prop.family_marginal(fam).reshape(counts[v].shape)
        return counts, ll

    cur = cpts
    lls, trace = [], []
    counts, ll = e_step(cur)
    lls.append(ll)
    trace.append(ll + _prior_term(cur, ess))
    it = 0
    while it < max_iter:
        nxt = cpts_from_counts(dag, cards, counts, ess)
        it += 1
        cur = nxt
        if not partial:
            # hard counts do not depend on the parameters: one M-step is the fixed point
            ll = sum(_xlogy_sum(hard[v], cur[v].table) for v in range(n))
            lls.append(ll)
            trace.append(ll + _prior_term(cur, ess))
            break
        counts, ll = e_step(cur)
        lls.append(ll)
        trace.append(ll + _prior_term(cur, ess))
        if trace[-1] - trace[-2] < tol:
            break
    return EmResult(cur, tuple(trace), tuple(lls), it)


# ------------------------------------------------------------------ sampling


def sample(dag: Dag, cpts: CptSet, n: int, seed: int = 0):
    """Ancestral sampling; returns a TwoSliceDataset for two-slice DAGs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cpts.check_dag(dag)
    rng = np.random.default_rng(seed)
    codes = np.zeros((n, dag.n_nodes), dtype=np.int64)
    for v in dag.topological_order():
        cpt = cpts[v]
        if cpt.parents:
            j = np.ravel_multi_index(tuple(codes[:, p] for p in cpt.parents), cpt.parent_cardinalities)
        else:
            j = np.zeros(n, dtype=np.int64)
        cum = np.cumsum(cpt.table, axis=1)[j]
        u = rng.random(n)
        codes[:, v] = np.minimum((u[:, None] >= cum).sum(1), cpt.cardinality - 1)
    if isinstance(dag, TwoSliceDag):
        N = dag.n_per_slice
        prov = tuple((f"sample{i}", 2) for i in range(n))
        return TwoSliceDataset(dag.base, tuple(cpts.cardinalities[:N]), codes, prov)
    return DiscreteTable(tuple(dag.names), tuple(cpts.cardinalities), codes)


# ---------------------------------------------------------------- forecasting


@dataclass(frozen=True)
class Forecast:
    predictions: dict[str, float]
    posteriors: dict[str, np.ndarray]
    em_iterations: int = 0


def _slice_index(dag: TwoSliceDag, base: str, slice_: int) -> int:
    return slice_ * dag.n_per_slice + dag.base.index(base)


def forecast(
    dag: TwoSliceDag,
    cpts: CptSet,
    prev_slice: Mapping[str, int],
    curr_partial: Mapping[str, int],
    qmap: Mapping[str, QuantizationEntry],
    targets: Sequence[str] = RATINGS,
    train: TwoSliceDataset | None = None,
    ess: float = 1.0,
    em_max_iter: int = 20,
    em_tol: float = 1e-6,
) -> Forecast:
    """Predict slice-t ``targets`` given a fully observed slice t-1 and the
    remaining slice-t nodes. States are 0-based codes keyed by base name.

    With ``train`` given, the engine is first refreshed by EM over the
    training rows plus this partially observed row (starting from ``cpts``).
    """
    base = dag.base
    missing_prev = [b for b in base if b not in prev_slice]
    if missing_prev:
        raise ValueError(f"previous slice lacks evidence for {missing_prev}")
    need = [b for b in base if b not in targets]
    missing_curr = [b for b in need if b not in curr_partial]
    if missing_curr:
        raise ValueError(f"current slice lacks evidence for {missing_curr}")
    ev = {_slice_index(dag, b, 0): int(s) for b, s in prev_slice.items()}
    ev.update({_slice_index(dag, b, 1): int(curr_partial[b]) for b in need})

    iters = 0
    if train is not None:
        rows = [dict(enumerate(map(int, r))) for r in train.codes]
        rows.append(ev)
        res = em_update(dag, cpts, rows, ess=ess, max_iter=em_max_iter, tol=em_tol)
        cpts, iters = res.cpts, res.iterations
    prop = propagate(build_junction_tree(dag, cpts), ev)
    post = {t: prop.marginal(_slice_index(dag, t, 1)) for t in targets}
    preds = {t: dequantize_expectation(post[t], qmap[t]) for t in targets}
    return Forecast(preds, post, iters)


def forecast_many(jobs: Sequence[dict], workers: int = 1) -> list[Forecast]:
    """Run independent forecasts (kwargs dicts); output order follows input order."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda kw: forecast(**kw), jobs))
    return [forecast(**kw) for kw in jobs]


@dataclass(frozen=True)
class ProfileTrajectory:
    steps: tuple[dict[str, float], ...]
    warnings: tuple[str, ...] = ()


def forecast_profile(
    dag: TwoSliceDag,
    cpts: CptSet,
    profile: Mapping[str, float],
    horizon: int,
    qmap: Mapping[str, QuantizationEntry],
    targets: Sequence[str] = RATINGS,
) -> ProfileTrajectory:
    """Roll the network forward for a new participant.

    ``profile`` gives real values for the layer-1 nodes (personality and
    wellbeing), held fixed over time. Step 1 uses slice t-1 with that evidence
    alone; each later step observes the previous step's per-node posterior
    modes as slice t-1.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    warns = []
    levels = {}
    for name, x in profile.items():
        e = qmap[name]
        if not e.in_training_range(x):
            msg = f"{name}={x} outside training range [{e.lower}, {e.upper}]; clamped to nearest bin"
            log.warning(msg)
            warns.append(msg)
        levels[name] = e.level(x) - 1
    jt = build_junction_tree(dag, cpts)
    steps = []
    ev = {_slice_index(dag, b, 0): s for b, s in levels.items()}
    prop = propagate(jt, ev)
    steps.append({t: dequantize_expectation(prop.marginal(_slice_index(dag, t, 0)), qmap[t]) for t in targets})
    prev = {b: int(np.argmax(prop.marginal(_slice_index(dag, b, 0)))) for b in dag.base}
    for _ in range(1, horizon):
        ev = {_slice_index(dag, b, 0): s for b, s in prev.items()}
        ev.update({_slice_index(dag, b, 1): s for b, s in levels.items()})
        prop = propagate(jt, ev)
        steps.append({t: dequantize_expectation(prop.marginal(_slice_index(dag, t, 1)), qmap[t]) for t in targets})
        prev = {b: int(np.argmax(prop.marginal(_slice_index(dag, b, 1)))) for b in dag.base}
    return ProfileTrajectory(tuple(steps), tuple(warns))
