"""MMHC structure learning for two-slice networks.

MMPC (G^2 independence tests) prunes the candidate neighbours of each node,
then greedy hill climbing over add/delete/reverse moves maximizes the BDeu
score inside that skeleton and the layer/slice constraints.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln
from scipy.stats import chi2

from .core import SLICE_SUFFIXES, NodeSpec, slice_names

# ----------------------------------------------------------------------- DAGs


@dataclass(frozen=True)
class Dag:
    names: tuple[str, ...]
    parents: tuple[tuple[int, ...], ...]  # sorted parent indices per node

    def __post_init__(self):
        if len(self.parents) != len(self.names):
            raise ValueError("one parent tuple per node required")
        object.__setattr__(self, "parents", tuple(tuple(sorted(p)) for p in self.parents))
        if self.topological_order() is None:
            raise ValueError("graph contains a cycle")

    @property
    def n_nodes(self) -> int:
        return len(self.names)

    def index(self, node: int | str) -> int:
        return node if isinstance(node, (int, np.integer)) else self.names.index(node)

    def edges(self) -> list[tuple[int, int]]:
        return sorted((p, c) for c, ps in enumerate(self.parents) for p in ps)

    def topological_order(self) -> list[int] | None:
        """Kahn's algorithm, smallest index first; None if cyclic."""
        indeg = [len(p) for p in self.parents]
        children = [[] for _ in self.names]
        for c, ps in enumerate(self.parents):
            for p in ps:
                children[p].append(c)
        ready = sorted(i for i, d in enumerate(indeg) if d == 0)
        order = []
        while ready:
            i = ready.pop(0)
            order.append(i)
            for c in children[i]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
                    ready.sort()
        return order if len(order) == len(self.names) else None

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes), dtype=int)
        for p, c in self.edges():
            a[p, c] = 1
        return a

    def with_parents(self, parents: Sequence[Sequence[int]]) -> "Dag":
        return Dag(self.names, tuple(tuple(p) for p in parents))


@dataclass(frozen=True)
class TwoSliceDag(Dag):
    """Nodes 0..N-1 are slice t-1, N..2N-1 slice t (same base order)."""

    n_per_slice: int = 0

    def __post_init__(self):
        super().__post_init__()
        n = self.n_per_slice
        if 2 * n != len(self.names):
            raise ValueError("a two-slice DAG has 2N nodes")
        for p, c in self.edges():
            if c < n and p >= n:
                raise ValueError(f"edge {self.names[p]} -> {self.names[c]} points back in time")

    @property
    def base(self) -> tuple[str, ...]:
        return tuple(n[: -len(SLICE_SUFFIXES[0])] for n in self.names[: self.n_per_slice])

    def within_edges(self) -> list[tuple[int, int]]:
        """Base-index pairs of slice-t internal edges."""
        n = self.n_per_slice
        return [(p - n, c - n) for p, c in self.edges() if p >= n and c >= n]

    def between_edges(self) -> list[tuple[int, int]]:
        n = self.n_per_slice
        return [(p, c - n) for p, c in self.edges() if p < n <= c]

    def within_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_per_slice,) * 2, dtype=int)
        for p, c in self.within_edges():
            a[p, c] = 1
        return a

    def between_adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_per_slice,) * 2, dtype=int)
        for p, c in self.between_edges():
            a[p, c] = 1
        return a

    @classmethod
    def from_slice_t_parents(cls, base: Sequence[str], parents_t: Sequence[Iterable[int]]) -> "TwoSliceDag":
        """Build from slice-t families (global indices); within edges are copied to slice t-1."""
        n = len(base)
        parents: list[tuple[int, ...]] = []
        for c in range(n):
            parents.append(tuple(p - n for p in parents_t[c] if p >= n))
        for c in range(n):
            parents.append(tuple(parents_t[c]))
        return cls(slice_names(base), tuple(parents), n)


# ----------------------------------------------------------------- constraints


@dataclass(frozen=True)
class ConstraintSet:
    """``allowed[p, c]`` says whether the edge p -> c may appear."""

    names: tuple[str, ...]
    allowed: np.ndarray
    # > 0 when slice t-1 edges are copies of slice-t within edges
    n_per_slice: int = 0

    def __post_init__(self):
        self.allowed.setflags(write=False)

    def permits(self, p: int, c: int) -> bool:
        return bool(self.allowed[p, c])

    def neighbours_allowed(self, i: int) -> list[int]:
        return [j for j in range(len(self.names)) if j != i and (self.allowed[i, j] or self.allowed[j, i])]

    def violations(self, dag: Dag) -> list[tuple[str, str]]:
        """Edges the constraints forbid; slice t-1 edges are judged as their slice-t copies."""
        n = self.n_per_slice
        bad = []
        for p, c in dag.edges():
            ok = self.allowed[p + n, c + n] if n and c < n else self.allowed[p, c]
            if not ok:
                bad.append((dag.names[p], dag.names[c]))
        return bad

    @classmethod
    def unconstrained(cls, names: Sequence[str]) -> "ConstraintSet":
        n = len(names)
        return cls(tuple(names), ~np.eye(n, dtype=bool))

    @classmethod
    def two_slice(
        cls,
        schema: Sequence[NodeSpec],
        exogenous: Iterable[str] = (),
        self_parent_only: Iterable[str] = (),
        forbidden: Iterable[tuple[str, str]] = (),
    ) -> "ConstraintSet":
        """Search-space constraints for the slice-t families.

        * no edge ends in slice t-1 (its within-slice edges are copied later);
        * within slice t, parent layer <= child layer;
        * between slices, only t-1 -> t;
        * ``exogenous`` slice-t nodes get no parents at all;
        * ``self_parent_only`` slice-t nodes may only have their own t-1 copy;
        * ``forbidden`` lists extra (parent, child) full node names.
        """
        n = len(schema)
        names = slice_names([s.name for s in schema])
        layer = [s.layer for s in schema]
        exo = set(exogenous)
        spo = set(self_parent_only)
        base = [s.name for s in schema]
        for name in exo | spo:
            if name not in base:
                raise KeyError(f"unknown node {name!r} in constraints")
        allowed = np.zeros((2 * n, 2 * n), dtype=bool)
        for c in range(n):
            cname = base[c]
            if cname in exo:
                continue
            ci = n + c
            if cname in spo:
                allowed[c, ci] = True
                continue
            for p in range(n):
                allowed[p, ci] = True  # between-slice
                if p != c and layer[p] <= layer[c]:
                    allowed[n + p, ci] = True
        for p, c in forbidden:
            allowed[names.index(p), names.index(c)] = False
        return cls(names, allowed, n)


# ------------------------------------------------------------------- counting


def _codes_cards(data):
    return np.asarray(data.codes), tuple(int(c) for c in data.node_cardinalities)


def family_counts(codes: np.ndarray, cards: Sequence[int], node: int, parents: Sequence[int]) -> np.ndarray:
    """(q, r) counts; row = parent configuration, C order (last parent fastest)."""
    r = cards[node]
    pc = [cards[p] for p in parents]
    q = int(np.prod(pc)) if pc else 1
    if codes.shape[0] == 0:
        return np.zeros((q, r))
    j = np.ravel_multi_index(tuple(codes[:, p] for p in parents), pc) if parents else np.zeros(codes.shape[0], dtype=np.int64)
    return np.bincount(j * r + codes[:, node], minlength=q * r).reshape(q, r).astype(float)


# ------------------------------------------------------------------------- G2


@dataclass(frozen=True)
class G2Result:
    statistic: float
    dof: int
    pvalue: float
    log_pvalue: float

    @property
    def informative(self) -> bool:
        return self.dof > 0

    def independent(self, alpha: float) -> bool:
        return not self.informative or self.pvalue >= alpha

    @property
    def association(self) -> float:
        return -self.log_pvalue if self.informative else 0.0


UNINFORMATIVE = G2Result(0.0, 0, 1.0, 0.0)


def _g2(codes, cards, x, y, z) -> G2Result:
    n = codes.shape[0]
    if n == 0:
        return UNINFORMATIVE
    rx, ry = cards[x], cards[y]
    if z:
        zc = np.ravel_multi_index(tuple(codes[:, k] for k in z), [cards[k] for k in z])
        _, zi = np.unique(zc, return_inverse=True)
        nz = int(zi.max()) + 1
    else:
        zi = np.zeros(n, dtype=np.int64)
        nz = 1
    idx = (zi * rx + codes[:, x]) * ry + codes[:, y]
    nxyz = np.bincount(idx, minlength=nz * rx * ry).reshape(nz, rx, ry).astype(float)
    nxz = nxyz.sum(2)
    nyz = nxyz.sum(1)
    nz_tot = nxz.sum(1)
    expected = nxz[:, :, None] * nyz[:, None, :] / nz_tot[:, None, None]
    pos = nxyz > 0
    g2 = 2.0 * float((nxyz[pos] * np.log(nxyz[pos] / expected[pos])).sum())
    # levels absent within a stratum carry no degrees of freedom
    lx = (nxz > 0).sum(1) - 1
    ly = (nyz > 0).sum(1) - 1
    dof = int(np.maximum(lx * ly, 0).sum())
    if dof == 0:
        return UNINFORMATIVE
    g2 = max(g2, 0.0)
    return G2Result(g2, dof, float(chi2.sf(g2, dof)), float(chi2.logsf(g2, dof)))


def g2_test(data, x, y, z: Iterable = ()) -> G2Result:
    """Likelihood-ratio independence test of x and y given the set z.

    ``data`` is any object with ``codes``, ``node_cardinalities`` and
    ``names``; nodes may be given by index or name. With no populated
    stratum carrying degrees of freedom, the uninformative result (p = 1)
    is returned.
    """
    codes, cards = _codes_cards(data)
    ix = _idx(data, x)
    iy = _idx(data, y)
    iz = sorted(_idx(data, k) for k in z)
    if ix == iy:
        raise ValueError("x and y must differ")
    if ix in iz or iy in iz:
        raise ValueError("x and y may not be in the conditioning set")
    return _g2(codes, cards, ix, iy, tuple(iz))


def _idx(data, node) -> int:
    if isinstance(node, (int, np.integer)):
        return int(node)
    return list(data.names).index(node)


class _CITester:
    def __init__(self, codes, cards):
        self.codes = codes
        self.cards = cards
        self.cache: dict = {}
        self.calls = 0

    def __call__(self, x, y, z) -> G2Result:
        key = (min(x, y), max(x, y), tuple(sorted(z)))
        res = self.cache.get(key)
        if res is None:
            self.calls += 1
            res = _g2(self.codes, self.cards, key[0], key[1], key[2])
            self.cache[key] = res
        return res


def _subsets(items: Sequence[int], max_size: int, must: int | None = None):
    for k in range(0, min(max_size, len(items)) + 1):
        for s in itertools.combinations(items, k):
            if must is None or must in s:
                yield s


def _mmpc_one(target, candidates, test, alpha, max_cond):
    cpc: list[int] = []
    # running (min association, pvalue at that min) over subsets tried so far
    best: dict[int, tuple[float, bool]] = {}
    remaining = list(candidates)
    for x in remaining:
        r = test(x, target, ())
        best[x] = (r.association, r.independent(alpha))
    remaining = [x for x in remaining if not best[x][1]]
    while remaining:
        pick = max(remaining, key=lambda x: (best[x][0], -x))
        cpc.append(pick)
        remaining.remove(pick)
        survivors = []
        for x in remaining:
            assoc, indep = best[x]
            for s in _subsets(cpc, max_cond, must=pick):
                r = test(x, target, s)
                if r.independent(alpha):
                    indep = True
                    break
                assoc = min(assoc, r.association)
            best[x] = (assoc, indep)
            if not indep:
                survivors.append(x)
        remaining = survivors
    # backward phase
    for x in list(cpc):
        others = [c for c in cpc if c != x]
        for s in _subsets(others, max_cond):
            if test(x, target, s).independent(alpha):
                cpc.remove(x)
                break
    return cpc


def mmpc(data, constraints: ConstraintSet | None = None, alpha: float = 0.05, max_cond: int = 3) -> list[set[int]]:
    """Candidate parents-and-children per node, symmetry corrected (AND rule)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    codes, cards = _codes_cards(data)
    n = len(cards)
    if constraints is None:
        constraints = ConstraintSet.unconstrained(tuple(data.names))
    test = _CITester(codes, cards)
    pc = []
    for t in range(n):
        cand = constraints.neighbours_allowed(t)
        pc.append(set(_mmpc_one(t, cand, test, alpha, max_cond)))
    return [{x for x in pc[t] if t in pc[x]} for t in range(n)]


# ---------------------------------------------------------------------- BDeu


def bdeu_from_counts(counts: np.ndarray, ess: float) -> float:
    if ess <= 0:
        raise ValueError("ess must be positive")
    q, r = counts.shape
    a_jk = ess / (r * q)
    a_j = ess / q
    nj = counts.sum(1)
    return float(
        (gammaln(a_j) - gammaln(a_j + nj)).sum() + (gammaln(a_jk + counts) - gammaln(a_jk)).sum()
    )


def bdeu_score(data, node, parents: Iterable = (), ess: float = 1.0) -> float:
    """BDeu log marginal likelihood of one family (natural log)."""
    codes, cards = _codes_cards(data)
    i = _idx(data, node)
    ps = sorted(_idx(data, p) for p in parents)
    return bdeu_from_counts(family_counts(codes, cards, i, ps), ess)


def total_score(data, dag: Dag, ess: float = 1.0) -> float:
    return sum(bdeu_score(data, c, ps, ess) for c, ps in enumerate(dag.parents))


# -------------------------------------------------------------- hill climbing


ADD, DELETE, REVERSE = 0, 1, 2


def _reaches(children: list[set[int]], src: int, dst: int, skip: tuple[int, int] | None = None) -> bool:
    stack, seen = [src], {src}
    while stack:
        u = stack.pop()
        for v in children[u]:
            if skip is not None and (u, v) == skip:
                continue
            if v == dst:
                return True
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return False


class _FamilyScorer:
    def __init__(self, codes, cards, ess):
        self.codes, self.cards, self.ess = codes, cards, ess
        self.cache: dict = {}

    def __call__(self, node: int, parents: frozenset) -> float:
        key = (node, parents)
        s = self.cache.get(key)
        if s is None:
            s = bdeu_from_counts(family_counts(self.codes, self.cards, node, sorted(parents)), self.ess)
            self.cache[key] = s
        return s


def legal_moves(parents: list[set[int]], skeleton: Sequence[set[int]], constraints: ConstraintSet):
    """All single-edge moves keeping the graph acyclic and within constraints,
    in deterministic (kind, u, v) order."""
    n = len(parents)
    children = [set() for _ in range(n)]
    for c in range(n):
        for p in parents[c]:
            children[p].add(c)
    moves = []
    for u in range(n):
        for v in sorted(skeleton[u]):
            if u in parents[v] or v in parents[u]:
                continue
            if constraints.permits(u, v) and not _reaches(children, v, u):
                moves.append((ADD, u, v))
    for v in range(n):
        for u in sorted(parents[v]):
            moves.append((DELETE, u, v))
    for v in range(n):
        for u in sorted(parents[v]):
            if v in skeleton[u] and constraints.permits(v, u) and not _reaches(children, u, v, skip=(u, v)):
                moves.append((REVERSE, u, v))
    moves.sort()
    return moves


def _delta(move, parents, score):
    kind, u, v = move
    pv = frozenset(parents[v])
    if kind == ADD:
        return score(v, pv | {u}) - score(v, pv)
    if kind == DELETE:
        return score(v, pv - {u}) - score(v, pv)
    pu = frozenset(parents[u])
    return (score(v, pv - {u}) - score(v, pv)) + (score(u, pu | {v}) - score(u, pu))


def hill_climb(
    data,
    skeleton: Sequence[set[int]] | None = None,
    constraints: ConstraintSet | None = None,
    ess: float = 1.0,
    max_iter: int = 10_000,
    start: Sequence[Iterable[int]] | None = None,
) -> Dag:
    """Greedy BDeu search from the empty graph (or ``start``).

    Each step takes the best strictly improving legal move; ties keep the
    first move in (kind, parent, child) order with add < delete < reverse.
    """
    codes, cards = _codes_cards(data)
    n = len(cards)
    names = tuple(data.names)
    if constraints is None:
        constraints = ConstraintSet.unconstrained(names)
    if skeleton is None:
        skeleton = [set(j for j in range(n) if j != i) for i in range(n)]
    for i in range(n):
        for j in skeleton[i]:
            if i not in skeleton[j]:
                raise ValueError("skeleton must be symmetric")
    score = _FamilyScorer(codes, cards, ess)
    parents = [set(p) for p in start] if start is not None else [set() for _ in range(n)]
    for _ in range(max_iter):
        best_move, best_delta = None, 1e-10
        for mv in legal_moves(parents, skeleton, constraints):
            d = _delta(mv, parents, score)
            if d > best_delta:
                best_move, best_delta = mv, d
        if best_move is None:
            break
        kind, u, v = best_move
        if kind == ADD:
            parents[v].add(u)
        elif kind == DELETE:
            parents[v].discard(u)
        else:
            parents[v].discard(u)
            parents[u].add(v)
    return Dag(names, tuple(tuple(sorted(p)) for p in parents))


def learn_structure(
    data,
    constraints: ConstraintSet,
    alpha: float = 0.05,
    max_cond: int = 3,
    ess: float = 1.0,
) -> TwoSliceDag:
    """MMPC then hill climbing on the slice-t families; within-slice edges are
    replicated into slice t-1 so both slices share one structure."""
    skeleton = mmpc(data, constraints, alpha, max_cond)
    dag = hill_climb(data, skeleton, constraints, ess)
    base = tuple(data.base)
    n = len(base)
    for p, c in dag.edges():
        if c < n:
            raise AssertionError("constraints let an edge end in slice t-1")
    return TwoSliceDag.from_slice_t_parents(base, dag.parents[n:])


# --------------------------------------------------------------------- export


def export_dot(dag: TwoSliceDag) -> str:
    """DOT text: slice t-1 in red, slice t in blue, between-slice edges dashed."""
    n = dag.n_per_slice
    out = ["digraph dbn {", "  rankdir=LR;", "  node [shape=ellipse, style=filled];"]
    groups = (("prev", "t-1", "#f4cccc", "#cc0000"), ("curr", "t", "#cfe2f3", "#1155cc"))
    for s, (tag, label, fill, line) in enumerate(groups):
        out.append(f"  subgraph cluster_{tag} {{")
        out.append(f'    label="slice {label}"; color="{line}";')
        for i in range(n):
            name = dag.names[s * n + i]
            out.append(f'    "{name}" [label="{dag.base[i]}\\n({label})", fillcolor="{fill}", color="{line}"];')
        out.append("  }")
    for p, c in dag.edges():
        style = "dashed" if p < n <= c else "solid"
        out.append(f'  "{dag.names[p]}" -> "{dag.names[c]}" [style={style}];')
    out.append("}")
    return "\n".join(out) + "\n"


def write_adjacency(matrix: np.ndarray, base: Sequence[str], path: str | Path) -> None:
    """Rows are parents, columns children."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parent", *base])
        for name, row in zip(base, matrix):
            w.writerow([name, *map(int, row)])


def dag_to_dict(dag: TwoSliceDag) -> dict:
    return {
        "base": list(dag.base),
        "names": list(dag.names),
        "parents": {dag.names[c]: [dag.names[p] for p in ps] for c, ps in enumerate(dag.parents)},
    }


def dag_from_dict(d: dict) -> TwoSliceDag:
    names = tuple(d["names"])
    parents = tuple(tuple(names.index(p) for p in d["parents"][n]) for n in names)
    return TwoSliceDag(names, parents, len(d["base"]))


def structural_hamming(a: Dag, b: Dag, skeleton_only: bool = False, nodes: Iterable[int] | None = None) -> int:
    """Edge insertions + deletions (+ reversals) turning ``a`` into ``b``.

    ``nodes`` restricts the comparison to families of those child nodes.
    """
    keep = set(range(a.n_nodes)) if nodes is None else set(nodes)
    ea = {(p, c) for p, c in a.edges() if c in keep}
    eb = {(p, c) for p, c in b.edges() if c in keep}
    ua = {frozenset(e) for e in ea}
    ub = {frozenset(e) for e in eb}
    d = len(ua ^ ub)
    if skeleton_only:
        return d
    return d + sum(1 for p, c in ea if (c, p) in eb)
