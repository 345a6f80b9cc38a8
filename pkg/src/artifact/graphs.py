"""Multigraphs: 2-edge-connectedness, ear decompositions, tree families
and the Brascamp-Lieb exponents built from them.

A multigraph is a vertex list V together with a multiplicity n_e >= 0 for
every unordered pair e of distinct vertices.  Exponents are exact
``Fraction`` objects.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .partitions import BoundedSizeError

MAX_VERTICES = 8
MAX_ENUM_VERTICES = 6


class PreconditionError(ValueError):
    pass


Pair = Tuple[Hashable, Hashable]


@dataclass(frozen=True, init=False)
class MultiGraph:
    vertices: Tuple[Hashable, ...]
    mult: Tuple[int, ...]  # one entry per pair, in ``pairs`` order

    def __init__(self, vertices: Sequence[Hashable], multiplicity=None):
        vertices = tuple(vertices)
        if len(set(vertices)) != len(vertices):
            raise PreconditionError("vertex labels must be distinct")
        pairs = list(combinations(vertices, 2))
        index = {frozenset(p): i for i, p in enumerate(pairs)}
        mult = [0] * len(pairs)
        if multiplicity is None:
            multiplicity = {}
        if isinstance(multiplicity, dict):
            for e, k in multiplicity.items():
                e = tuple(e)
                if len(e) != 2 or e[0] == e[1]:
                    raise PreconditionError(f"loops and hyperedges are not allowed: {e!r}")
                key = frozenset(e)
                if key not in index:
                    raise PreconditionError(f"edge {e!r} not on the vertex set")
                mult[index[key]] += int(k)
        else:
            mult = [int(k) for k in multiplicity]
            if len(mult) != len(pairs):
                raise PreconditionError("multiplicity vector has the wrong length")
        if any(k < 0 for k in mult):
            raise PreconditionError("negative multiplicity")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "mult", tuple(mult))

    @property
    def pairs(self) -> List[Pair]:
        return list(combinations(self.vertices, 2))

    def n(self, u, v) -> int:
        if u == v:
            return 0
        i, j = sorted((self.vertices.index(u), self.vertices.index(v)))
        k = len(self.vertices)
        return self.mult[i * k - i * (i + 1) // 2 + (j - i - 1)]

    @property
    def edges(self) -> List[Pair]:
        """E_G: pairs with positive multiplicity."""
        return [p for p, k in zip(self.pairs, self.mult) if k > 0]

    def as_dict(self) -> Dict[Pair, int]:
        return {p: k for p, k in zip(self.pairs, self.mult) if k > 0}

    @property
    def total(self) -> int:
        return sum(self.mult)

    def __str__(self):
        es = ", ".join(f"{u}-{v}" + (f"x{k}" if k > 1 else "") for (u, v), k in self.as_dict().items())
        return f"G(V={list(self.vertices)}, E=[{es}])"


def _cut_incidence(k: int) -> np.ndarray:
    """Rows: proper vertex subsets W containing vertex 0; columns: pairs."""
    pairs = list(combinations(range(k), 2))
    rows = []
    for mask in range(1, 1 << k):
        if not mask & 1 or mask == (1 << k) - 1:
            continue
        rows.append([int((mask >> a & 1) != (mask >> b & 1)) for a, b in pairs])
    return np.array(rows, dtype=np.int64).reshape(-1, len(pairs))


def _check_size(G: MultiGraph, cap: int = MAX_VERTICES):
    if len(G.vertices) > cap:
        raise BoundedSizeError(f"at most {cap} vertices")


def cut_values(G: MultiGraph) -> np.ndarray:
    A = _cut_incidence(len(G.vertices))
    return A @ np.array(G.mult, dtype=np.int64)


def is_two_edge_connected(G: MultiGraph) -> bool:
    _check_size(G)
    if len(G.vertices) <= 1:
        return True
    return bool(np.all(cut_values(G) >= 2))


def is_minimal_two_edge_connected(G: MultiGraph) -> bool:
    if not is_two_edge_connected(G):
        return False
    if len(G.vertices) <= 1:
        return True
    A = _cut_incidence(len(G.vertices))
    tight = A[cut_values(G) == 2]
    covered = tight.any(axis=0) if len(tight) else np.zeros(A.shape[1], bool)
    return all(covered[i] for i, k in enumerate(G.mult) if k > 0)


def minimal_2ec_graphs(vertices: Sequence[Hashable], chunk: int = 1 << 20) -> List[MultiGraph]:
    """All minimally 2-edge-connected multigraphs with multiplicities in {0,1,2}.

    Candidates are scanned in base-3 order (first pair most significant),
    vectorised over chunks; those with more than 2(|V|-1) edges are
    discarded up front since no minimal graph has that many.
    """
    vertices = tuple(vertices)
    k = len(vertices)
    if k > MAX_ENUM_VERTICES:
        raise BoundedSizeError(f"enumeration limited to {MAX_ENUM_VERTICES} vertices")
    if k <= 1:
        return [MultiGraph(vertices)]
    P = k * (k - 1) // 2
    A = _cut_incidence(k)
    weights = 3 ** np.arange(P - 1, -1, -1, dtype=np.int64)
    out = []
    total = 3 ** P
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        n = (idx[:, None] // weights[None, :]) % 3
        n = n[n.sum(axis=1) <= 2 * (k - 1)]
        if not len(n):
            continue
        vals = n @ A.T
        n = n[np.all(vals >= 2, axis=1)]
        vals = vals[np.all(vals >= 2, axis=1)]
        tight_cover = ((vals == 2).astype(np.int64) @ A) > 0
        ok = np.all(tight_cover | (n == 0), axis=1)
        out.extend(MultiGraph(vertices, row.tolist()) for row in n[ok])
    return out


# ---------------------------------------------------------------------------
# ear decomposition

def _simple_cycles(G: MultiGraph) -> List[List[Hashable]]:
    """Vertex sequences of simple cycles of length >= 3, each listed once."""
    V = G.vertices
    adj = {v: [w for w in V if w != v and G.n(v, w) > 0] for v in V}
    order = {v: i for i, v in enumerate(V)}
    found = []

    def dfs(start, path, seen):
        last = path[-1]
        for w in adj[last]:
            if w == start and len(path) >= 3:
                if order[path[1]] < order[path[-1]]:
                    found.append(list(path))
            elif w not in seen and order[w] > order[start]:
                seen.add(w)
                path.append(w)
                dfs(start, path, seen)
                path.pop()
                seen.remove(w)

    for s in V:
        dfs(s, [s], {s})
    return found


def _cycle_graph(G: MultiGraph, cyc: Sequence[Hashable]) -> MultiGraph:
    if len(cyc) == 2:
        return MultiGraph(cyc, {tuple(cyc): 2})
    edges = {}
    for a, b in zip(cyc, list(cyc[1:]) + [cyc[0]]):
        edges[(a, b)] = 1
    return MultiGraph(sorted(cyc, key=G.vertices.index), edges)


def maximal_cycle(G: MultiGraph) -> MultiGraph:
    cycles = _simple_cycles(G)
    if cycles:
        best = max(cycles, key=len)  # first of maximal length: deterministic
        return _cycle_graph(G, best)
    for (u, v), k in zip(G.pairs, G.mult):
        if k >= 2:
            return _cycle_graph(G, [u, v])
    raise PreconditionError("graph has no cycle")


def _embed(G: MultiGraph, H: MultiGraph) -> np.ndarray:
    """Multiplicity vector of subgraph H in the pair indexing of G."""
    return np.array([H.n(u, v) if u in H.vertices and v in H.vertices else 0
                     for u, v in G.pairs], dtype=np.int64)


def ear_decomposition(G: MultiGraph) -> List[MultiGraph]:
    """Closed-ear decomposition G_0, ..., G_p of a 2-edge-connected multigraph.

    G_0 is a cycle of maximal length l0.  Each later ear starts with a
    remaining edge {u, v} with u already covered; if v is covered too the
    ear is that single edge, otherwise it is continued by a shortest path
    from v back to the covered set in the remaining graph.
    """
    _check_size(G)
    if len(G.vertices) < 2:
        raise PreconditionError("ear decomposition needs a non-trivial graph")
    if not is_two_edge_connected(G):
        raise PreconditionError("graph is not 2-edge-connected")
    V = G.vertices
    pairs = G.pairs
    pidx = {frozenset(p): i for i, p in enumerate(pairs)}
    ears = [maximal_cycle(G)]
    l0 = len(ears[0].vertices)
    rem = np.array(G.mult, dtype=np.int64) - _embed(G, ears[0])
    covered = set(ears[0].vertices)

    while rem.any():
        cand = [i for i, (u, v) in enumerate(pairs) if rem[i] > 0 and (u in covered or v in covered)]
        if not cand:
            raise AssertionError("remaining edges are disconnected from the covered set")
        i = cand[0]
        u, v = pairs[i]
        if u not in covered:
            u, v = v, u
        if v in covered:
            ears.append(MultiGraph(sorted((u, v), key=V.index), {(u, v): 1}))
            rem[i] -= 1
            continue
        r = rem.copy()
        r[i] -= 1
        prev = {v: None}
        q = deque([v])
        end = None
        while q:
            a = q.popleft()
            if a in covered:
                end = a
                break
            for b in V:
                if b != a and b not in prev and r[pidx[frozenset((a, b))]] > 0:
                    prev[b] = a
                    q.append(b)
        if end is None:
            raise AssertionError("no return path: graph is not 2-edge-connected")
        path = [end]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        path.reverse()  # v, ..., end
        walk = [u] + path
        edges: Dict[Pair, int] = {}
        for a, b in zip(walk[:-1], walk[1:]):
            key = tuple(sorted((a, b), key=V.index))
            edges[key] = edges.get(key, 0) + 1
        verts = sorted(set(walk), key=V.index)
        ear = MultiGraph(verts, edges)
        if end == u:
            assert len(walk) - 1 <= l0, "cycle ear longer than G_0"
        else:
            assert len(walk) - 1 < l0, "path ear not shorter than G_0"
        ears.append(ear)
        rem -= _embed(G, ear)
        covered.update(verts)

    assert covered == set(V), "ears do not cover the vertex set"
    assert np.array_equal(sum(_embed(G, H) for H in ears), np.array(G.mult)), "ears do not sum to G"
    return ears


# ---------------------------------------------------------------------------
# spanning trees and exponents

def _is_spanning_tree(G: MultiGraph, m: np.ndarray) -> bool:
    k = len(G.vertices)
    if m.sum() != k - 1 or np.any(m > 1):
        return False
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for (a, b), c in zip(combinations(range(k), 2), m):
        if c:
            ra, rb = find(a), find(b)
            if ra == rb:
                return False
            parent[ra] = rb
    return True


def spanning_tree_family(G: MultiGraph) -> Dict[Hashable, MultiGraph]:
    """Spanning trees T_v, one per vertex, following the ear construction.

    Each ear E_i loses one edge zeta_i(v), where zeta_i maps the sorted
    vertices of G_0 cyclically onto the sorted distinct edges of the ear.
    Vertices outside G_0 reuse the tree of the first vertex of G_0.
    """
    _check_size(G)
    if len(G.vertices) == 1:
        return {G.vertices[0]: MultiGraph(G.vertices)}
    ears = ear_decomposition(G)
    V0 = list(ears[0].vertices)
    pidx = {frozenset(p): i for i, p in enumerate(G.pairs)}
    n = np.array(G.mult, dtype=np.int64)
    trees = {}
    for j, v in enumerate(V0):
        m = np.zeros_like(n)
        for ear in ears:
            E = [pidx[frozenset(e)] for e in ear.edges]
            E.sort()
            emb = _embed(G, ear)
            emb[E[j % len(E)]] -= 1
            m += emb
        assert np.all(m <= n) and _is_spanning_tree(G, m), "tree construction failed"
        trees[v] = MultiGraph(G.vertices, m.tolist())
    for v in G.vertices:
        if v not in trees:
            trees[v] = trees[V0[0]]
    for i, k in enumerate(n):
        if k > 0:
            assert any(t.mult[i] <= k - 1 for t in trees.values()), "edge avoided by no tree"
    return {v: trees[v] for v in G.vertices}


@dataclass(frozen=True)
class HblExponents:
    vertices: Tuple[Hashable, ...]
    edges: Tuple[Pair, ...]
    n: Tuple[int, ...]
    alpha_v: Tuple[Fraction, ...]
    alpha_e: Tuple[Fraction, ...]
    beta_v: Tuple[Fraction, ...]
    beta_e: Tuple[Fraction, ...]
    p_e: Tuple[object, ...] = field(default=())
    q_e: Tuple[object, ...] = field(default=())

    def alpha_total(self) -> Fraction:
        return sum(self.alpha_v, Fraction(0)) + sum(self.alpha_e, Fraction(0))

    def to_json(self) -> dict:
        def enc(x):
            return "inf" if x == math.inf else str(x)

        return {
            "vertices": [str(v) for v in self.vertices],
            "edges": [[str(a), str(b)] for a, b in self.edges],
            "n": list(self.n),
            "alpha_v": [enc(x) for x in self.alpha_v],
            "alpha_e": [enc(x) for x in self.alpha_e],
            "beta_e": [enc(x) for x in self.beta_e],
            "p_e": [enc(x) for x in self.p_e],
            "q_e": [enc(x) for x in self.q_e],
        }


def _ratio(a: int, b: Fraction):
    return math.inf if b == 0 else Fraction(a) / b


def hbl_exponents(G: MultiGraph) -> HblExponents:
    k = len(G.vertices)
    if k < 2:
        raise PreconditionError("need at least two vertices")
    trees = spanning_tree_family(G)
    c = Fraction(k, 2 * (k - 1))
    beta_v = tuple(Fraction(1, k) for _ in G.vertices)
    tree_sum = np.sum([t.mult for t in trees.values()], axis=0)
    eidx = [i for i, m in enumerate(G.mult) if m > 0]
    beta_e = tuple(Fraction(int(tree_sum[i]), k) for i in eidx)
    alpha_v = tuple(c * b + (1 - c) for b in beta_v)
    alpha_e = tuple(c * b for b in beta_e)
    n = tuple(G.mult[i] for i in eidx)
    p_e = tuple(_ratio(m, a) for m, a in zip(n, alpha_e))
    q_e = tuple(_ratio(m, b) for m, b in zip(n, beta_e))
    res = HblExponents(G.vertices, tuple(G.pairs[i] for i in eidx), n,
                       alpha_v, alpha_e, beta_v, beta_e, p_e, q_e)
    assert res.alpha_total() == k, "exponent mass differs from |V|"
    for m, a, p, q in zip(n, alpha_e, p_e, q_e):
        assert 2 * a <= m and p >= 2, "edge exponent below 2"
        assert p == math.inf or q == c * p
    return res


def _rank(rows: List[List[Fraction]]) -> int:
    """Rank by fraction-exact Gaussian elimination."""
    M = [list(map(Fraction, r)) for r in rows]
    if not M:
        return 0
    rank, ncol = 0, len(M[0])
    for col in range(ncol):
        piv = next((r for r in range(rank, len(M)) if M[r][col] != 0), None)
        if piv is None:
            continue
        M[rank], M[piv] = M[piv], M[rank]
        for r in range(len(M)):
            if r != rank and M[r][col] != 0:
                f = M[r][col] / M[rank][col]
                M[r] = [x - f * y for x, y in zip(M[r], M[rank])]
        rank += 1
        if rank == len(M):
            break
    return rank


def linear_maps(G: MultiGraph, d: int) -> List[np.ndarray]:
    """Matrices of l_v (x -> x_v) for each vertex, then l_e (x -> x_v - x_w) per edge."""
    k = len(G.vertices)
    maps = []
    for i in range(k):
        L = np.zeros((d, k * d), dtype=np.int64)
        L[:, i * d:(i + 1) * d] = np.eye(d, dtype=np.int64)
        maps.append(L)
    for u, v in G.edges:
        i, j = G.vertices.index(u), G.vertices.index(v)
        L = np.zeros((d, k * d), dtype=np.int64)
        L[:, i * d:(i + 1) * d] = np.eye(d, dtype=np.int64)
        L[:, j * d:(j + 1) * d] = -np.eye(d, dtype=np.int64)
        maps.append(L)
    return maps


def bcct_check(G: MultiGraph, d: int, alpha: Sequence, subspaces: Sequence) -> bool:
    """Check dim W <= sum_a alpha_a dim l_a(W) for each spanning set W.

    ``alpha`` lists vertex exponents followed by edge exponents (the order
    of ``linear_maps``); each subspace is given by a list of spanning
    integer vectors in (R^d)^V.
    """
    maps = linear_maps(G, d)
    alpha = [Fraction(a) for a in alpha]
    if len(alpha) != len(maps):
        raise PreconditionError("one exponent per vertex and per edge is required")
    for W in subspaces:
        W = np.asarray(W, dtype=np.int64).reshape(-1, len(G.vertices) * d)
        dimW = _rank(W.tolist())
        rhs = sum((a * _rank((W @ L.T).tolist()) for a, L in zip(alpha, maps)), Fraction(0))
        if dimW > rhs:
            return False
    return True


def exponent_vector(h: HblExponents) -> List[Fraction]:
    return list(h.alpha_v) + list(h.alpha_e)
