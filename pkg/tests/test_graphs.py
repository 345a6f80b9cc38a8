from fractions import Fraction
from itertools import combinations, product

import numpy as np
import pytest

from artifact.graphs import (HblExponents, MultiGraph, PreconditionError, bcct_check, ear_decomposition,
                             hbl_exponents, is_minimal_two_edge_connected, is_two_edge_connected,
                             linear_maps, minimal_2ec_graphs, spanning_tree_family)


def connected(V, edges):
    """BFS connectivity over an edge multiset (list of pairs)."""
    if not V:
        return True
    adj = {v: set() for v in V}
    for u, v in edges:
        adj[u].add(v)
        adj[v].add(u)
    seen, stack = {V[0]}, [V[0]]
    while stack:
        for w in adj[stack.pop()]:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return len(seen) == len(V)


def two_ec_oracle(V, mult):
    """Connected and stays connected after deleting any single edge copy."""
    pairs = list(combinations(V, 2))
    edges = [p for p, m in zip(pairs, mult) for _ in range(m)]
    if not connected(V, edges):
        return False
    return all(connected(V, edges[:i] + edges[i + 1:]) for i in range(len(edges)))


def minimal_oracle(V):
    pairs = list(combinations(V, 2))
    out = set()
    for mult in product(range(3), repeat=len(pairs)):
        if not two_ec_oracle(V, mult):
            continue
        if all(not two_ec_oracle(V, mult[:i] + (mult[i] - 1,) + mult[i + 1:])
               for i in range(len(mult)) if mult[i]):
            out.add(mult)
    return out


def triangle():
    return MultiGraph([1, 2, 3], [1, 1, 1])


def test_two_edge_connected_examples():
    assert is_two_edge_connected(triangle())
    assert not is_two_edge_connected(MultiGraph([1, 2, 3], [1, 0, 1]))
    assert is_two_edge_connected(MultiGraph([1, 2], [2]))
    assert is_two_edge_connected(MultiGraph([1]))


def test_enumeration_examples():
    assert [tuple(G.mult) for G in minimal_2ec_graphs([1])] == [()]
    assert [tuple(G.mult) for G in minimal_2ec_graphs([1, 2])] == [(2,)]
    got = {tuple(G.mult) for G in minimal_2ec_graphs([1, 2, 3])}
    assert got == {(1, 1, 1), (2, 2, 0), (2, 0, 2), (0, 2, 2)}


@pytest.mark.parametrize("n", [2, 3, 4])
def test_enumeration_matches_brute_force(n):
    V = list(range(1, n + 1))
    assert {tuple(G.mult) for G in minimal_2ec_graphs(V)} == minimal_oracle(V)


def test_counts():
    assert [len(minimal_2ec_graphs(list(range(1, n + 1)))) for n in range(1, 6)] == [1, 1, 4, 31, 372]


def _recompose(G, ears):
    total = np.zeros(len(G.pairs), dtype=int)
    idx = {frozenset(p): i for i, p in enumerate(G.pairs)}
    covered = set()
    for E in ears:
        for (u, v), m in E.as_dict().items():
            total[idx[frozenset((u, v))]] += m
        covered |= set(E.vertices)
    return total, covered


def test_ear_examples():
    c4 = MultiGraph([1, 2, 3, 4], {(1, 2): 1, (2, 3): 1, (3, 4): 1, (1, 4): 1})
    ears = ear_decomposition(c4)
    assert len(ears) == 1
    ears = ear_decomposition(MultiGraph([1, 2], [2]))
    assert len(ears) == 1
    G = MultiGraph([1, 2, 3, 4], {(1, 2): 1, (2, 3): 1, (1, 3): 1, (3, 4): 2})
    assert len(ear_decomposition(G)) == 2
    with pytest.raises(PreconditionError):
        ear_decomposition(MultiGraph([1, 2, 3], [1, 0, 1]))


def test_spanning_trees_examples():
    fam = spanning_tree_family(triangle())
    omitted = set()
    for v, T in fam.items():
        assert sum(T.mult) == 2
        omitted |= {i for i, m in enumerate(T.mult) if m == 0}
    assert omitted == {0, 1, 2}
    fam = spanning_tree_family(MultiGraph([1, 2], [2]))
    assert all(tuple(T.mult) == (1,) for T in fam.values())


def test_hbl_examples():
    h = hbl_exponents(triangle())
    assert set(h.alpha_v) == {Fraction(1, 2)} and set(h.alpha_e) == {Fraction(1, 2)}
    assert set(h.beta_e) == {Fraction(2, 3)}
    assert set(h.p_e) == {2} and set(h.q_e) == {Fraction(3, 2)}
    h = hbl_exponents(MultiGraph([1, 2], [2]))
    assert h.alpha_v == (Fraction(1, 2),) * 2 and h.alpha_e == (Fraction(1),)
    assert h.p_e == (2,) and h.q_e == (2,)
    with pytest.raises(PreconditionError):
        hbl_exponents(MultiGraph([1]))


def test_bcct_examples():
    G = triangle()
    h = hbl_exponents(G)
    alpha = list(h.alpha_v) + list(h.alpha_e)
    n = 3
    full = [[Fraction(int(i == j)) for j in range(n)] for i in range(n)]
    assert bcct_check(G, 1, alpha, [full])
    assert bcct_check(G, 1, alpha, [[]])
    axis = [[Fraction(1), Fraction(0), Fraction(0)]]
    assert bcct_check(G, 1, alpha, [axis])


def _subspaces(n, rng, count):
    """Random spans of coordinate vectors and differences e_i - e_j."""
    gens = [tuple(Fraction(int(k == i)) for k in range(n)) for i in range(n)]
    gens += [tuple(Fraction(int(k == i) - int(k == j)) for k in range(n)) for i, j in combinations(range(n), 2)]
    out = []
    for _ in range(count):
        m = int(rng.integers(0, min(len(gens), n + 1) + 1))
        out.append([list(gens[i]) for i in rng.choice(len(gens), size=m, replace=False)])
    return out


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_graph_lemmas_on_all_minimal_graphs(n):
    V = list(range(1, n + 1))
    rng = np.random.default_rng(n)
    for G in minimal_2ec_graphs(V):
        assert all(m in (0, 1, 2) for m in G.mult)
        assert is_minimal_two_edge_connected(G)
        ears = ear_decomposition(G)
        total, covered = _recompose(G, ears)
        assert tuple(total) == tuple(G.mult) and covered == set(V)
        fam = spanning_tree_family(G)
        for e, (u, v) in enumerate(G.pairs):
            if G.mult[e]:
                assert any(T.mult[e] <= G.mult[e] - 1 for T in fam.values())
        h = hbl_exponents(G)
        assert h.alpha_total() == n
        assert all(p >= 2 for p in h.p_e)
        alpha = list(h.alpha_v) + list(h.alpha_e)
        assert bcct_check(G, 1, alpha, _subspaces(n, rng, 100))
