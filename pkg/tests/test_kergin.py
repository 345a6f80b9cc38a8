import math
from fractions import Fraction
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.gaussian import bargmann_fock
from artifact.kergin import (KernelCapabilityError, PolyVector, cov_divided_differences,
                             divided_difference, gm_rule, gradient_matrix, homogeneous_indices,
                             kergin_interpolant, multi_indices, projection_pi, sigma_variance,
                             twisted_interpolant)
from artifact.partitions import DomainError, Partition, full, singletons


class ExpField:
    """f(z) = exp(w . z), k = 1."""

    def __init__(self, w):
        self.w = np.asarray(w, dtype=float)
        self.d, self.k = len(self.w), 1

    def deriv(self, alpha, Z):
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return (np.prod(self.w ** np.asarray(alpha)) * np.exp(Z @ self.w))[:, None]


def random_poly(rng, d, q, k=1, exact=True):
    terms = {}
    for i in range(k):
        for a in multi_indices(d, q):
            terms[(i, a)] = Fraction(int(rng.integers(-9, 10)), int(rng.integers(1, 5)))
    if not exact:
        terms = {key: float(c) for key, c in terms.items()}
    return PolyVector.from_dict(d, q, terms, k=k, exact=exact)


def random_points(rng, n, d):
    return np.array([[Fraction(int(rng.integers(-6, 7)), int(rng.integers(1, 4))) for _ in range(d)]
                     for _ in range(n)], dtype=object)


def dirichlet_oracle(beta):
    return Fraction(math.prod(math.factorial(b) for b in beta), math.factorial(len(beta) - 1 + sum(beta)))


def test_gm_rule_matches_dirichlet_moments():
    for n in (1, 2, 3):
        for s in (0, 1, 2, 3):
            N, W = gm_rule(n, s, exact=True)
            assert sum(W) == Fraction(1, math.factorial(n))
            for total in range(2 * s + 2):
                for beta in homogeneous_indices(n + 1, total):
                    got = sum(w * math.prod(t ** b for t, b in zip(row, beta)) for row, w in zip(N, W))
                    assert got == dirichlet_oracle(beta)


def test_divided_difference_examples():
    f = PolyVector.from_dict(1, 2, {(2,): 1}, exact=True)
    dd = divided_difference(f, [Fraction(0), Fraction(1)])
    assert dd.entries[0, 0] == 1
    # all points equal: (1/q!) D^q f
    g = ExpField([0.7])
    y = 0.3
    for q in range(1, 5):
        dd = divided_difference(g, [y] * (q + 1))
        assert dd.entries[0, 0] == pytest.approx(0.7 ** q * math.exp(0.7 * y) / math.factorial(q), rel=1e-12)
    g2 = ExpField([0.5, -0.4])
    dd = divided_difference(g2, [[0.2, 0.1]] * 3)
    for j, a in enumerate(dd.basis):
        expect = 0.5 ** a[0] * (-0.4) ** a[1] * math.exp(0.5 * 0.2 - 0.4 * 0.1) / 2
        assert dd.entries[0, j] == pytest.approx(expect, rel=1e-12)


def newton_dd(f, z):
    """Classical divided-difference table for distinct 1D nodes."""
    col = [float(f(t)) for t in z]
    for level in range(1, len(z)):
        col = [(col[i + 1] - col[i]) / (z[i + level] - z[i]) for i in range(len(col) - 1)]
    return col[0]


def test_divided_difference_matches_newton_table():
    g = ExpField([1.3])
    for z in ([0.0, 0.4], [0.1, 0.5, 1.2], [-0.8, 0.0, 0.3, 1.1], [-1.0, -0.2, 0.4, 0.9, 1.5]):
        got = divided_difference(g, z).entries[0, 0]
        assert got == pytest.approx(newton_dd(lambda t: math.exp(1.3 * t), z), rel=1e-9)


def test_divided_difference_permutation_invariant():
    g = ExpField([0.4, -0.9])
    x = np.random.default_rng(0).normal(size=(4, 2))
    ref = divided_difference(g, x).entries
    for perm in permutations(range(4)):
        assert np.allclose(divided_difference(g, x[list(perm)]).entries, ref, rtol=0, atol=1e-12)


def test_symtensor_is_symmetric():
    g = ExpField([0.4, -0.9])
    T = divided_difference(g, np.random.default_rng(1).normal(size=(3, 2)))
    u, v = np.array([1.0, 2.0]), np.array([-0.5, 0.3])
    assert np.allclose(T(u, v), T(v, u), rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_reproduction_exact(seed):
    rng = np.random.default_rng(seed)
    d, q = int(rng.integers(1, 4)), int(rng.integers(0, 4))
    P = random_poly(rng, d, q)
    x = random_points(rng, q + 1, d)
    assert kergin_interpolant(P, x).equals(P)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_interpolation_conditions(seed):
    rng = np.random.default_rng(seed)
    d, q = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    f = random_poly(rng, d, q + 2)
    x = random_points(rng, q + 1, d)
    K = kergin_interpolant(f, x)
    assert K.degree() <= q
    for r in range(1, q + 2):
        for B in permutations(range(q + 1), r):
            if list(B) != sorted(B):
                continue
            a = divided_difference(K, x[list(B)]).entries
            b = divided_difference(f, x[list(B)]).entries
            assert np.all(a == b)


def test_taylor_and_hermite():
    g = ExpField([0.8])
    y = 0.25
    K = kergin_interpolant(g, [y] * 4)
    taylor = [sum(0.8 ** m * math.exp(0.8 * y) / math.factorial(m) * math.comb(m, j) * (-y) ** (m - j)
                  for m in range(j, 4)) for j in range(4)]
    assert np.allclose(K.coef[0], taylor, rtol=1e-10)
    # Hermite: values at 0, 1 and derivative at 0 (nodes 0, 0, 1)
    K = kergin_interpolant(g, [0.0, 0.0, 1.0])
    A = np.array([[1, 0, 0], [0, 1, 0], [1, 1, 1]], float)
    rhs = np.array([1.0, 0.8, math.exp(0.8)])
    assert np.allclose(K.coef[0], np.linalg.solve(A, rhs), rtol=1e-10)
    # distinct nodes: Lagrange interpolation through the values
    z = np.array([-0.5, 0.2, 0.9, 1.4])
    K = kergin_interpolant(g, z)
    V = np.vander(z, 4, increasing=True)
    assert np.allclose(K.coef[0], np.linalg.solve(V, np.exp(0.8 * z)), rtol=1e-9)


def test_kergin_permutation_invariant():
    g = ExpField([0.6, 0.3, -0.2])
    x = np.random.default_rng(5).normal(size=(4, 3)) * 0.5
    ref = kergin_interpolant(g, x).coef
    for perm in permutations(range(4)):
        assert np.max(np.abs(kergin_interpolant(g, x[list(perm)]).coef - ref)) < 1e-9


def test_twisted_examples():
    g = ExpField([0.9])
    y = 0.4
    T = twisted_interpolant(g, [y, y])
    assert np.allclose(T.coef[0], [math.exp(0.9 * y), 0.9 * math.exp(0.9 * y)], rtol=1e-12)
    x = np.array([[-1.0], [0.5], [0.5]])
    assert np.allclose(twisted_interpolant(g, x).coef, kergin_interpolant(g, x).coef, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_twisted_translation_equivariance(seed):
    rng = np.random.default_rng(seed)
    d, q = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    f = random_poly(rng, d, q + 2)
    x = random_points(rng, q + 1, d)
    tau = random_points(rng, 1, d)[0]
    # tau . f = f(. - tau), tau . x = x + tau
    lhs = twisted_interpolant(f, x + tau)
    rhs = twisted_interpolant(f.translate(tau), x)
    assert lhs.equals(rhs)


def test_projection_pi():
    rng = np.random.default_rng(3)
    d = 2
    x = random_points(rng, 3, d)
    P = random_poly(rng, d, 2)
    assert projection_pi([0, 1, 2], P, x).equals(P)
    f = random_poly(rng, d, 4)
    Kx = twisted_interpolant(f, x)
    for B in ([0], [1], [0, 2], [1, 2]):
        assert projection_pi(B, Kx, x).equals(twisted_interpolant(f, x[B]))
        tau = random_points(rng, 1, d)[0]
        assert projection_pi(B, P, x + tau).equals(projection_pi(B, P, x))
    with pytest.raises(DomainError):
        projection_pi([0], random_poly(rng, d, 3), x)


def test_projection_pi_linear_and_surjective():
    rng = np.random.default_rng(4)
    d = 2
    x = random_points(rng, 4, d)
    B = [1, 3]
    P, Q = random_poly(rng, d, 3), random_poly(rng, d, 3)
    c = Fraction(3, 7)
    assert projection_pi(B, P + Q * c, x).equals(projection_pi(B, P, x) + projection_pi(B, Q, x) * c)
    cols = []
    for a in multi_indices(d, 3):
        E = PolyVector.from_dict(d, 3, {a: 1}, exact=True)
        cols.append(projection_pi(B, E, x).coef[0].astype(float))
    assert np.linalg.matrix_rank(np.array(cols).T) == len(multi_indices(d, 1))


def test_cov_divided_differences_examples():
    bf = bargmann_fock(1)
    C = cov_divided_differences(bf, [0.3], [1.1])
    assert C[0, 0] == pytest.approx(math.exp(-0.8 ** 2 / 2), rel=1e-14)
    C = cov_divided_differences(bf, [0.0, 0.0], [0.0, 0.0])
    assert C[0, 0] == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(KernelCapabilityError):
        cov_divided_differences(type(bf)(1, 1, 1.0, max_order=1), [0.0, 0.1], [0.0, 0.2])


def test_cov_divided_differences_far_bound():
    bf = bargmann_fock(1)
    x, y = np.array([0.0, 0.4, 0.7]), np.array([6.0, 6.5, 6.6])
    C = cov_divided_differences(bf, x, y)
    # max of |d^{a,b} r| over w in conv(x), z in conv(y), brute force on a grid
    W, Z = np.meshgrid(np.linspace(0, 0.7, 60), np.linspace(6.0, 6.6, 60))
    m = max(np.abs(bf.deriv((2,), (2,), (Z - W).reshape(-1, 1))).max(), 0)
    assert np.all(np.abs(C) <= 3 * m)


def test_sigma_examples():
    bf = bargmann_fock(1)
    S = sigma_variance(bf, full([1]), [[0.7]], doubled=True)
    assert np.allclose(S.matrix, np.eye(2), atol=1e-12)
    x = np.array([[0.0], [0.3], [2.0]])
    I = Partition([1, 2, 3], [[1, 2], [3]])
    a = sigma_variance(bf, I, x, doubled=True).matrix
    b = sigma_variance(bf, I, x + 4.2, doubled=True).matrix
    assert np.allclose(a, b, atol=1e-9)
    assert np.allclose(a, a.T, atol=0)
    assert np.linalg.eigvalsh(a).min() >= -1e-10


def test_sigma_separated_blocks():
    bf = bargmann_fock(1)
    x = np.array([[0.0], [0.4], [30.0]])
    I = Partition([1, 2, 3], [[1, 2], [3]])
    S = sigma_variance(bf, I, x)
    B1, B2 = S.blocks
    assert np.abs(S.block(B1, B2)).max() < 1e-12
    iso = sigma_variance(bf, full([1, 2]), x[:2]).matrix
    assert np.allclose(S.block(B1), iso, atol=1e-12)


def test_sigma_gradient_mode_and_domain():
    from artifact.gaussian import GradientKernel
    gk = GradientKernel(bargmann_fock(2))
    S = sigma_variance(gk, singletons([1, 2]), np.array([[0.0, 0.0], [0.7, -0.2]]), doubled=True)
    assert np.linalg.eigvalsh(S.matrix).min() > 0
    with pytest.raises(DomainError):
        sigma_variance(GradientKernel(bargmann_fock(1)), full([1]), [[0.0, 0.0]], gradient=True)


def _interp_matrix(x, blocks, d, qA):
    """Columns: monomials of degree <= qA; rows: stacked K(P, x_B) coefficients."""
    cols = []
    for a in multi_indices(d, qA):
        P = PolyVector.from_dict(d, qA, {a: 1.0})
        cols.append(np.concatenate([kergin_interpolant(P, x[B], exact=False).coef[0] for B in blocks]))
    return np.array(cols).T


def test_block_surjectivity():
    rng = np.random.default_rng(7)
    for d in (1, 2):
        for _ in range(5):
            x = np.vstack([rng.normal(size=(2, d)) * 0.3, rng.normal(size=(2, d)) * 0.3 + 5])
            blocks = [[0, 1], [2, 3]]
            M = _interp_matrix(x, blocks, d, 3)
            assert np.linalg.matrix_rank(M, tol=1e-8) == 2 * len(multi_indices(d, 1))


def test_one_jet_surjectivity():
    rng = np.random.default_rng(8)
    for d in (1, 2):
        for n in (1, 2, 3):
            x = rng.normal(size=(n, d))
            q = 2 * n - 1
            rows = []
            for a in multi_indices(d, q):
                P = PolyVector.from_dict(d, q, {a: 1.0})
                jet = [P(x)[:, 0]] + [P.deriv(e, x)[:, 0] for e in np.eye(d, dtype=int)]
                rows.append(np.concatenate(jet))
            assert np.linalg.matrix_rank(np.array(rows).T) == n * (d + 1)
    # gradient fields onto R^d x Sym(R^d) per point
    d = 2
    for n in (1, 2):
        x = rng.normal(size=(n, d))
        q = 2 * n - 1
        G, betas = gradient_matrix(d, q)
        M = len(multi_indices(d, q))
        cols = []
        for c in range(G.shape[1]):
            V = PolyVector(d, d, q, G[:, c].reshape(d, M))
            val = V(x)
            hess = [V.deriv(e, x) for e in np.eye(d, dtype=int)]
            sym = [hess[j][:, i] for i in range(d) for j in range(i, d)]
            cols.append(np.concatenate([val.ravel()] + sym))
        assert np.linalg.matrix_rank(np.array(cols).T) == n * (d + d * (d + 1) // 2)


def test_uniform_nondegeneracy():
    # p = 2, eta = 0.05: the thick diagonal of the full block is gap <= eta,
    # the one of the singletons is gap > eta
    bf = bargmann_fock(1)
    eta = 0.05
    rng = np.random.default_rng(9)

    def lam(I, t):
        return sigma_variance(bf, I, np.array([[0.0], [t]]), doubled=True).min_eigenvalue()

    near = [lam(full([1, 2]), t) for t in [1e-6, 1e-4] + list(rng.uniform(1e-3, eta, 20))]
    assert min(near) > 0.1
    edge = lam(singletons([1, 2]), eta)
    assert edge > 1e-10
    far = [lam(singletons([1, 2]), t) for t in rng.uniform(eta, 3.0, 20)]
    assert min(far) >= edge * (1 - 1e-6)
