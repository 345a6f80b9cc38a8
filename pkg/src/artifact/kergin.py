"""Divided differences, Kergin interpolation and variances of interpolated fields.

Polynomials R_q[X]^k are stored as dense coefficient arrays of shape
``(k, M)`` over the graded monomial basis ``multi_indices(d, q)``; the
monomials are treated as an orthonormal basis.  Arrays of dtype object
holding ``Fraction`` entries give an exact-arithmetic path.

A divided difference f[x_0..x_i] is a symmetric i-linear form whose
coordinate ``alpha`` (|alpha| = i) is the integral of d^alpha f over the
simplex spanned by the points, against Lebesgue measure on the standard
i-simplex (total mass 1/i!).  Internally it is represented as a linear
functional on point derivatives ("atoms" ``(z, alpha)``): a
Grundmann-Moeller cubature in general, or the exact confluent recursion
when d = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from itertools import combinations_with_replacement
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np

from .clusters import PointConfig
from .partitions import DomainError, Partition

MAX_ORDER = 5
DEFAULT_RULE_S = 5  # Grundmann-Moeller parameter: exact to degree 2s+1 = 11


class EvaluationError(ValueError):
    pass


class KernelCapabilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# multi-indices and polynomials

@lru_cache(maxsize=None)
def homogeneous_indices(d: int, q: int) -> Tuple[Tuple[int, ...], ...]:
    """Multi-indices of R^d with |alpha| = q, in reverse-lexicographic order."""
    out = []
    for combo in combinations_with_replacement(range(d), q):
        a = [0] * d
        for j in combo:
            a[j] += 1
        out.append(tuple(a))
    return tuple(out)


@lru_cache(maxsize=None)
def multi_indices(d: int, q: int) -> Tuple[Tuple[int, ...], ...]:
    """Graded basis: all multi-indices with |alpha| <= q, by degree."""
    return tuple(a for i in range(q + 1) for a in homogeneous_indices(d, i))


@lru_cache(maxsize=None)
def _index(d: int, q: int) -> Dict[Tuple[int, ...], int]:
    return {a: i for i, a in enumerate(multi_indices(d, q))}


def n_monomials(d: int, q: int) -> int:
    return math.comb(d + q, d)


def _falling(n: int, k: int) -> int:
    out = 1
    for j in range(k):
        out *= n - j
    return out


def _zeros(shape, exact: bool):
    if exact:
        a = np.empty(shape, dtype=object)
        a.fill(Fraction(0))
        return a
    return np.zeros(shape)


def _is_exact(a) -> bool:
    return isinstance(a, np.ndarray) and a.dtype == object


class PolyVector:
    """A polynomial map R^d -> R^k of degree at most q."""

    def __init__(self, d: int, k: int, q: int, coef=None):
        self.d, self.k, self.q = int(d), int(k), int(q)
        M = n_monomials(self.d, self.q)
        if coef is None:
            coef = np.zeros((self.k, M))
        coef = np.asarray(coef)
        if coef.shape != (self.k, M):
            raise DomainError(f"coefficient array must have shape {(self.k, M)}")
        self.coef = coef

    @property
    def basis(self):
        return multi_indices(self.d, self.q)

    @property
    def exact(self) -> bool:
        return _is_exact(self.coef)

    @classmethod
    def from_dict(cls, d: int, q: int, terms: Dict, k: int = 1, exact: bool = False) -> "PolyVector":
        """Build from ``{alpha: c}`` (k = 1) or ``{(i, alpha): c}``."""
        idx = _index(d, q)
        coef = _zeros((k, len(idx)), exact)
        for key, c in terms.items():
            if k == 1 and len(key) == d and all(isinstance(t, int) for t in key):
                i, a = 0, tuple(key)
            else:
                i, a = key
            coef[i, idx[tuple(a)]] += Fraction(c) if exact else c
        return cls(d, k, q, coef)

    def degree(self) -> int:
        deg = -1
        for j, a in enumerate(self.basis):
            if np.any(self.coef[:, j] != 0):
                deg = max(deg, sum(a))
        return deg

    def raise_degree(self, q: int) -> "PolyVector":
        if q < self.q:
            if self.degree() > q:
                raise DomainError("cannot lower the degree of a polynomial of higher degree")
        idx = _index(self.d, q)
        out = _zeros((self.k, len(idx)), self.exact)
        for j, a in enumerate(self.basis):
            if sum(a) <= q:
                out[:, idx[a]] = self.coef[:, j]
        return PolyVector(self.d, self.k, q, out)

    def monomials(self, Z) -> np.ndarray:
        """Matrix of monomial values, shape (npts, M)."""
        Z = np.asarray(Z)
        if Z.ndim == 1:
            Z = Z[:, None] if self.d == 1 else Z[None, :]
        exact = Z.dtype == object or self.exact
        out = np.empty((Z.shape[0], len(self.basis)), dtype=object if exact else float)
        for j, a in enumerate(self.basis):
            col = np.ones(Z.shape[0], dtype=object) if exact else np.ones(Z.shape[0])
            if exact:
                col.fill(Fraction(1))
            for t, e in enumerate(a):
                if e:
                    col = col * Z[:, t] ** e
            out[:, j] = col
        return out

    def __call__(self, Z) -> np.ndarray:
        """Values at points Z, shape (npts, k)."""
        return self.monomials(Z) @ self.coef.T

    def deriv(self, alpha, Z) -> np.ndarray:
        """d^alpha P at points Z, shape (npts, k); exact for polynomials."""
        return self.derivative(alpha)(Z)

    def derivative(self, alpha) -> "PolyVector":
        alpha = tuple(alpha)
        idx = _index(self.d, self.q)
        out = _zeros(self.coef.shape, self.exact)
        for j, a in enumerate(self.basis):
            if all(x >= y for x, y in zip(a, alpha)):
                b = tuple(x - y for x, y in zip(a, alpha))
                f = 1
                for x, y in zip(a, alpha):
                    f *= _falling(x, y)
                out[:, idx[b]] += f * self.coef[:, j]
        return PolyVector(self.d, self.k, self.q, out)

    def translate(self, v) -> "PolyVector":
        """The polynomial X -> P(X + v)."""
        T = translation_matrix(self.d, self.q, v)
        return PolyVector(self.d, self.k, self.q, self.coef @ T.T)

    def __add__(self, other: "PolyVector") -> "PolyVector":
        q = max(self.q, other.q)
        return PolyVector(self.d, self.k, q, self.raise_degree(q).coef + other.raise_degree(q).coef)

    def __sub__(self, other: "PolyVector") -> "PolyVector":
        q = max(self.q, other.q)
        return PolyVector(self.d, self.k, q, self.raise_degree(q).coef - other.raise_degree(q).coef)

    def __mul__(self, c) -> "PolyVector":
        return PolyVector(self.d, self.k, self.q, self.coef * c)

    __rmul__ = __mul__

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.coef.astype(float)))) if self.coef.size else 0.0

    def equals(self, other: "PolyVector") -> bool:
        q = max(self.q, other.q)
        return bool(np.all(self.raise_degree(q).coef == other.raise_degree(q).coef))

    def to_json(self) -> dict:
        return {
            "d": self.d, "k": self.k, "q": self.q,
            "terms": [[i, list(a), str(self.coef[i, j]) if self.exact else float(self.coef[i, j])]
                      for i in range(self.k) for j, a in enumerate(self.basis) if self.coef[i, j] != 0],
        }


def translation_matrix(d: int, q: int, v) -> np.ndarray:
    """Matrix T with coef(P(X+v)) = T @ coef(P) in the graded basis."""
    basis = multi_indices(d, q)
    idx = _index(d, q)
    v = list(v) if np.ndim(v) else [v]
    exact = any(isinstance(t, Fraction) for t in v)
    T = _zeros((len(basis), len(basis)), exact)
    for j, a in enumerate(basis):
        # (X + v)^a = prod_t sum_{g_t <= a_t} C(a_t, g_t) v_t^(a_t - g_t) X_t^g_t
        def rec(t, g, c):
            if t == d:
                T[idx[tuple(g)], j] += c
                return
            for gt in range(a[t] + 1):
                rec(t + 1, g + [gt], c * math.comb(a[t], gt) * v[t] ** (a[t] - gt))
        rec(0, [], Fraction(1) if exact else 1.0)
    return T


# ---------------------------------------------------------------------------
# simplex rule

@lru_cache(maxsize=None)
def gm_rule(n: int, s: int, exact: bool = False):
    """Grundmann-Moeller rule on the standard n-simplex, degree 2s+1.

    Returns barycentric nodes, shape (N, n+1), and weights summing to 1/n!.
    """
    nodes, weights = [], []
    for i in range(s + 1):
        den = n + 2 * s + 1 - 2 * i
        w = Fraction((-1) ** i * den ** (2 * s + 1),
                     2 ** (2 * s) * math.factorial(i) * math.factorial(n + 2 * s + 1 - i))
        for combo in combinations_with_replacement(range(n + 1), s - i):
            beta = [0] * (n + 1)
            for j in combo:
                beta[j] += 1
            nodes.append([Fraction(2 * b + 1, den) for b in beta])
            weights.append(w)
    if exact:
        N = np.empty((len(nodes), n + 1), dtype=object)
        for r, row in enumerate(nodes):
            N[r, :] = row
        W = np.empty(len(weights), dtype=object)
        W[:] = weights
        return N, W
    return (np.array([[float(t) for t in row] for row in nodes]),
            np.array([float(w) for w in weights]))


def dirichlet_moment(beta: Sequence[int]) -> Fraction:
    """Integral of prod t_j^beta_j over the standard simplex (barycentric)."""
    n = len(beta) - 1
    num = 1
    for b in beta:
        num *= math.factorial(b)
    return Fraction(num, math.factorial(n + sum(beta)))


# ---------------------------------------------------------------------------
# divided-difference functionals

Atom = Tuple[Tuple, Tuple[int, ...]]  # (point, multi-index)


def _pt(z) -> tuple:
    return tuple(z.tolist()) if isinstance(z, np.ndarray) else tuple(z)


def _dd_1d(points: Sequence) -> Dict[Atom, object]:
    """Exact confluent recursion: f[z_0..z_q] as a combination of f^(n)(z)."""
    z = sorted(points)
    memo: Dict[Tuple[int, int], Dict] = {}

    def rec(a, b):
        if (a, b) in memo:
            return memo[(a, b)]
        if z[a] == z[b]:
            res = {((z[a],), (b - a,)): Fraction(1, math.factorial(b - a))
                   if isinstance(z[a], Fraction) else 1.0 / math.factorial(b - a)}
        else:
            hi, lo = rec(a + 1, b), rec(a, b - 1)
            den = z[b] - z[a]
            res = {}
            for key, c in hi.items():
                res[key] = res.get(key, 0) + c / den
            for key, c in lo.items():
                res[key] = res.get(key, 0) - c / den
        memo[(a, b)] = res
        return res

    return rec(0, len(z) - 1)


def _dd_simplex(points: np.ndarray, s: int, exact: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Cubature nodes (in R^d) and weights for the simplex spanned by ``points``."""
    n = len(points) - 1
    bary, w = gm_rule(n, s, exact)
    return bary @ points, w


def dd_functionals(points, s: int = DEFAULT_RULE_S, exact: bool = False,
                   confluent: bool = None) -> List[Dict[Atom, object]]:
    """Functionals for f[x_0..x_i] coordinate alpha, i = 0..q, |alpha| = i.

    Entry order is ``(i, alpha)`` with alpha in ``homogeneous_indices``.
    For d = 1 the exact confluent recursion is used unless
    ``confluent=False``; ``s`` may be an int or a callable ``i -> s``.
    """
    P = np.asarray(points, dtype=object if exact else float)
    if P.ndim == 1:
        P = P[:, None]
    q, d = P.shape[0] - 1, P.shape[1]
    if q > MAX_ORDER:
        raise DomainError(f"at most {MAX_ORDER + 1} points")
    if confluent is None:
        confluent = d == 1
    out = []
    for i in range(q + 1):
        if confluent:
            if d != 1:
                raise DomainError("confluent recursion is one-dimensional")
            out.append(_dd_1d([p[0] for p in P[: i + 1]]))
            continue
        si = s(i) if callable(s) else s
        Z, W = _dd_simplex(P[: i + 1], si, exact)
        for alpha in homogeneous_indices(d, i):
            func: Dict[Atom, object] = {}
            for z, w in zip(Z, W):
                key = (_pt(z), alpha)
                func[key] = func.get(key, 0) + w
            out.append(func)
    return out


def apply_functionals(funcs: List[Dict[Atom, object]], f) -> np.ndarray:
    """Evaluate functionals on a field handle with ``deriv(alpha, Z)``; shape (n, k)."""
    atoms, _ = _atom_list([funcs])
    by_alpha: Dict[Tuple[int, ...], List[Atom]] = {}
    for key in atoms:
        by_alpha.setdefault(key[1], []).append(key)
    vals = {}
    for alpha, keys in by_alpha.items():
        exact = any(isinstance(t, Fraction) for key in keys for t in key[0])
        Z = np.array([key[0] for key in keys], dtype=object if exact else float)
        V = np.asarray(f.deriv(alpha, Z))
        for key, v in zip(keys, V):
            vals[key] = v
    rows = []
    for func in funcs:
        total = None
        for key, c in func.items():
            total = c * vals[key] if total is None else total + c * vals[key]
        rows.append(total)
    return np.array(rows)


@dataclass
class SymTensor:
    """A symmetric q-linear form R^d x ... x R^d -> R^k.

    ``entries[c, j]`` is the coordinate for output c and multi-index
    ``homogeneous_indices(d, q)[j]``.
    """

    order: int
    dim: int
    dim_out: int
    entries: np.ndarray

    @property
    def basis(self):
        return homogeneous_indices(self.dim, self.order)

    def __call__(self, *vectors) -> np.ndarray:
        if len(vectors) != self.order:
            raise DomainError("wrong number of arguments")
        total = 0
        idx = {a: j for j, a in enumerate(self.basis)}
        for tup in np.ndindex(*([self.dim] * self.order)):
            a = [0] * self.dim
            for t in tup:
                a[t] += 1
            prod = 1
            for v, t in zip(vectors, tup):
                prod = prod * v[t]
            total = total + self.entries[:, idx[tuple(a)]] * prod
        return total


def _field_dim(f) -> Tuple[int, int]:
    return int(f.d), int(f.k)


def divided_difference(f, x, s: int = DEFAULT_RULE_S, exact: bool = None) -> SymTensor:
    """f[x_0, ..., x_q] for a field handle exposing ``d``, ``k`` and ``deriv``.

    Polynomial inputs (``PolyVector``) are integrated exactly with a rule of
    sufficient degree; other handles use the fixed cubature of degree 2s+1.
    """
    pts = x.points if isinstance(x, PointConfig) else x
    if exact is None:
        exact = isinstance(f, PolyVector) and f.exact
    P = np.asarray(pts, dtype=object if exact else float)
    if P.ndim == 1:
        P = P[:, None]
    q, d = P.shape[0] - 1, P.shape[1]
    if isinstance(f, PolyVector):
        s = max(0, -(-(f.q - q - 1) // 2))
    funcs = dd_functionals(P, s=s, exact=exact, confluent=False)
    vals = apply_functionals(funcs[-len(homogeneous_indices(d, q)):], f)
    return SymTensor(q, d, f.k, vals.T)


# ---------------------------------------------------------------------------
# Kergin interpolation

def kergin_basis(points, exact: bool = False) -> np.ndarray:
    """Matrix Psi with coef(K(f,x)) = Psi @ E, E the stacked divided differences.

    Column (i, alpha) holds the coefficients of the sum over index tuples
    j with multiset alpha of prod_m (X_{j_m} - x_{m-1, j_m}).
    """
    P = np.asarray(points, dtype=object if exact else float)
    if P.ndim == 1:
        P = P[:, None]
    q, d = P.shape[0] - 1, P.shape[1]
    idx = _index(d, q)
    cols = [(i, a) for i in range(q + 1) for a in homogeneous_indices(d, i)]
    cidx = {c: j for j, c in enumerate(cols)}
    Psi = _zeros((len(idx), len(cols)), exact)
    basis = multi_indices(d, q)
    shift = {(j, a): idx.get(tuple(x + (t == j) for t, x in enumerate(a)))
             for j in range(d) for a in basis}

    def rec(depth, poly, alpha):
        Psi[:, cidx[(depth, tuple(alpha))]] += poly
        if depth == q:
            return
        for j in range(d):
            nxt = _zeros(len(basis), exact)
            c = P[depth, j]
            for r in np.nonzero(poly != 0)[0]:
                a = basis[r]
                nxt[shift[(j, a)]] += poly[r]
                nxt[r] -= c * poly[r]
            alpha[j] += 1
            rec(depth + 1, nxt, alpha)
            alpha[j] -= 1

    one = _zeros(len(basis), exact)
    one[0] = Fraction(1) if exact else 1.0
    rec(0, one, [0] * d)
    return Psi


def _as_points(x, exact=False) -> np.ndarray:
    pts = x.points if isinstance(x, PointConfig) else x
    P = np.asarray(pts, dtype=object if exact else float)
    if P.ndim == 1:
        P = P[:, None]
    return P


def kergin_interpolant(f, x, s: int = DEFAULT_RULE_S, exact: bool = None) -> PolyVector:
    """K(f, x): the unique degree-q polynomial matching all f[x_B]."""
    if exact is None:
        exact = isinstance(f, PolyVector) and f.exact
    P = _as_points(x, exact)
    q, d = P.shape[0] - 1, P.shape[1]
    if isinstance(f, PolyVector):
        fq = f.q
        rule = (lambda i: max(0, -(-(fq - i - 1) // 2)))
    else:
        rule = s
    funcs = dd_functionals(P, s=rule, exact=exact, confluent=False)
    E = apply_functionals(funcs, f)
    coef = (kergin_basis(P, exact) @ E).T
    return PolyVector(d, f.k, q, coef)


def twisted_interpolant(f, x, s: int = DEFAULT_RULE_S, exact: bool = None) -> PolyVector:
    """K(f, x)(X + b(x)) with b(x) the barycenter."""
    if exact is None:
        exact = isinstance(f, PolyVector) and f.exact
    P = _as_points(x, exact)
    bary = P.sum(axis=0) / P.shape[0] if exact else P.mean(axis=0)
    return kergin_interpolant(f, P, s, exact).translate(bary)


class _Translated:
    """The field y -> f(y + v)."""

    def __init__(self, f, v):
        self.f, self.v = f, np.asarray(v)
        self.d, self.k = f.d, f.k

    def deriv(self, alpha, Z):
        return self.f.deriv(alpha, np.asarray(Z) + self.v)


def translated(f, v):
    if isinstance(f, PolyVector):
        return f.translate(v)
    return _Translated(f, v)


def projection_pi(B: Sequence[int], P: PolyVector, x) -> PolyVector:
    """Pi_B^A(P, x) = twisted interpolant of P(. - b(x)) at x_B.

    ``B`` lists row indices of x (positions, not labels).
    """
    exact = P.exact
    X = _as_points(x, exact)
    if P.degree() > X.shape[0] - 1:
        raise DomainError("polynomial degree exceeds |A| - 1")
    bary = X.sum(axis=0) / X.shape[0] if exact else X.mean(axis=0)
    g = P.translate(-bary)
    return twisted_interpolant(g, X[list(B)], exact=exact)


# ---------------------------------------------------------------------------
# covariance of divided differences and of interpolants

def _atom_list(funcs_list: List[List[Dict[Atom, object]]]):
    atoms: Dict[Atom, int] = {}
    for funcs in funcs_list:
        for func in funcs:
            for key in func:
                if key not in atoms:
                    atoms[key] = len(atoms)
    return list(atoms), atoms


def _coef_matrix(funcs: List[Dict[Atom, object]], atoms: Dict[Atom, int]) -> np.ndarray:
    C = np.zeros((len(funcs), len(atoms)))
    for r, func in enumerate(funcs):
        for key, c in func.items():
            C[r, atoms[key]] += float(c)
    return C


def atom_covariance(kernel, atoms: List[Atom]) -> np.ndarray:
    """Covariance of (d^alpha f_c(z)) over atoms (outer) and outputs c (inner)."""
    k = kernel.k
    n = len(atoms)
    pts = np.array([a[0] for a in atoms], dtype=float).reshape(n, -1)
    alphas = [a[1] for a in atoms]
    groups: Dict[Tuple[int, ...], List[int]] = {}
    for i, a in enumerate(alphas):
        groups.setdefault(a, []).append(i)
    K = np.zeros((n, k, n, k))
    for a, ia in groups.items():
        for b, ib in groups.items():
            Z = pts[ib][None, :, :] - pts[ia][:, None, :]
            vals = kernel.deriv(a, b, Z.reshape(-1, pts.shape[1])).reshape(len(ia), len(ib), k, k)
            K[np.ix_(ia, range(k), ib, range(k))] = vals.transpose(0, 2, 1, 3)
    K = K.reshape(n * k, n * k)
    return 0.5 * (K + K.T)


def _check_capability(kernel, order: int):
    if order > getattr(kernel, "max_order", np.inf):
        raise KernelCapabilityError(f"kernel provides derivatives up to order {kernel.max_order}, need {order}")


def cov_divided_differences(kernel, x, y, s: int = DEFAULT_RULE_S) -> np.ndarray:
    """cov(f[x], f[y]) in the bases (alpha, c) x (beta, c')."""
    X, Y = _as_points(x), _as_points(y)
    _check_capability(kernel, 2 * max(X.shape[0], Y.shape[0]) - 2)
    fx = dd_functionals(X, s)[-len(homogeneous_indices(X.shape[1], X.shape[0] - 1)):]
    fy = dd_functionals(Y, s)[-len(homogeneous_indices(Y.shape[1], Y.shape[0] - 1)):]
    atoms, amap = _atom_list([fx, fy])
    K = atom_covariance(kernel, atoms)
    k = kernel.k
    Cx = np.kron(_coef_matrix(fx, amap), np.eye(k))
    Cy = np.kron(_coef_matrix(fy, amap), np.eye(k))
    return Cx @ K @ Cy.T


def twisted_map(points, s: int = DEFAULT_RULE_S, confluent: bool = None):
    """Linear map from atoms to coefficients of the twisted interpolant.

    Returns ``(atoms, L)`` with coef(K-dot(f, x))[:, c] = L @ (d^alpha f_c at atoms).
    """
    P = _as_points(points)
    q, d = P.shape[0] - 1, P.shape[1]
    funcs = dd_functionals(P, s=s, confluent=confluent)
    atoms, amap = _atom_list([funcs])
    C = _coef_matrix(funcs, amap)
    T = translation_matrix(d, q, P.mean(axis=0))
    L = T @ kergin_basis(P) @ C
    return atoms, L


@dataclass
class SymmetricOperator:
    labels: List[Tuple]
    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (len(self.labels), len(self.labels)):
            raise DomainError("matrix shape does not match labels")
        if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(M).max(initial=0)))):
            raise DomainError("operator is not symmetric")
        self.matrix = 0.5 * (M + M.T)

    def block_indices(self, block) -> List[int]:
        return [i for i, l in enumerate(self.labels) if l[0] == block]

    def block(self, I, J=None) -> np.ndarray:
        J = I if J is None else J
        return self.matrix[np.ix_(self.block_indices(I), self.block_indices(J))]

    @property
    def blocks(self) -> List:
        seen = []
        for l in self.labels:
            if l[0] not in seen:
                seen.append(l[0])
        return seen

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


def gradient_matrix(d: int, q: int) -> Tuple[np.ndarray, List[Tuple[int, ...]]]:
    """Coefficients of grad X^beta, 0 < |beta| <= q+1, inside R_q[X]^d.

    Column beta of G holds, for each output i, beta_i at monomial
    X^(beta - e_i); rows are ordered output-major.
    """
    betas = [b for b in multi_indices(d, q + 1) if sum(b) > 0]
    idx = _index(d, q)
    M = len(idx)
    G = np.zeros((d * M, len(betas)))
    for c, b in enumerate(betas):
        for i in range(d):
            if b[i]:
                a = tuple(x - (t == i) for t, x in enumerate(b))
                G[i * M + idx[a], c] = b[i]
    return G, betas


def block_interpolation_map(kernel_d: int, k: int, points, s: int = DEFAULT_RULE_S,
                            gradient: bool = False, confluent: bool = None):
    """Atoms and the matrix sending atom-output values to block coordinates.

    The coordinate vector of K-dot(f, x) is ``R @ v`` where ``v`` stacks
    d^alpha f_c(z) atom-major, output-minor.  In gradient mode coordinates
    are taken in the basis grad X^beta.
    """
    atoms, L = twisted_map(points, s=s, confluent=confluent)
    M = L.shape[0]
    # coefficients output-major: index c*M + m  <-  atom a, output c
    R = np.zeros((k * M, len(atoms) * k))
    for c in range(k):
        R[c * M:(c + 1) * M, c::k] = L
    if gradient:
        q = _as_points(points).shape[0] - 1
        G, _ = gradient_matrix(kernel_d, q)
        R = np.linalg.pinv(G) @ R
    return atoms, R


def block_labels(block, d: int, k: int, q: int, gradient: bool) -> List[Tuple]:
    if gradient:
        _, betas = gradient_matrix(d, q)
        return [(block, "grad", b) for b in betas]
    return [(block, c, a) for c in range(k) for a in multi_indices(d, q)]


CONFLUENT_MIN_GAP = 0.25


def _min_gap(P: np.ndarray) -> float:
    if len(P) < 2:
        return np.inf
    D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    return float(D[np.triu_indices(len(P), 1)].min())


def sigma_variance(kernel, I: Partition, x, doubled: bool = False, gradient: bool = None,
                   s: int = DEFAULT_RULE_S, confluent: bool = None) -> SymmetricOperator:
    """Var((K-dot(f, x_B))_{B in I}) as a symmetric operator.

    With ``doubled`` each block uses its points twice, giving Sigma_{2I}
    evaluated at the doubled configuration.
    """
    if gradient is None:
        gradient = bool(getattr(kernel, "gradient", False))
    cfg = x if isinstance(x, PointConfig) else PointConfig.from_points(x)
    d, k = cfg.dim, kernel.k
    if gradient and k != d:
        raise DomainError("gradient mode needs k = d")
    maps, labels = [], []
    for B in I.blocks:
        pts = cfg.sub(B).points
        if doubled:
            pts = np.vstack([pts, pts])
        q = pts.shape[0] - 1
        _check_capability(kernel, 2 * q + (2 if gradient else 0))
        conf = confluent
        if conf is None:
            # the confluent recursion divides by point gaps and loses all
            # precision near the diagonal; the simplex form stays stable
            conf = d == 1 and _min_gap(cfg.sub(B).points) >= CONFLUENT_MIN_GAP
        atoms, R = block_interpolation_map(d, k, pts, s=s, gradient=gradient, confluent=conf)
        maps.append((atoms, R))
        labels.extend(block_labels(B, d, k, q, gradient))
    all_atoms, amap = _atom_list([[{a: 1.0 for a in atoms}] for atoms, _ in maps])
    K = atom_covariance(kernel, all_atoms)
    rows = []
    for atoms, R in maps:
        S = np.zeros((R.shape[0], len(all_atoms) * k))
        for j, a in enumerate(atoms):
            S[:, amap[a] * k:(amap[a] + 1) * k] += R[:, j * k:(j + 1) * k]
        rows.append(S)
    S = np.vstack(rows)
    M = S @ K @ S.T
    return SymmetricOperator(labels, 0.5 * (M + M.T))
