"""Kac-Rice densities and their factorization into a universal part and a
field-dependent part.

Coordinates on the polynomial spaces follow ``kergin``: monomial
coefficients (output-major) in plain mode, coefficients on the basis
grad X^beta in gradient mode.  Both bases are treated as orthonormal.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, linalg, optimize

from .clusters import PointConfig, finest_clustering
from .gaussian import (ConditioningError, GaussianSpec, GradientKernel, MatrixError,
                       condition, psd_cholesky, rng_for)
from .kergin import (SymmetricOperator, atom_covariance, gradient_matrix, multi_indices,
                     projection_pi, PolyVector, sigma_variance, block_labels)
from .partitions import (Partition, full, meet, mobius_weight, partitions_of, refines,
                         singletons)

MAX_POINTS = 3
N_STARTS = 32
DIAG_DET_MIN = 1e-10


class DegeneracyError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def _cfg(x) -> PointConfig:
    return x if isinstance(x, PointConfig) else PointConfig.from_points(x)


def _subseed(seed: int, *parts) -> int:
    """Deterministic child seed from a master seed and hashable labels."""
    return (int(seed) * 1_000_003 + zlib.crc32(repr(parts).encode())) % (2 ** 63)


# ---------------------------------------------------------------------------
# evaluation data

def _ambient_maps(xc: np.ndarray, k: int, gradient: bool):
    """ev and per-point differential matrices on the ambient coordinates."""
    n, d = xc.shape
    q = 2 * n - 1
    basis = multi_indices(d, q)
    M = len(basis)
    mono = np.ones((n, M))
    dmono = np.zeros((n, d, M))
    for m, a in enumerate(basis):
        mono[:, m] = np.prod(xc ** np.array(a), axis=1)
        for j in range(d):
            if a[j]:
                b = np.array(a)
                b[j] -= 1
                dmono[:, j, m] = a[j] * np.prod(xc ** b, axis=1)
    ev = np.zeros((n * k, k * M))
    D = np.zeros((n, k * d, k * M))
    for i in range(n):
        for c in range(k):
            ev[i * k + c, c * M:(c + 1) * M] = mono[i]
            for j in range(d):
                D[i, c * d + j, c * M:(c + 1) * M] = dmono[i, j]
    if gradient:
        G, _ = gradient_matrix(d, q)
        ev = ev @ G
        D = D @ G
    return ev, D


@dataclass
class EvaluationData:
    x: PointConfig
    k: int
    gradient: bool
    ev_matrix: np.ndarray
    kernel_basis: np.ndarray      # orthonormal columns spanning ker(ev)
    complement_basis: np.ndarray  # orthonormal columns spanning ker(ev)^perp
    diff_maps: np.ndarray         # (n, k*d, dim V): P -> D_{x_a - b(x)} P, row-major (k, d)
    jac_ev: float
    N: float
    argmax: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.kernel_basis.shape[1]

    def _lambdas(self, U: np.ndarray) -> np.ndarray:
        """Differentials at each point for kernel coordinates U (m, dim): (m, n, k, d)."""
        n = self.diff_maps.shape[0]
        DB = self.diff_maps @ self.kernel_basis  # (n, k*d, dim)
        L = np.einsum("aij,mj->mai", DB, U)
        return L.reshape(U.shape[0], n, self.k, -1)

    def jac_product(self, U) -> np.ndarray:
        """prod_a Jac(D_{x_a - b} P) for P = B u, vectorised over rows of U."""
        U = np.atleast_2d(U)
        L = self._lambdas(U)
        G = np.einsum("mnij,mnlj->mnil", L, L)
        det = np.linalg.det(G) if self.k > 1 else G[..., 0, 0]
        return np.prod(np.sqrt(np.maximum(det, 0.0)), axis=1)

    def phi(self, U) -> np.ndarray:
        return self.jac_product(U) ** 2

    def theta(self, U) -> np.ndarray:
        return self.phi(U) / self.N

    def sqrt_theta(self, U) -> np.ndarray:
        return self.jac_product(U) / math.sqrt(self.N)


def _neg_log_phi(u, data: EvaluationData, DB: np.ndarray, n: int):
    nrm2 = u @ u
    L = (DB @ u).reshape(n, data.k, -1)
    val = 0.0
    grad = np.zeros_like(u)
    for a in range(n):
        G = L[a] @ L[a].T
        sign, logdet = np.linalg.slogdet(G)
        if sign <= 0:
            return 1e30, np.zeros_like(u)
        val += logdet
        W = np.linalg.solve(G, L[a])
        grad += 2 * DB[a].T @ W.reshape(-1)
    deg = n * data.k
    val -= deg * math.log(nrm2)
    grad -= 2 * deg * u / nrm2
    return -val, -grad


def evaluation_data(x, k: int = 1, gradient: bool = False, n_starts: int = N_STARTS,
                    seed: int = 0) -> EvaluationData:
    """Evaluation map, its kernel and the polar data (N, theta) at x.

    N is the maximum of prod_a Jac^2(D P) over the unit sphere of ker(ev),
    found by multi-start quasi-Newton ascent of the scale-invariant
    log-ratio and then checked against random sphere samples.
    """
    x = _cfg(x)
    n, d = len(x), x.dim
    if n > MAX_POINTS:
        raise PreconditionError(f"at most {MAX_POINTS} points")
    if gradient and k != d:
        raise PreconditionError("gradient mode needs k = d")
    if k > d:
        raise PreconditionError("codimension k must not exceed d")
    xc = x.centered
    if n > 1 and min(np.linalg.norm(xc[i] - xc[j]) for i in range(n) for j in range(i + 1, n)) == 0:
        raise PreconditionError("configuration lies on the diagonal")
    ev, D = _ambient_maps(xc, k, gradient)
    s = np.linalg.svd(ev, compute_uv=False)
    if s.min() <= 1e-12 * s.max():
        raise DegeneracyError("evaluation map is rank deficient")
    B = linalg.null_space(ev)
    C = linalg.orth(ev.T)
    jac = math.sqrt(float(np.linalg.det(ev @ ev.T)))
    data = EvaluationData(x, k, gradient, ev, B, C, D, jac, 1.0)
    DB = D @ B
    m = B.shape[1]
    rng = rng_for(seed, 0)
    best, best_u = -np.inf, None
    starts = rng.standard_normal((n_starts, m))
    for u0 in starts:
        res = optimize.minimize(_neg_log_phi, u0, args=(data, DB, n), jac=True, method="L-BFGS-B",
                                options={"gtol": 1e-10, "ftol": 1e-14, "maxiter": 500})
        u = res.x / np.linalg.norm(res.x)
        val = float(data.phi(u[None])[0])
        if val > best:
            best, best_u = val, u
    probe = rng.standard_normal((4096, m))
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    vals = data.phi(probe)
    if vals.max() > best:  # never trust an ascent that a random probe beats
        best, best_u = float(vals.max()), probe[int(np.argmax(vals))]
    if not best > 0:
        raise DegeneracyError("product of Jacobians vanishes on the evaluation kernel")
    data.N = best
    data.argmax = best_u
    U = rng.standard_normal((8, m))
    lhs = data.jac_product(U)
    rhs = math.sqrt(data.N) * np.sqrt(data.theta(U))
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=0), "polar decomposition identity failed"
    return data


def upsilon(x, k: int = 1, gradient: bool = False, data: EvaluationData = None) -> float:
    """Universal part sqrt(N) / Jac(ev)."""
    data = data or evaluation_data(x, k, gradient)
    return math.sqrt(data.N) / data.jac_ev


# ---------------------------------------------------------------------------
# field-dependent part

@dataclass
class MCResult:
    value: float
    stderr: float

    def __iter__(self):
        return iter((self.value, self.stderr))


def _block_diag(mats: List[np.ndarray]) -> np.ndarray:
    return linalg.block_diag(*mats) if mats else np.zeros((0, 0))


def schur_split(datas: Sequence[EvaluationData], Sigma: np.ndarray):
    """(Sigma_0, Sigma_tilde) for the splitting G^perp + G of the product space."""
    B = _block_diag([dd.kernel_basis for dd in datas])
    C = _block_diag([dd.complement_basis for dd in datas])
    S0 = C.T @ Sigma @ C
    S1 = B.T @ Sigma @ B
    S2 = B.T @ Sigma @ C
    try:
        L0 = np.linalg.cholesky(0.5 * (S0 + S0.T))
    except np.linalg.LinAlgError:
        raise MatrixError("Sigma restricted to the complement is not positive definite") from None
    A = linalg.cho_solve((L0, True), S2.T).T
    St = S1 - A @ S2.T
    return S0, 0.5 * (St + St.T)


def _latent_blocks(dims: Sequence[int], mc_samples: int, seed: int, design: str, groups: int):
    """Per-group, per-block standard normal arrays.

    ``iid``: one joint sample per point.  ``grid``: each block gets its own
    draws, every block but the last is completed by its sign flips, and the
    integrand is averaged over the full product grid.
    """
    out = []
    nb = len(dims)
    per_group = max(1, mc_samples // groups)
    for g in range(groups):
        rng = rng_for(seed, g)
        if design == "iid" or nb == 1:
            Z = rng.standard_normal((per_group, sum(dims)))
            out.append(("iid", np.split(Z, np.cumsum(dims)[:-1], axis=1)))
            continue
        n = max(2, int(round(per_group ** (1.0 / nb))))
        blocks = []
        for b, m in enumerate(dims):
            if b < nb - 1:
                half = rng.standard_normal(((n + 1) // 2, m))
                blocks.append(np.vstack([half, -half]))
            else:
                blocks.append(rng.standard_normal((n, m)))
        out.append(("grid", blocks))
    return out


def _group_mean(datas, L: np.ndarray, dims: Sequence[int], kind: str, Zs: List[np.ndarray]) -> float:
    offs = np.concatenate([[0], np.cumsum(dims)])
    if kind == "iid":
        U = np.hstack(Zs) @ L.T
        vals = np.ones(U.shape[0])
        for b, dd in enumerate(datas):
            vals *= dd.sqrt_theta(U[:, offs[b]:offs[b + 1]])
        return float(vals.mean())
    # grid: u = sum_b L[:, b] z_b over all combinations of per-block draws
    parts = [Z @ L[:, offs[b]:offs[b + 1]].T for b, Z in enumerate(Zs)]
    shape = tuple(len(Z) for Z in Zs)
    vals = None
    for b, dd in enumerate(datas):
        # lower-triangular L: block b only depends on draws of blocks <= b
        ub = None
        for c in range(b + 1):
            piece = parts[c][:, offs[b]:offs[b + 1]]
            piece = piece.reshape((1,) * c + (shape[c],) + (1,) * (len(shape) - c - 1) + (dims[b],))
            ub = piece if ub is None else ub + piece
        ub = np.broadcast_to(ub, shape[:b + 1] + (1,) * (len(shape) - b - 1) + (dims[b],))
        flat = ub.reshape(-1, dims[b])
        tb = dd.sqrt_theta(flat).reshape(ub.shape[:-1])
        vals = tb if vals is None else vals * tb
    return float(np.broadcast_to(vals, shape).mean())


def sigma_small(datas: Sequence[EvaluationData], Sigma, mc_samples: int = 200_000, seed: int = 0,
                design: str = "iid", groups: int = 16, latent=None,
                force_theta_one: bool = False) -> MCResult:
    """Gaussian integral of prod_I sqrt(theta_I) over the product of kernels.

    Conditions the complement component on zero (Schur complement),
    averages the integrand over the conditional Gaussian and multiplies by
    det(2 pi Sigma_0)^(-1/2).  The standard error comes from ``groups``
    independent replicate estimates.  ``latent`` lets callers share the
    per-block standard normal draws between calls.
    """
    S = Sigma.matrix if isinstance(Sigma, SymmetricOperator) else np.asarray(Sigma, dtype=float)
    ev = np.linalg.eigvalsh(0.5 * (S + S.T))
    if ev.min() <= 0:
        raise MatrixError("Sigma is not positive definite")
    S0, St = schur_split(datas, S)
    sign, logdet = np.linalg.slogdet(2 * np.pi * S0)
    pref = math.exp(-0.5 * logdet)
    dims = [dd.dim for dd in datas]
    L = psd_cholesky(St)
    if force_theta_one:
        return MCResult(pref, 0.0)
    if latent is None:
        latent = _latent_blocks(dims, mc_samples, seed, design, groups)
    means = np.array([_group_mean(datas, L, dims, kind, Zs) for kind, Zs in latent])
    val = pref * float(means.mean())
    se = pref * float(means.std(ddof=1) / math.sqrt(len(means))) if len(means) > 1 else float("nan")
    return MCResult(val, se)


# ---------------------------------------------------------------------------
# densities

def _jet_atoms(x: PointConfig):
    d = x.dim
    zero = (0,) * d
    vals = [(tuple(p), zero) for p in x.points]
    ders = [(tuple(p), tuple(int(t == j) for t in range(d))) for p in x.points for j in range(d)]
    return vals, ders


def joint_value_jet_covariance(kernel, x) -> Tuple[np.ndarray, np.ndarray]:
    """Covariance of (f(x_a))_a followed by (D_{x_a} f)_a; returns (matrix, n_values)."""
    x = _cfg(x)
    vals, ders = _jet_atoms(x)
    K = atom_covariance(kernel, vals + ders)
    return K, len(vals) * kernel.k


def rho1_closed_form(kernel) -> float:
    """rho_1 for (d, k) = (1, 1): sqrt(lambda_2 / r(0)) / pi."""
    z = np.zeros((1, 1))
    r0 = float(kernel.deriv((0,), (0,), z)[0, 0, 0])
    lam2 = float(kernel.deriv((1,), (1,), z)[0, 0, 0])
    return math.sqrt(lam2 / r0) / math.pi


def rho_A(kernel, x, k: int = None, gradient: bool = None, mc_samples: int = 200_000,
          seed: int = 0) -> MCResult:
    """Direct conditional-expectation Kac-Rice density."""
    x = _cfg(x)
    k = kernel.k if k is None else k
    if len(x) > MAX_POINTS or x.dim > 2:
        raise PreconditionError("direct path limited to |A| <= 3 and d <= 2")
    if len(x) == 1 and x.dim == 1 and kernel.k == 1:
        return MCResult(rho1_closed_form(kernel), 0.0)
    K, nv = joint_value_jet_covariance(kernel, x)
    Vf = K[:nv, :nv]
    det = float(np.linalg.det(2 * np.pi * Vf))
    if det < DIAG_DET_MIN:
        raise DegeneracyError("values at x are nearly degenerate; use the factorized path")
    labels = list(range(K.shape[0]))
    spec, _ = condition(GaussianSpec(labels, K), labels[:nv])
    L = psd_cholesky(spec.covariance)
    n, d, kk = len(x), x.dim, kernel.k
    rng = rng_for(seed, 0)
    Z = rng.standard_normal((mc_samples, L.shape[0]))
    Y = Z @ L.T
    # derivative atoms are ordered (point, axis j) with outputs innermost
    Lam = Y.reshape(mc_samples, n, d, kk).transpose(0, 1, 3, 2)
    G = np.einsum("mnij,mnlj->mnil", Lam, Lam)
    dets = np.linalg.det(G) if kk > 1 else G[..., 0, 0]
    J = np.prod(np.sqrt(np.maximum(dets, 0.0)), axis=1)
    scale = 1.0 / math.sqrt(det)
    return MCResult(scale * float(J.mean()), scale * float(J.std(ddof=1) / math.sqrt(mc_samples)))


def evaluation_data_for_blocks(x: PointConfig, I: Partition, k: int, gradient: bool) -> List[EvaluationData]:
    return [evaluation_data(x.sub(B), k, gradient) for B in I.blocks]


def sigma_tilde(kernel, x, I: Partition, gradient: bool = None, s: int = 5) -> SymmetricOperator:
    """Sigma_{2I}(f, x_{2A})."""
    return sigma_variance(kernel, I, _cfg(x), doubled=True, gradient=gradient, s=s)


def rho_A_factorized(kernel, x, I: Partition, k: int = None, gradient: bool = None,
                     mc_samples: int = 200_000, seed: int = 0, design: str = "iid") -> MCResult:
    """prod_I Upsilon_I(x_I) times sigma_I at Sigma_{2I}(f, x_{2A})."""
    x = _cfg(x)
    gradient = bool(getattr(kernel, "gradient", False)) if gradient is None else gradient
    k = kernel.k if k is None else k
    datas = evaluation_data_for_blocks(x, I, k, gradient)
    Sig = sigma_tilde(kernel, x, I, gradient)
    if Sig.min_eigenvalue() <= 0:
        raise DegeneracyError("Sigma_2I is not positive definite")
    sig = sigma_small(datas, Sig, mc_samples, seed, design=design)
    ups = math.prod(upsilon(None, data=dd) for dd in datas)
    return MCResult(ups * sig.value, ups * sig.stderr)


def cal_F_A(kernel, x, k: int = None, gradient: bool = None, mc_samples: int = 200_000,
            seed: int = 0) -> MCResult:
    """Cumulant Kac-Rice density: Moebius combination of the rho_J."""
    x = _cfg(x)
    cache: Dict[Tuple, MCResult] = {}
    total, var = 0.0, 0.0
    for J in partitions_of(x.labels):
        prod, rel2 = 1.0, 0.0
        for B in J.blocks:
            if B not in cache:
                cache[B] = rho_A(kernel, x.sub(B), k, gradient, mc_samples, _subseed(seed, B))
            v, se = cache[B]
            prod *= v
            rel2 += (se / v) ** 2 if v else 0.0
        w = mobius_weight(J)
        total += w * prod
        var += (w * prod) ** 2 * rel2
    return MCResult(total, math.sqrt(var))


# ---------------------------------------------------------------------------
# cumulant field-dependent parts

def block_of(I: Partition, J_block) -> Tuple:
    for B in I.blocks:
        if set(J_block) <= set(B):
            return B
    raise ValueError("partition does not refine")


def projection_matrix(x: PointConfig, I_block, J_block, k: int, gradient: bool) -> np.ndarray:
    """Matrix of Pi_{2J}^{2I}(., x_{2I}) in the block coordinates."""
    xi = x.sub(I_block).points
    X2 = np.vstack([xi, xi])
    n, d = len(I_block), x.dim
    pos = [I_block.index(a) for a in J_block]
    B = pos + [p + n for p in pos]
    qI, qJ = 2 * n - 1, 2 * len(J_block) - 1
    MI = len(multi_indices(d, qI))
    MJ = len(multi_indices(d, qJ))
    P = np.zeros((k * MJ, k * MI))
    for c in range(k):
        for m in range(MI):
            coef = np.zeros((k, MI))
            coef[c, m] = 1.0
            out = projection_pi(B, PolyVector(d, k, qI, coef), X2)
            P[:, c * MI + m] = out.coef.reshape(-1)
    if gradient:
        GI, _ = gradient_matrix(d, qI)
        GJ, _ = gradient_matrix(d, qJ)
        P = np.linalg.pinv(GJ) @ P @ GI
    return P


def _sub_partition(J: Partition, K_block) -> Partition:
    blocks = [b for b in J.blocks if set(b) <= set(K_block)]
    return Partition([a for a in J.ground if a in set(K_block)], blocks)


def F_I_J_from(datas: Dict[Tuple, EvaluationData], Pi: Dict[Tuple, np.ndarray], Sigma: SymmetricOperator,
               I: Partition, J: Partition, mc_samples: int = 200_000, seed: int = 0,
               design: str = "grid", groups: int = 16) -> MCResult:
    """Sum over K with I meet K = J of mu_K prod_K sigma_{J_K}((+Pi) Sigma (+Pi)^*).

    All sigma terms share per-J-block latent draws, so the estimate is
    exactly multiplicative whenever Sigma is block diagonal.
    """
    if not refines(J, I):
        raise ValueError("J must refine I")
    S = Sigma.matrix
    Jblocks = list(J.blocks)
    dims = {Bj: datas[Bj].dim for Bj in Jblocks}
    per_group = max(1, mc_samples // groups)
    nb = len(Jblocks)
    # shared latent draws per J-block
    draws = []
    for g in range(groups):
        rng = rng_for(seed, g)
        blocks = {}
        if design == "grid" and nb > 1:
            n = max(2, int(round(per_group ** (1.0 / nb))))
            for b, Bj in enumerate(Jblocks):
                if b < nb - 1:
                    half = rng.standard_normal(((n + 1) // 2, dims[Bj]))
                    blocks[Bj] = np.vstack([half, -half])
                else:
                    blocks[Bj] = rng.standard_normal((n, dims[Bj]))
        else:
            Z = rng.standard_normal((per_group, sum(dims.values())))
            off = 0
            for Bj in Jblocks:
                blocks[Bj] = Z[:, off:off + dims[Bj]]
                off += dims[Bj]
        draws.append(blocks)
    kind = "grid" if (design == "grid" and nb > 1) else "iid"
    # projection of Sigma onto the J-block spaces
    Iidx = {B: Sigma.block_indices(B) for B in I.blocks}
    rows = []
    for Bj in Jblocks:
        BI = block_of(I, Bj)
        R = np.zeros((Pi[Bj].shape[0], S.shape[0]))
        R[:, Iidx[BI]] = Pi[Bj]
        rows.append(R)
    PiAll = np.vstack(rows)
    SJ = PiAll @ S @ PiAll.T
    offs = np.concatenate([[0], np.cumsum([Pi[Bj].shape[0] for Bj in Jblocks])])
    jpos = {Bj: i for i, Bj in enumerate(Jblocks)}

    total_groups = np.zeros(groups)
    abs_groups = np.zeros(groups)
    for K in partitions_of(J.ground):
        if meet(I, K) != J:
            continue
        prod_groups = np.ones(groups)
        for Kb in K.blocks:
            JK = [Bj for Bj in Jblocks if set(Bj) <= set(Kb)]
            idx = np.concatenate([np.arange(offs[jpos[Bj]], offs[jpos[Bj] + 1]) for Bj in JK])
            Ssub = SJ[np.ix_(idx, idx)]
            dd = [datas[Bj] for Bj in JK]
            S0, St = schur_split(dd, Ssub)
            pref = math.exp(-0.5 * np.linalg.slogdet(2 * np.pi * S0)[1])
            L = psd_cholesky(St)
            dms = [datas[Bj].dim for Bj in JK]
            gm = []
            for g in range(groups):
                Zs = [draws[g][Bj] for Bj in JK]
                gm.append(_group_mean(dd, L, dms, kind, Zs) if len(JK) > 1 else _single_mean(dd[0], L, Zs[0]))
            prod_groups *= pref * np.array(gm)
        total_groups += mobius_weight(K) * prod_groups
        abs_groups += np.abs(prod_groups)
    # the Moebius sum cancels exactly in exact arithmetic on block-diagonal
    # Sigma, so the error bar also carries the floating-point cancellation error
    roundoff = 64 * np.finfo(float).eps * float(abs_groups.mean())
    se = math.hypot(float(total_groups.std(ddof=1) / math.sqrt(groups)), roundoff)
    return MCResult(float(total_groups.mean()), se)


def _single_mean(dd: EvaluationData, L: np.ndarray, Z: np.ndarray) -> float:
    return float(dd.sqrt_theta(Z @ L.T).mean())


def F_I_J(kernel, x, I: Partition, J: Partition, k: int = None, gradient: bool = None,
          mc_samples: int = 200_000, seed: int = 0, Sigma: SymmetricOperator = None,
          design: str = "grid") -> MCResult:
    """F-tilde_{I,J}(f, x) with the data of x and Sigma_{2I}(f, x_{2A}) (or a supplied Sigma)."""
    x = _cfg(x)
    gradient = bool(getattr(kernel, "gradient", False)) if gradient is None else gradient
    k = kernel.k if k is None else k
    datas = {Bj: evaluation_data(x.sub(Bj), k, gradient) for Bj in J.blocks}
    Pi = {Bj: projection_matrix(x, block_of(I, Bj), Bj, k, gradient) for Bj in J.blocks}
    Sig = Sigma if Sigma is not None else sigma_tilde(kernel, x, I, gradient)
    return F_I_J_from(datas, Pi, Sig, I, J, mc_samples, seed, design)


def F_A_via_blocks(kernel, x, I: Partition, k: int = None, gradient: bool = None,
                   mc_samples: int = 200_000, seed: int = 0) -> MCResult:
    """sum_{J <= I} F-tilde_{I,J} prod_J Upsilon_J."""
    x = _cfg(x)
    gradient = bool(getattr(kernel, "gradient", False)) if gradient is None else gradient
    k = kernel.k if k is None else k
    total, var = 0.0, 0.0
    ups_cache: Dict[Tuple, float] = {}
    for J in partitions_of(x.labels):
        if not refines(J, I):
            continue
        val, se = F_I_J(kernel, x, I, J, k, gradient, mc_samples, _subseed(seed, J.serialize()))
        u = 1.0
        for Bj in J.blocks:
            if Bj not in ups_cache:
                ups_cache[Bj] = upsilon(x.sub(Bj), k, gradient)
            u *= ups_cache[Bj]
        total += u * val
        var += (u * se) ** 2
    return MCResult(total, math.sqrt(var))


def F_A_stratified(kernel, x, eta: float = 0.25, **kw) -> MCResult:
    """F_A computed from the stratum of x: I = finest clustering partition at eta."""
    I = finest_clustering(_cfg(x), eta)
    return F_A_via_blocks(kernel, x, I, **kw)


def stratification_check(kernel, x, eta: float = 0.25, **kw) -> dict:
    """Recompute F_A with eta doubled; totals must agree within 3 combined stderr."""
    a = F_A_stratified(kernel, x, eta, **kw)
    b = F_A_stratified(kernel, x, 2 * eta, **kw)
    z = abs(a.value - b.value) / max(math.hypot(a.stderr, b.stderr), 1e-300)
    return {"eta": a, "two_eta": b, "z": z, "consistent": z <= 3.0}


# ---------------------------------------------------------------------------
# limit constants

def _expected_abs_bivariate(s1: float, s2: float, r: float) -> float:
    """E|XY| for centered Gaussians with sds s1, s2 and correlation r."""
    r = max(-1.0, min(1.0, r))
    return 2.0 / math.pi * s1 * s2 * (math.sqrt(1 - r * r) + r * math.asin(r))


def rho2_exact_1d(kernel, t: float) -> float:
    """rho_2(f, (0, t)) for d = k = 1 from the closed form for E|XY|."""
    K, nv = joint_value_jet_covariance(kernel, np.array([[0.0], [t]]))
    Vf = K[:2, :2]
    det = float(np.linalg.det(Vf))
    if det <= 0:
        raise DegeneracyError("values are degenerate")
    spec, _ = condition(GaussianSpec([0, 1, 2, 3], K), [0, 1])
    C = spec.covariance
    s1, s2 = math.sqrt(max(C[0, 0], 0)), math.sqrt(max(C[1, 1], 0))
    r = C[0, 1] / (s1 * s2) if s1 > 0 and s2 > 0 else 0.0
    return _expected_abs_bivariate(s1, s2, r) / (2 * math.pi * math.sqrt(det))


def expected_norm_2d(S: np.ndarray) -> float:
    """E|G| for G ~ N(0, S) in R^2 via the polar formula."""
    w, V = np.linalg.eigh(S)
    f = lambda th: math.sqrt(max(w[0], 0) * math.cos(th) ** 2 + max(w[1], 0) * math.sin(th) ** 2)
    val, _ = integrate.quad(f, 0, 2 * math.pi, epsabs=1e-14, epsrel=1e-13, limit=200)
    return math.sqrt(math.pi / 2) * val / (2 * math.pi)


def expected_abs_quadratic(S: np.ndarray, M: np.ndarray) -> float:
    """E|v^T M v| for v ~ N(0, S), from the characteristic function."""
    R = np.linalg.cholesky(S)
    lam = np.linalg.eigvalsh(R.T @ M @ R)

    def integrand(t):
        if t == 0:
            return 0.5 * float(2 * np.sum(lam ** 2) + np.sum(lam) ** 2)  # E[Q^2] / 2
        phi = np.prod((1 - 2j * lam * t) ** -0.5)
        return (1 - phi.real) / t ** 2

    a, _ = integrate.quad(integrand, 0, 1, limit=400, epsabs=1e-14, epsrel=1e-12)
    b, _ = integrate.quad(integrand, 1, np.inf, limit=400, epsabs=1e-14, epsrel=1e-12)
    return 2 / math.pi * (a + b)


def gamma1(kernel, k: int = None, gradient: bool = None, mc_samples: int = 400_000, seed: int = 0) -> MCResult:
    """gamma_1 = rho_1(f, 0), by closed form where available."""
    k = kernel.k if k is None else k
    d = kernel.d
    z = np.zeros((1, d))
    if d == 1 and k == 1:
        return MCResult(rho1_closed_form(kernel), 0.0)
    K, nv = joint_value_jet_covariance(kernel, np.zeros((1, d)))
    Vf = K[:nv, :nv]
    Vd = K[nv:, nv:]
    cross = K[nv:, :nv]
    if np.abs(cross).max() > 1e-14:
        return rho_A(kernel, np.zeros((1, d)), k, gradient, mc_samples, seed)
    norm = math.sqrt(np.linalg.det(2 * np.pi * Vf))
    if k == 1 and d == 2:
        return MCResult(expected_norm_2d(Vd) / norm, 0.0)
    if k == 2 and d == 2:
        # Jac(Df) = |det Df|; entries ordered (axis j, output c)
        idx = lambda j, c: j * k + c
        M = np.zeros((4, 4))
        M[idx(0, 0), idx(1, 1)] = M[idx(1, 1), idx(0, 0)] = 0.5
        M[idx(1, 0), idx(0, 1)] = M[idx(0, 1), idx(1, 0)] = -0.5
        # reduce to the non-degenerate directions of Vd
        w, V = np.linalg.eigh(Vd)
        keep = w > 1e-12 * w.max()
        R = V[:, keep] * np.sqrt(w[keep])
        Mr = R.T @ M @ R
        return MCResult(expected_abs_quadratic(np.eye(keep.sum()), Mr) / norm, 0.0)
    return rho_A(kernel, np.zeros((1, d)), k, gradient, mc_samples, seed)


def truncation_radius(kernel, mass_tol: float = 1e-4) -> float:
    """Radius beyond which the squared envelope carries < mass_tol of its mass (radial, R^d)."""
    d = kernel.d
    try:
        kernel.envelope(np.array(0.0))
    except NotImplementedError:
        raise ConfigurationError("kernel has no decay envelope; truncation is not justified") from None
    g2 = lambda r: float(kernel.envelope(np.array(r)) ** 2) * r ** (d - 1)
    total, _ = integrate.quad(g2, 0, np.inf)
    lo, hi = 0.0, 1.0
    while integrate.quad(g2, hi, np.inf)[0] > mass_tol * total:
        hi *= 2
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if integrate.quad(g2, mid, np.inf)[0] > mass_tol * total:
            lo = mid
        else:
            hi = mid
    return hi


def _panels(R: float, width: float, order: int = 8):
    x, w = np.polynomial.legendre.leggauss(order)
    n = max(1, int(math.ceil(R / width)))
    edges = np.linspace(0, R, n + 1)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (a + b))
        weights.append(0.5 * (b - a) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def gamma2(kernel, k: int = None, gradient: bool = None, corr_length: float = 1.0,
           mc_samples: int = 20_000, seed: int = 0, n_angles: int = 8) -> dict:
    """gamma_2 from the integral of F_2 over the centered configurations.

    The centered configurations (-u/2, u/2) are parametrised by the
    difference u.  The induced Euclidean measure on the centered subspace
    is 2^(-d/2) du, which cancels the 2^(d/2) prefactor, so the integral
    is taken against du.  For k = d the diagonal term rho_1 is added.
    """
    k = kernel.k if k is None else k
    d = kernel.d
    R = truncation_radius(kernel)
    g1 = gamma1(kernel, k, gradient)
    nodes, weights = _panels(R, corr_length / 8)
    meta = {"truncation_radius": R, "panel_width": corr_length / 8, "gauss_order": 8}
    if d == 1:
        if k != 1:
            raise PreconditionError("d = 1 needs k = 1")
        F = np.array([rho2_exact_1d(kernel, t) - g1.value ** 2 for t in nodes])
        integral = 2 * float(np.sum(weights * F))
        value = g1.value + integral
        meta.update({"method": "closed-form E|XY|", "integral": integral})
        return {"value": value, "stderr": g1.stderr, "meta": meta}
    if d == 2:
        th = (np.arange(n_angles) + 0.5) * np.pi / n_angles  # F_2(0, u) = F_2(0, -u)
        total, var = 0.0, 0.0
        for t, w in zip(nodes, weights):
            acc, acc_var = 0.0, 0.0
            for j, a in enumerate(th):
                u = t * np.array([math.cos(a), math.sin(a)])
                try:
                    r2 = rho_A(kernel, np.vstack([np.zeros(2), u]), k, gradient, mc_samples,
                               _subseed(seed, float(t), j))
                except DegeneracyError:
                    r2 = MCResult(0.0, 0.0)
                acc += (r2.value - g1.value ** 2) / n_angles
                acc_var += (r2.stderr / n_angles) ** 2
            total += 2 * np.pi * t * w * acc
            var += (2 * np.pi * t * w) ** 2 * acc_var
        value = total + (g1.value if k == d else 0.0)
        meta.update({"method": "polar product rule, MC rho_2", "n_angles": n_angles, "integral": total})
        return {"value": value, "stderr": math.sqrt(var + g1.stderr ** 2), "meta": meta}
    raise PreconditionError("gamma_2 supports d <= 2")


def gamma_constants(kernel, p: int = 1, k: int = None, gradient: bool = None, **kw) -> dict:
    if p == 1:
        r = gamma1(kernel, k, gradient)
        return {"value": r.value, "stderr": r.stderr}
    if p == 2:
        return gamma2(kernel, k, gradient, **kw)
    raise PreconditionError("only p in {1, 2}")
