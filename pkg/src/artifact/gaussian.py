"""Gaussian vectors and stationary Gaussian fields on grids.

Kernels are given in stationary form: ``kernel.deriv(alpha, beta, Z)``
returns cov(d^alpha f(0), d^beta f(z)) as an array of shape (n, k, k) for
an array Z of lags with shape (n, d).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import hermite_e
from scipy import linalg

DENSE_CAP = 20_000
JITTER_REL = 1e-12
JITTER_STEPS = 3
PSD_TOL = 1e-10


class MatrixError(ValueError):
    pass


class ConditioningError(MatrixError):
    pass


class SizeError(ValueError):
    pass


def rng_for(seed: int, replica: int = 0) -> np.random.Generator:
    """Independent stream for (master seed, replica index)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(replica),))))


# ---------------------------------------------------------------------------
# kernels

def gaussian_derivative(n: int, t, scale: float = 1.0) -> np.ndarray:
    """n-th derivative of exp(-t^2 / (2 scale^2))."""
    u = np.asarray(t, dtype=float) / scale
    c = np.zeros(n + 1)
    c[n] = 1.0
    return (-1) ** n * scale ** (-n) * hermite_e.hermeval(u, c) * np.exp(-0.5 * u * u)


class CovarianceKernel:
    """Base class; subclasses implement ``deriv``."""

    name = "kernel"
    d = 1
    k = 1
    max_order = 0
    gradient = False

    def deriv(self, alpha, beta, Z) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, Z) -> np.ndarray:
        return self.deriv((0,) * self.d, (0,) * self.d, Z)

    def envelope(self, z) -> np.ndarray:
        raise NotImplementedError

    def axis_factors(self):
        """For separable scalar kernels: one callable (n, t) -> phi^(n)(t) per axis."""
        return None

    def to_json(self) -> dict:
        return {"name": self.name, "d": self.d, "k": self.k}


class SeparableGaussianKernel(CovarianceKernel):
    """r(0, z) = exp(-|z|^2 / (2 s^2)) Id_k; s = 1 is Bargmann-Fock.

    Independent copies for k > 1.
    """

    def __init__(self, d: int = 1, k: int = 1, scale: float = 1.0, max_order: int = 16):
        if d < 1 or k < 1 or scale <= 0:
            raise ValueError("need d, k >= 1 and a positive scale")
        self.d, self.k, self.scale, self.max_order = int(d), int(k), float(scale), int(max_order)
        self.name = "bargmann_fock" if self.scale == 1.0 else "gaussian"

    def _scalar(self, gamma, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.d)
        out = np.ones(Z.shape[0])
        for j, g in enumerate(gamma):
            out = out * gaussian_derivative(int(g), Z[:, j], self.scale)
        return out

    def deriv(self, alpha, beta, Z) -> np.ndarray:
        alpha, beta = tuple(alpha), tuple(beta)
        if sum(alpha) + sum(beta) > self.max_order:
            from .kergin import KernelCapabilityError
            raise KernelCapabilityError("derivative order above kernel capability")
        gamma = tuple(a + b for a, b in zip(alpha, beta))
        val = (-1) ** sum(alpha) * self._scalar(gamma, Z)
        return val[:, None, None] * np.eye(self.k)[None]

    def envelope(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.exp(-0.25 * z * z / self.scale ** 2)

    def axis_factors(self):
        if self.k != 1:
            return None
        return [lambda n, t, s=self.scale: gaussian_derivative(n, t, s)] * self.d

    def spectral_moment(self, n: int) -> float:
        """Var of the n-th derivative of the 1D process, (2n-1)!! / s^(2n)."""
        return math.prod(range(1, 2 * n, 2)) / self.scale ** (2 * n)

    def to_json(self) -> dict:
        return {"name": self.name, "d": self.d, "k": self.k, "scale": self.scale}


def bargmann_fock(d: int = 1, k: int = 1) -> SeparableGaussianKernel:
    return SeparableGaussianKernel(d, k, 1.0)


class GradientKernel(CovarianceKernel):
    """Kernel of f = grad h for a scalar stationary h."""

    gradient = True

    def __init__(self, base: CovarianceKernel):
        if base.k != 1:
            raise ValueError("gradient mode needs a scalar base kernel")
        self.base = base
        self.d = self.k = base.d
        self.max_order = base.max_order - 2
        self.name = f"grad_{base.name}"

    def deriv(self, alpha, beta, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.d)
        out = np.empty((Z.shape[0], self.k, self.k))
        for i in range(self.d):
            ai = tuple(a + (t == i) for t, a in enumerate(alpha))
            for j in range(self.d):
                bj = tuple(b + (t == j) for t, b in enumerate(beta))
                out[:, i, j] = self.base.deriv(ai, bj, Z)[:, 0, 0]
        return out

    def envelope(self, z):
        return self.base.envelope(z)

    def to_json(self) -> dict:
        return {"name": "gradient", "base": self.base.to_json()}


def kernel_from_config(cfg: dict) -> CovarianceKernel:
    name = cfg.get("name", "bargmann_fock")
    if name == "gradient":
        return GradientKernel(kernel_from_config(cfg["base"]))
    if name in ("bargmann_fock", "gaussian"):
        return SeparableGaussianKernel(int(cfg.get("d", 1)), int(cfg.get("k", 1)), float(cfg.get("scale", 1.0)))
    raise ValueError(f"unknown kernel {name!r}")


# ---------------------------------------------------------------------------
# finite-dimensional Gaussian algebra

def psd_cholesky(S: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor with the escalating jitter policy."""
    S = np.asarray(S, dtype=float)
    if S.size == 0:
        return S.copy()
    S = 0.5 * (S + S.T)
    scale = float(np.trace(S))
    if scale == 0.0:
        if np.any(S != 0):
            raise MatrixError("indefinite matrix with zero trace")
        return np.zeros_like(S)
    ev_min = float(np.linalg.eigvalsh(S).min()) if S.shape[0] <= 400 else None
    if ev_min is not None and ev_min < -PSD_TOL * max(1.0, scale):
        raise MatrixError(f"matrix is not PSD (least eigenvalue {ev_min:.3e})")
    for jitter in [0.0] + [JITTER_REL * scale * 10 ** step for step in range(JITTER_STEPS + 1)]:
        try:
            return np.linalg.cholesky(S + jitter * np.eye(S.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise MatrixError("Cholesky failed after jitter escalation")


@dataclass
class GaussianSpec:
    labels: Tuple[Hashable, ...]
    covariance: np.ndarray

    def __post_init__(self):
        self.labels = tuple(self.labels)
        C = np.asarray(self.covariance, dtype=float).reshape(len(self.labels), len(self.labels))
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("labels must be distinct")
        if not np.allclose(C, C.T, atol=1e-12 * max(1.0, float(np.abs(C).max(initial=0)))):
            raise MatrixError("covariance is not symmetric")
        C = 0.5 * (C + C.T)
        if C.size and np.linalg.eigvalsh(C).min() < -PSD_TOL * max(1.0, float(np.trace(C))):
            raise MatrixError("covariance is not PSD")
        self.covariance = C

    def index(self, labels) -> List[int]:
        return [self.labels.index(l) for l in labels]


def condition(spec: GaussianSpec, observed: Sequence[Hashable], values=None):
    """Condition on observed coordinates; returns (GaussianSpec, mean of the rest)."""
    obs = spec.index(observed)
    rest = [i for i in range(len(spec.labels)) if i not in obs]
    values = np.zeros(len(obs)) if values is None else np.asarray(values, dtype=float)
    C = spec.covariance
    S0 = C[np.ix_(obs, obs)]
    S1 = C[np.ix_(rest, rest)]
    S2 = C[np.ix_(rest, obs)]
    if not obs:
        return GaussianSpec([spec.labels[i] for i in rest], S1), np.zeros(len(rest))
    if np.linalg.eigvalsh(S0).min() <= PSD_TOL * max(1.0, float(np.trace(S0))):
        raise ConditioningError("observed block is singular beyond the jitter tolerance")
    try:
        L = psd_cholesky(S0)
        if np.any(np.diag(L) <= 0):
            raise MatrixError("singular")
    except MatrixError as e:
        raise ConditioningError(f"observed block is singular: {e}") from None
    A = linalg.cho_solve((L, True), S2.T).T  # S2 S0^-1
    cond = S1 - A @ S2.T
    mean = A @ values
    return GaussianSpec([spec.labels[i] for i in rest], 0.5 * (cond + cond.T)), mean


def sample(spec: GaussianSpec, seed: int, n: int, replica: int = 0) -> np.ndarray:
    """n draws of N(0, covariance), shape (n, dim)."""
    L = psd_cholesky(spec.covariance)
    Z = rng_for(seed, replica).standard_normal((n, len(spec.labels)))
    return Z @ L.T


# ---------------------------------------------------------------------------
# grid fields

@dataclass
class GridField:
    dim: int
    h: float
    origin: Tuple[float, ...]
    shape: Tuple[int, ...]
    channels: Dict[Tuple[int, ...], np.ndarray]
    seed: Optional[int] = None
    replica: Optional[int] = None
    kernel: dict = field(default_factory=dict)

    def axis(self, j: int) -> np.ndarray:
        return self.origin[j] + self.h * np.arange(self.shape[j])

    def header(self) -> dict:
        return {
            "dim": self.dim, "h": self.h, "origin": list(self.origin), "shape": list(self.shape),
            "channels": [[list(a), list(v.shape)] for a, v in self.channels.items()],
            "seed": self.seed, "replica": self.replica, "kernel": self.kernel, "dtype": "<f8",
        }


def save_grid_field(gf: GridField, path) -> None:
    """Flat binary container: 8-byte header length, JSON header, raw float64 channels."""
    head = json.dumps(gf.header(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(len(head).to_bytes(8, "little"))
        fh.write(head)
        for v in gf.channels.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_grid_field(path) -> GridField:
    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(8), "little")
        head = json.loads(fh.read(n))
        channels = {}
        for a, shape in head["channels"]:
            count = int(np.prod(shape))
            channels[tuple(a)] = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
    return GridField(head["dim"], head["h"], tuple(head["origin"]), tuple(head["shape"]),
                     channels, head["seed"], head["replica"], head["kernel"])


def _window(window, d: int):
    w = np.atleast_1d(np.asarray(window, dtype=float))
    if w.ndim == 1:
        if w.size == 1 and d > 1:
            w = np.repeat(w, d)
        w = np.stack([np.zeros(d), w[:d]], axis=1)
    if w.shape != (d, 2):
        raise ValueError("window must be an extent per axis or (lo, hi) pairs")
    return w


class GridSampler:
    """Precomputed factors for repeated joint draws of channels on a grid.

    Separable scalar kernels are sampled through per-axis Cholesky factors
    of the joint (order, node) covariance, whose Kronecker product is the
    exact joint covariance; other kernels use one dense factor.
    """

    def __init__(self, kernel: CovarianceKernel, window, h: float, channels=None, dense: bool = False):
        if h <= 0:
            raise ValueError("spacing must be positive")
        self.kernel = kernel
        d = kernel.d
        self.d = d
        self.h = float(h)
        self.win = _window(window, d)
        self.shape = tuple(int(round((hi - lo) / h)) + 1 for lo, hi in self.win)
        self.origin = tuple(float(lo) for lo, _ in self.win)
        self.channels = [tuple(a) for a in (channels or [(0,) * d])]
        if isinstance(kernel, GradientKernel):
            self.base = kernel.base
            self.base_channels = sorted({tuple(a + (t == i) for t, a in enumerate(al))
                                         for al in self.channels for i in range(d)})
            self.copies = 1
        else:
            self.base = kernel
            self.base_channels = list(self.channels)
            self.copies = kernel.k
        factors = None if dense else self.base_scalar_factors()
        if factors is not None:
            self.mode = "kron"
            self.orders = [sorted({a[j] for a in self.base_channels}) for j in range(d)]
            self.L = []
            for j in range(d):
                n, orders = self.shape[j], self.orders[j]
                if n * len(orders) > DENSE_CAP:
                    raise SizeError("axis factor exceeds the dense cap; split the window into replicas")
                x = self.h * np.arange(n)
                lag = x[None, :] - x[:, None]
                C = np.block([[(-1) ** o * factors[j](o + p, lag) for p in orders] for o in orders])
                self.L.append(psd_cholesky(C))
        else:
            self.mode = "dense"
            total = int(np.prod(self.shape)) * len(self.base_channels)
            if total > DENSE_CAP:
                raise SizeError(f"{total} node-channels exceed the dense cap {DENSE_CAP}; "
                                "use a separable kernel or split the window into replicas")
            pts = np.stack(np.meshgrid(*[self.h * np.arange(n) for n in self.shape], indexing="ij"),
                           axis=-1).reshape(-1, d)
            blocks = []
            for a in self.base_channels:
                row = []
                for b in self.base_channels:
                    Z = (pts[None, :, :] - pts[:, None, :]).reshape(-1, d)
                    row.append(self.base.deriv(a, b, Z)[:, 0, 0].reshape(len(pts), len(pts)))
                blocks.append(row)
            self.L = [psd_cholesky(np.block(blocks))]

    def base_scalar_factors(self):
        b = self.base
        if isinstance(b, SeparableGaussianKernel):
            return [lambda n, t, s=b.scale: gaussian_derivative(n, t, s)] * b.d
        return None

    @property
    def latent_size(self) -> int:
        if self.mode == "kron":
            return int(np.prod([L.shape[0] for L in self.L]))
        return self.L[0].shape[0]

    def _base_draw(self, Z: np.ndarray) -> Dict[Tuple[int, ...], np.ndarray]:
        """Map latent normals (nrep, latent) to base channels (nrep, *shape)."""
        nrep = Z.shape[0]
        out = {}
        if self.mode == "kron":
            dims = [L.shape[0] for L in self.L]
            F = Z.reshape((nrep,) + tuple(dims))
            for j, L in enumerate(self.L):
                F = np.moveaxis(np.tensordot(F, L, axes=([1 + j], [1])), -1, 1 + j)
            for a in self.base_channels:
                sl = [slice(None)]
                for j in range(self.d):
                    o = self.orders[j].index(a[j])
                    n = self.shape[j]
                    sl.append(slice(o * n, (o + 1) * n))
                out[a] = F[tuple(sl)]
        else:
            F = Z @ self.L[0].T
            n = int(np.prod(self.shape))
            for c, a in enumerate(self.base_channels):
                out[a] = F[:, c * n:(c + 1) * n].reshape((nrep,) + self.shape)
        return out

    def draw(self, seed: int, replicas: Sequence[int]) -> Dict[Tuple[int, ...], np.ndarray]:
        """Channels for the given replicas, arrays of shape (nrep, *shape, k)."""
        replicas = list(replicas)
        m = self.latent_size
        Z = np.empty((len(replicas), m * self.copies))
        for r, rep in enumerate(replicas):
            Z[r] = rng_for(seed, rep).standard_normal(m * self.copies)
        copies = [self._base_draw(Z[:, c * m:(c + 1) * m]) for c in range(self.copies)]
        out = {}
        for a in self.channels:
            if isinstance(self.kernel, GradientKernel):
                comps = [copies[0][tuple(x + (t == i) for t, x in enumerate(a))] for i in range(self.d)]
            else:
                comps = [copies[c][a] for c in range(self.copies)]
            out[a] = np.stack(comps, axis=-1)
        return out

    def iter_draws(self, seed: int, replicas: int, chunk: int = 64, threads: int = 1):
        """Yield (start, channels) over fixed-size replica chunks.

        Chunk boundaries do not depend on ``threads``; with several threads
        chunks are computed concurrently but yielded in order.
        """
        starts = list(range(0, replicas, chunk))

        def work(s):
            return s, self.draw(seed, range(s, min(replicas, s + chunk)))

        if threads <= 1:
            for s in starts:
                yield work(s)
        else:
            with ThreadPoolExecutor(max_workers=threads) as ex:
                for i in range(0, len(starts), threads):
                    for res in ex.map(work, starts[i:i + threads]):
                        yield res

    def field(self, seed: int, replica: int = 0) -> GridField:
        ch = {a: v[0] for a, v in self.draw(seed, [replica]).items()}
        return GridField(self.d, self.h, self.origin, self.shape, ch, seed, replica, self.kernel.to_json())


def grid_field(kernel: CovarianceKernel, window, h: float, channels=None, seed: int = 0,
               replica: int = 0, dense: bool = False) -> GridField:
    """One joint draw of the requested derivative channels on a grid.

    Each channel array has shape (*grid_shape, k).
    """
    return GridSampler(kernel, window, h, channels, dense=dense).field(seed, replica)


def grid_covariance(kernel: CovarianceKernel, window, h: float, channels=None) -> np.ndarray:
    """Exact joint covariance of the flattened channels (dense; small grids only)."""
    d = kernel.d
    win = _window(window, d)
    shape = tuple(int(round((hi - lo) / h)) + 1 for lo, hi in win)
    pts = np.stack(np.meshgrid(*[h * np.arange(n) for n in shape], indexing="ij"), axis=-1).reshape(-1, d)
    channels = [tuple(a) for a in (channels or [(0,) * d])]
    k = kernel.k
    N = len(pts)
    rows = []
    for a in channels:
        row = []
        for b in channels:
            Z = (pts[None, :, :] - pts[:, None, :]).reshape(-1, d)
            K = kernel.deriv(a, b, Z).reshape(N, N, k, k).transpose(0, 2, 1, 3).reshape(N * k, N * k)
            row.append(K)
        rows.append(row)
    return np.block(rows)
