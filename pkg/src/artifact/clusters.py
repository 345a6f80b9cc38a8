"""Clustering partitions of point configurations and thick diagonals."""
from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Hashable, Sequence, Tuple

import numpy as np

from .partitions import BoundedSizeError, DomainError, Partition, meet, partitions_of

MAX_POINTS = 8
SEPARATION_SLACK = 1e-12


@dataclass(frozen=True, init=False)
class PointConfig:
    labels: Tuple[Hashable, ...]
    points: np.ndarray
    dim: int

    def __init__(self, labels: Sequence[Hashable], points):
        labels = tuple(labels)
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] != len(labels):
            raise DomainError("need exactly one point per label")
        if len(set(labels)) != len(labels):
            raise DomainError("labels must be distinct")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dim", pts.shape[1])

    @classmethod
    def from_points(cls, points) -> "PointConfig":
        pts = np.asarray(points, dtype=float)
        return cls(range(1, len(pts) + 1), pts)

    def __len__(self):
        return len(self.labels)

    def point(self, label) -> np.ndarray:
        return self.points[self.labels.index(label)]

    def sub(self, labels: Sequence[Hashable]) -> "PointConfig":
        idx = [self.labels.index(a) for a in labels]
        return PointConfig(tuple(labels), self.points[idx])

    @property
    def barycenter(self) -> np.ndarray:
        return self.points.mean(axis=0)

    @property
    def centered(self) -> np.ndarray:
        return self.points - self.barycenter

    def doubled(self) -> "PointConfig":
        """The configuration (x, x) indexed by (a, 0) and (a, 1)."""
        labels = [(a, 0) for a in self.labels] + [(a, 1) for a in self.labels]
        return PointConfig(labels, np.vstack([self.points, self.points]))


def _affine_min_norm(P: np.ndarray) -> np.ndarray:
    """Weights v (sum 1) minimizing |v @ P| over the affine hull of the rows of P."""
    k = P.shape[0]
    M = np.zeros((k + 1, k + 1))
    M[:k, :k] = P @ P.T
    M[:k, k] = 1.0
    M[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return sol[:k]


def min_norm_point(P: np.ndarray, tol: float = 1e-15, max_iter: int = 1000) -> np.ndarray:
    """Wolfe's minimum-norm-point algorithm for conv(rows of P)."""
    P = np.asarray(P, dtype=float)
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    S = [int(np.argmin(np.sum(P * P, axis=1)))]
    w = np.array([1.0])
    for _ in range(max_iter):
        x = w @ P[S]
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= tol * scale or j in S:
            return x
        S.append(j)
        w = np.append(w, 0.0)
        while True:
            v = _affine_min_norm(P[S])
            if np.all(v > 1e-14):
                w = v
                break
            neg = v <= 1e-14
            ratios = w[neg] / np.maximum(w[neg] - v[neg], 1e-300)
            theta = min(1.0, float(ratios.min()))
            w = w + theta * (v - w)
            keep = w > 1e-14
            if not keep.any():
                keep[np.argmax(w)] = True
            S = [s for s, k in zip(S, keep) if k]
            w = w[keep]
            w = w / w.sum()
    return w @ P[S]


def _as_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X[:, None]
    return X


def hull_distance(X, Y) -> float:
    """Euclidean distance between conv(X) and conv(Y)."""
    X, Y = _as_points(X), _as_points(Y)
    if X.size == 0 or Y.size == 0:
        raise DomainError("point lists must be non-empty")
    if X.shape[1] != Y.shape[1]:
        raise DomainError("dimension mismatch")
    if X.shape[1] == 1:
        lo = max(X.min(), Y.min())
        hi = min(X.max(), Y.max())
        return float(max(0.0, lo - hi))
    diff = (X[:, None, :] - Y[None, :, :]).reshape(-1, X.shape[1])
    return float(np.linalg.norm(min_norm_point(diff)))


def _as_config(x) -> PointConfig:
    return x if isinstance(x, PointConfig) else PointConfig.from_points(x)


def _is_separated(x: PointConfig, I: Partition, eta: float, cache: dict) -> bool:
    blocks = I.blocks
    for i in range(len(blocks)):
        for j in range(i + 1, len(blocks)):
            key = (blocks[i], blocks[j])
            if key not in cache:
                a = x.points[[x.labels.index(l) for l in blocks[i]]]
                b = x.points[[x.labels.index(l) for l in blocks[j]]]
                cache[key] = hull_distance(a, b)
            if not cache[key] > eta + SEPARATION_SLACK:
                return False
    return True


def clustering_partitions(x, eta: float) -> list:
    """All partitions whose distinct blocks have hulls more than eta apart."""
    x = _as_config(x)
    if len(x) > MAX_POINTS:
        raise BoundedSizeError(f"at most {MAX_POINTS} points")
    if eta < 0:
        raise DomainError("eta must be nonnegative")
    cache: dict = {}
    return [I for I in partitions_of(x.labels) if _is_separated(x, I, eta, cache)]


def finest_clustering(x, eta: float) -> Partition:
    x = _as_config(x)
    Q = clustering_partitions(x, eta)
    res = reduce(meet, Q)
    assert res in Q, "meet of clustering partitions left Q_eta"
    return res


def doubled_partition(I: Partition) -> Partition:
    """2I: each block B of I becomes B x {0, 1} on the doubled labels."""
    ground = [(a, 0) for a in I.ground] + [(a, 1) for a in I.ground]
    return Partition(ground, [[(a, s) for s in (0, 1) for a in b] for b in I.blocks])
