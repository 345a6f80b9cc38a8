"""Set partitions, Moebius weights and the moment/cumulant transforms.

Subsets of a ground set are addressed by bitmasks over ground positions,
so a ``SubsetIndexedValues`` over ``p`` labels is a dict keyed by the
integers ``1 .. 2**p - 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Hashable, Iterator, Mapping, Sequence, Tuple

import numpy as np

MAX_GROUND = 10


class PartitionError(ValueError):
    pass


class BoundedSizeError(PartitionError):
    pass


class DomainError(PartitionError):
    pass


class StatisticsError(ValueError):
    pass


@dataclass(frozen=True, init=False)
class Partition:
    """A set partition stored in canonical form.

    Blocks are sorted by ground order internally and ordered by their least
    element, so dataclass equality coincides with equality of the
    canonical serialization.
    """

    ground: Tuple[Hashable, ...]
    blocks: Tuple[Tuple[Hashable, ...], ...]

    def __init__(self, ground: Sequence[Hashable], blocks):
        ground = tuple(ground)
        if len(set(ground)) != len(ground):
            raise DomainError("ground labels must be distinct")
        pos = {g: i for i, g in enumerate(ground)}
        seen = set()
        canon = []
        for b in blocks:
            b = tuple(b)
            if not b:
                raise DomainError("empty block")
            for x in b:
                if x not in pos:
                    raise DomainError(f"label {x!r} not in ground set")
                if x in seen:
                    raise DomainError(f"label {x!r} appears in two blocks")
                seen.add(x)
            canon.append(tuple(sorted(b, key=pos.__getitem__)))
        if len(seen) != len(ground):
            raise DomainError("blocks do not cover the ground set")
        canon.sort(key=lambda b: pos[b[0]])
        object.__setattr__(self, "ground", ground)
        object.__setattr__(self, "blocks", tuple(canon))

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def serialize(self) -> str:
        return "{" + ",".join("{" + ",".join(map(str, b)) + "}" for b in self.blocks) + "}"

    def __str__(self):
        return self.serialize()

    def block_of(self, label) -> Tuple[Hashable, ...]:
        for b in self.blocks:
            if label in b:
                return b
        raise DomainError(f"label {label!r} not in ground set")

    def masks(self) -> Tuple[int, ...]:
        pos = {g: i for i, g in enumerate(self.ground)}
        return tuple(sum(1 << pos[x] for x in b) for b in self.blocks)

    def restrict(self, subset: Sequence[Hashable]) -> "Partition":
        """The induced partition {B ∩ subset} of ``subset``."""
        sub = set(subset)
        ground = tuple(g for g in self.ground if g in sub)
        if len(ground) != len(sub):
            raise DomainError("subset is not contained in the ground set")
        blocks = [tuple(x for x in b if x in sub) for b in self.blocks]
        return Partition(ground, [b for b in blocks if b])


def singletons(ground: Sequence[Hashable]) -> Partition:
    return Partition(ground, [(g,) for g in ground])


def full(ground: Sequence[Hashable]) -> Partition:
    return Partition(ground, [tuple(ground)])


def _check_size(n: int):
    if not (1 <= n <= MAX_GROUND):
        raise BoundedSizeError(f"ground size {n} outside 1..{MAX_GROUND}")


@lru_cache(maxsize=None)
def _rgs(n: int) -> Tuple[Tuple[int, ...], ...]:
    """All restricted growth strings of length n, in lexicographic order."""
    out = []
    a = [0] * n

    def rec(i, mx):
        if i == n:
            out.append(tuple(a))
            return
        for v in range(mx + 2):
            a[i] = v
            rec(i + 1, max(mx, v))

    if n:
        a[0] = 0
        rec(1, 0)
    return tuple(out)


def partitions_of(ground: Sequence[Hashable]) -> list:
    """All partitions of an arbitrary ground set (at most 10 labels)."""
    ground = tuple(ground)
    _check_size(len(ground))
    res = []
    for s in _rgs(len(ground)):
        blocks = [[] for _ in range(max(s) + 1)]
        for g, k in zip(ground, s):
            blocks[k].append(g)
        res.append(Partition(ground, blocks))
    return res


def enumerate_partitions(n: int) -> list:
    _check_size(n)
    return partitions_of(range(1, n + 1))


def bell(n: int) -> int:
    """Bell number via the Bell triangle."""
    row = [1]
    for _ in range(n):
        nxt = [row[-1]]
        for v in row:
            nxt.append(nxt[-1] + v)
        row = nxt
    return row[0]


def _same_ground(I: Partition, J: Partition):
    if set(I.ground) != set(J.ground) or len(I.ground) != len(J.ground):
        raise DomainError("partitions live on different ground sets")


def refines(J: Partition, I: Partition) -> bool:
    """True iff every block of J sits inside a block of I."""
    _same_ground(I, J)
    owner = {x: k for k, b in enumerate(I.blocks) for x in b}
    return all(len({owner[x] for x in b}) == 1 for b in J.blocks)


def meet(I: Partition, J: Partition) -> Partition:
    _same_ground(I, J)
    blocks = []
    for a in I.blocks:
        sa = set(a)
        for b in J.blocks:
            c = [x for x in b if x in sa]
            if c:
                blocks.append(c)
    return Partition(I.ground, blocks)


def mobius_weight(J) -> int:
    k = J if isinstance(J, int) else len(J)
    return (-1) ** (k - 1) * math.factorial(k - 1)


def pair_partitions(p: int) -> list:
    """Partitions of {1..p} into pairs; odd p gives an empty list."""
    if p % 2:
        return []
    _check_size(p)

    def rec(items):
        if not items:
            yield []
            return
        a = items[0]
        for i in range(1, len(items)):
            rest = items[1:i] + items[i + 1:]
            for tail in rec(rest):
                yield [(a, items[i])] + tail

    return [Partition(range(1, p + 1), bl) for bl in rec(list(range(1, p + 1)))]


# ---------------------------------------------------------------------------
# subset-indexed values

def _submask_partitions(mask: int) -> Tuple[Tuple[int, ...], ...]:
    """Partitions of the set encoded by ``mask``, each as a tuple of block masks."""
    return _mask_partitions_cached(mask)


@lru_cache(maxsize=None)
def _mask_partitions_cached(mask: int):
    bits = [i for i in range(mask.bit_length()) if mask >> i & 1]
    out = []
    for s in _rgs(len(bits)):
        blocks = [0] * (max(s) + 1)
        for b, k in zip(bits, s):
            blocks[k] |= 1 << b
        out.append(tuple(blocks))
    return tuple(out)


class SubsetIndexedValues(Mapping):
    """Values indexed by the non-empty subsets of a ground set.

    Keys may be given either as bitmasks over ground positions or as
    iterables of labels.
    """

    def __init__(self, ground: Sequence[Hashable], values: Mapping):
        self.ground = tuple(ground)
        if len(set(self.ground)) != len(self.ground):
            raise DomainError("ground labels must be distinct")
        _check_size(len(self.ground))
        self._pos = {g: i for i, g in enumerate(self.ground)}
        vals = {}
        for k, v in values.items():
            vals[self._mask(k)] = v
        full_mask = (1 << len(self.ground)) - 1
        missing = [m for m in range(1, full_mask + 1) if m not in vals]
        if missing:
            raise DomainError(f"{len(missing)} subsets have no value")
        self._values = vals

    def _mask(self, key) -> int:
        if isinstance(key, (int, np.integer)):
            m = int(key)
            if not (0 < m < 1 << len(self.ground)):
                raise DomainError(f"bad subset mask {m}")
            return m
        m = 0
        for x in key:
            if x not in self._pos:
                raise DomainError(f"label {x!r} not in ground set")
            m |= 1 << self._pos[x]
        if m == 0:
            raise DomainError("empty subset")
        return m

    @classmethod
    def from_function(cls, ground, fn: Callable) -> "SubsetIndexedValues":
        """Build values from ``fn(tuple_of_labels)``."""
        ground = tuple(ground)
        vals = {}
        for m in range(1, 1 << len(ground)):
            vals[m] = fn(tuple(g for i, g in enumerate(ground) if m >> i & 1))
        return cls(ground, vals)

    def labels(self, mask: int) -> Tuple[Hashable, ...]:
        return tuple(g for i, g in enumerate(self.ground) if mask >> i & 1)

    def __getitem__(self, key):
        return self._values[self._mask(key)]

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self._values))

    def __len__(self):
        return len(self._values)

    def full(self):
        return self._values[(1 << len(self.ground)) - 1]


def _transform(vals: SubsetIndexedValues, weighted: bool) -> SubsetIndexedValues:
    out: Dict[int, object] = {}
    for mask in vals:
        total = 0
        for parts in _submask_partitions(mask):
            term = mobius_weight(len(parts)) if weighted else 1
            for b in parts:
                term = term * vals[b]
            total = total + term
        out[mask] = total
    return SubsetIndexedValues(vals.ground, out)


def moments_to_cumulants(m: SubsetIndexedValues) -> SubsetIndexedValues:
    """kappa_B as the Moebius-weighted sum over partitions of B of block moments."""
    return _transform(m, True)


def cumulants_to_moments(kappa: SubsetIndexedValues) -> SubsetIndexedValues:
    return _transform(kappa, False)


def sample_joint_cumulant(samples) -> Tuple[float, float]:
    """Plug-in joint cumulant of all columns, with a jackknife standard error.

    Each column is shifted by its sample mean first; for p >= 2 the joint
    cumulant is shift invariant and the shift keeps the raw moments small.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n < 2:
        raise StatisticsError("need at least two replicas")
    if not 1 <= p <= 6:
        raise BoundedSizeError("at most 6 coordinates")
    if p >= 2:
        x = x - x.mean(axis=0)
    full_mask = (1 << p) - 1
    prods = {}
    for mask in range(1, full_mask + 1):
        cols = [i for i in range(p) if mask >> i & 1]
        prods[mask] = np.prod(x[:, cols], axis=1)
    sums = {k: v.sum() for k, v in prods.items()}

    def kappa(moment):
        total = 0.0
        for parts in _submask_partitions(full_mask):
            term = mobius_weight(len(parts))
            for b in parts:
                term = term * moment[b]
            total = total + term
        return total

    est = kappa({k: s / n for k, s in sums.items()})
    loo = kappa({k: (sums[k] - prods[k]) / (n - 1) for k in prods})
    loo = np.broadcast_to(np.asarray(loo, dtype=float), (n,))
    se = math.sqrt((n - 1) / n * float(np.sum((loo - loo.mean()) ** 2)))
    return float(est), se
