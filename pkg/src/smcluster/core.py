"""Partition algebra, the Chinese restaurant process prior and the Ewens score.

Observations are identified by their arrival index (``DataId``).  A
:class:`Cluster` is an immutable sorted tuple of ids with a cached hash, and a
:class:`Partition` is an immutable set of disjoint clusters.  Both have a
canonical form so they can be used directly as dict keys when detecting
duplicate particles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, Optional, Protocol, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

DataId = int

MAX_ENUMERATION = 10


class Scorer(Protocol):
    """Anything that returns the log marginal likelihood of a cluster."""

    def log_marginal(self, cluster: "Cluster") -> float: ...


class Cluster:
    """A non-empty set of observation ids, stored sorted ascending."""

    __slots__ = ("members", "_hash")

    def __init__(self, members: Iterable[DataId]):
        ids = tuple(sorted(int(i) for i in members))
        if not ids:
            raise ValueError("a cluster must be non-empty")
        for a, b in zip(ids, ids[1:]):
            if a == b:
                raise ValueError(f"duplicate id {a} in cluster")
        if ids[0] < 0:
            raise ValueError("ids must be non-negative")
        self.members = ids
        self._hash = hash(ids)

    @classmethod
    def _sorted(cls, ids: tuple) -> "Cluster":
        # ids already sorted, unique, non-empty
        obj = cls.__new__(cls)
        obj.members = ids
        obj._hash = hash(ids)
        return obj

    @classmethod
    def singleton(cls, x: DataId) -> "Cluster":
        return cls._sorted((int(x),))

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[DataId]:
        return iter(self.members)

    def __contains__(self, x) -> bool:
        return x in self.members

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Cluster):
            return NotImplemented
        return self._hash == other._hash and self.members == other.members

    def __lt__(self, other: "Cluster") -> bool:
        return self.members < other.members

    def __repr__(self) -> str:
        return "{" + ",".join(map(str, self.members)) + "}"

    @property
    def first(self) -> DataId:
        return self.members[0]

    def add(self, x: DataId) -> "Cluster":
        """Return this cluster with ``x`` inserted."""
        ids = self.members
        if x > ids[-1]:
            return Cluster._sorted(ids + (x,))
        if x in ids:
            raise ValueError(f"{x} already in cluster")
        return Cluster._sorted(tuple(sorted(ids + (x,))))

    def remove(self, x: DataId) -> Optional["Cluster"]:
        """Return this cluster without ``x``, or None if it becomes empty."""
        ids = tuple(i for i in self.members if i != x)
        if len(ids) == len(self.members):
            raise ValueError(f"{x} not in cluster")
        return Cluster._sorted(ids) if ids else None

    def union(self, other: "Cluster") -> "Cluster":
        return Cluster._sorted(tuple(sorted(self.members + other.members)))


class Partition:
    """A set of pairwise-disjoint clusters.

    Equality and hashing are by cluster content, so two partitions built in
    different ways compare equal when they group the same ids together.
    """

    __slots__ = ("clusters", "_hash", "_n")

    def __init__(self, clusters: Iterable[Cluster | Iterable[DataId]]):
        cl = frozenset(c if isinstance(c, Cluster) else Cluster(c) for c in clusters)
        seen: set = set()
        n = 0
        for c in cl:
            n += len(c)
            seen.update(c.members)
        if len(seen) != n:
            raise ValueError("clusters are not disjoint")
        self.clusters = cl
        self._hash = hash(cl)
        self._n = n

    @classmethod
    def _trusted(cls, clusters: frozenset, n: int) -> "Partition":
        obj = cls.__new__(cls)
        obj.clusters = clusters
        obj._hash = hash(clusters)
        obj._n = n
        return obj

    @classmethod
    def from_labels(cls, labels: Mapping[DataId, object] | Sequence) -> "Partition":
        """Build from ``{id: label}`` or a label sequence indexed by id."""
        items = labels.items() if isinstance(labels, Mapping) else enumerate(labels)
        groups: dict = {}
        for i, lab in items:
            groups.setdefault(lab, []).append(i)
        return cls(groups.values())

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self) -> Iterator[Cluster]:
        return iter(self.clusters)

    def __contains__(self, c) -> bool:
        return c in self.clusters

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other) -> bool:
        if self is other:
            return True
        if not isinstance(other, Partition):
            return NotImplemented
        return self._hash == other._hash and self.clusters == other.clusters

    def __repr__(self) -> str:
        return "{" + ",".join(repr(c) for c in self.sorted_clusters()) + "}"

    @property
    def n_items(self) -> int:
        return self._n

    def ids(self) -> frozenset:
        return frozenset(i for c in self.clusters for i in c.members)

    def sorted_clusters(self) -> list[Cluster]:
        return sorted(self.clusters, key=lambda c: c.members[0])

    def key(self) -> tuple:
        """Canonical form: clusters ordered by smallest member."""
        return tuple(c.members for c in self.sorted_clusters())

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def labels(self) -> dict[DataId, int]:
        """Dense labels ``0..K-1`` in canonical cluster order."""
        return {i: k for k, c in enumerate(self.sorted_clusters()) for i in c.members}

    def cluster_of(self, x: DataId) -> Cluster:
        for c in self.clusters:
            if x in c.members:
                return c
        raise KeyError(x)

    def assign(self, x: DataId, target: Optional[Cluster]) -> "Partition":
        """Add ``x`` to ``target`` (a member cluster) or as a new singleton."""
        if target is None:
            return Partition._trusted(self.clusters | {Cluster.singleton(x)}, self._n + 1)
        return Partition._trusted(
            (self.clusters - {target}) | {target.add(x)}, self._n + 1
        )

    def union(self, other: "Partition") -> "Partition":
        """Disjoint union of two partitions over disjoint id sets."""
        return Partition._trusted(self.clusters | other.clusters, self._n + other._n)

    def restrict(self, ids: frozenset | set) -> "Partition":
        """Intersect every cluster with ``ids``, dropping the ones left empty."""
        kept = []
        for c in self.clusters:
            inside = tuple(i for i in c.members if i in ids)
            if inside:
                kept.append(c if len(inside) == len(c) else Cluster._sorted(inside))
        return Partition._trusted(frozenset(kept), sum(len(c) for c in kept))


EMPTY_PARTITION = Partition._trusted(frozenset(), 0)


@dataclass(frozen=True)
class CrpPrior:
    alpha: float

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ValueError(f"alpha must be positive, got {self.alpha}")


def crp_assignment_log_prior(
    cluster_sizes: Sequence[int], alpha: float, t: int, target: Optional[int]
) -> float:
    """Log CRP probability of observation ``t`` joining ``target``.

    ``target`` is an index into ``cluster_sizes`` or ``None`` for a new cluster.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if t != 1 + sum(cluster_sizes):
        raise ValueError(f"t={t} inconsistent with cluster sizes summing to {sum(cluster_sizes)}")
    denom = math.log(alpha + t - 1)
    if target is None:
        return math.log(alpha) - denom
    if not (0 <= target < len(cluster_sizes)):
        raise IndexError(f"invalid cluster index {target}")
    size = cluster_sizes[target]
    if size <= 0:
        raise ValueError("cluster sizes must be positive")
    return math.log(size) - denom


def log_prior_denominator(alpha: float, t: int) -> float:
    """log of prod_{i=0}^{t-1} (alpha + 1 + i)."""
    return float(gammaln(alpha + 1 + t) - gammaln(alpha + 1))


def ewens_log_prior(sizes: Sequence[int], alpha: float) -> float:
    """Prior part of the unnormalised Ewens score for clusters of the given sizes."""
    t = sum(sizes)
    k = len(sizes)
    return (
        (k - 1) * math.log(alpha)
        - log_prior_denominator(alpha, t)
        + float(np.sum(gammaln(np.asarray(sizes, dtype=float))))
    )


def ewens_log_posterior(partition: Partition, alpha: float, model: Scorer) -> float:
    """Unnormalised log posterior of a partition under the DP mixture.

    alpha^(K-1) / prod_{i<t}(alpha+1+i) * prod_k Gamma(|c_k|) * prod_k p(c_k)
    """
    if len(partition) == 0:
        raise ValueError("empty partition")
    loglik = math.fsum(model.log_marginal(c) for c in partition)
    return ewens_log_prior(partition.sizes(), alpha) + loglik


def _restricted_growth(n: int) -> Iterator[list[int]]:
    labels = [0] * n
    maxes = [0] * n

    def rec(i: int):
        if i == n:
            yield labels
            return
        top = maxes[i - 1] + 1 if i else 0
        for lab in range(top + 1):
            labels[i] = lab
            maxes[i] = max(maxes[i - 1] if i else 0, lab)
            yield from rec(i + 1)

    if n == 0:
        return
    labels[0] = 0
    maxes[0] = 0
    yield from rec(1)


def enumerate_partitions(n: int, ids: Optional[Sequence[DataId]] = None) -> list[Partition]:
    """All set partitions of ``n`` ids (``0..n-1`` unless ``ids`` is given)."""
    if not (1 <= n <= MAX_ENUMERATION):
        raise ValueError(f"n must be in 1..{MAX_ENUMERATION}, got {n}")
    if ids is None:
        ids = range(n)
    ids = list(ids)
    if len(ids) != n:
        raise ValueError("ids length must equal n")
    out = []
    for labels in _restricted_growth(n):
        groups: list[list[int]] = [[] for _ in range(max(labels) + 1)]
        for i, lab in zip(ids, labels):
            groups[lab].append(i)
        out.append(Partition(groups))
    return out


def exact_posterior(
    ids: Sequence[DataId], alpha: float, model: Scorer
) -> list[tuple[Partition, float]]:
    """Brute-force normalised posterior over every partition of ``ids``."""
    n = len(ids)
    if n > MAX_ENUMERATION:
        raise ValueError(f"exact posterior limited to {MAX_ENUMERATION} ids")
    parts = enumerate_partitions(n, ids)
    scores = np.array([ewens_log_posterior(p, alpha, model) for p in parts])
    probs = np.exp(scores - logsumexp(scores))
    return list(zip(parts, probs.tolist()))


BELL_NUMBERS = (1, 1, 2, 5, 15, 52, 203, 877, 4140, 21147, 115975)
