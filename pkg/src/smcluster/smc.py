"""Sequential Monte Carlo over partitions with greedy resampling.

Each particle is a distinct partition.  A new observation extends every
particle in every possible way (join each existing cluster or start a new
one); the putative weights are the old weight times the CRP prior times the
predictive likelihood, and the ``m`` heaviest survive.  With ``m = 1`` this is
greedy online clustering.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import EMPTY_PARTITION, Cluster, CrpPrior, DataId, Partition, ewens_log_posterior
from .metrics import RunTrace, TraceRecord, bcubed

NEW_CLUSTER = None


class WeightedParticle(NamedTuple):
    partition: Partition
    log_weight: float


class PutativeParticle(NamedTuple):
    source_particle_index: int
    target_cluster: Optional[Cluster]
    log_weight: float


def _normalise(lw: np.ndarray) -> np.ndarray:
    total = logsumexp(lw)
    if not np.isfinite(total):
        raise FloatingPointError("all particle weights are zero or undefined")
    return lw - total


class ParticleSet:
    """Weighted set of distinct partitions, all over the same ids."""

    __slots__ = ("partitions", "log_weights", "ids")

    def __init__(self, partitions: Sequence[Partition], log_weights: Iterable[float],
                 ids: Optional[frozenset] = None, normalise: bool = True):
        lw = np.asarray(list(log_weights) if not isinstance(log_weights, np.ndarray) else log_weights,
                        dtype=float)
        partitions = list(partitions)
        if len(partitions) != len(lw) or not partitions:
            raise ValueError("need one weight per partition and at least one partition")
        index: dict[Partition, int] = {}
        for k, p in enumerate(partitions):
            if p in index:
                partitions, lw = _coalesce(partitions, lw)
                break
            index[p] = k
        self.partitions = partitions
        self.log_weights = _normalise(lw) if normalise else lw
        self.ids = partitions[0].ids() if ids is None else frozenset(ids)

    @classmethod
    def initial(cls) -> "ParticleSet":
        return cls([EMPTY_PARTITION], np.zeros(1), frozenset())

    def __len__(self) -> int:
        return len(self.partitions)

    def __iter__(self) -> Iterator[WeightedParticle]:
        for p, w in zip(self.partitions, self.log_weights):
            yield WeightedParticle(p, float(w))

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def top_index(self) -> int:
        best = np.flatnonzero(self.log_weights == self.log_weights.max())
        if len(best) == 1:
            return int(best[0])
        return int(min(best, key=lambda k: self.partitions[k].key()))

    def top(self) -> Partition:
        return self.partitions[self.top_index()]

    def as_dict(self) -> dict[Partition, float]:
        return dict(zip(self.partitions, self.log_weights.tolist()))

    def validate(self) -> None:
        if len(set(self.partitions)) != len(self.partitions):
            raise AssertionError("duplicate partitions in particle set")
        for p in self.partitions:
            if p.n_items != len(self.ids) or p.ids() != self.ids:
                raise AssertionError(f"partition {p} does not cover {sorted(self.ids)}")
        total = float(np.exp(logsumexp(self.log_weights)))
        if abs(total - 1.0) > 1e-9:
            raise AssertionError(f"weights sum to {total}")


def _coalesce(partitions: Sequence[Partition], lw: np.ndarray) -> tuple[list[Partition], np.ndarray]:
    groups: dict[Partition, list[float]] = {}
    for p, w in zip(partitions, lw):
        groups.setdefault(p, []).append(float(w))
    parts = list(groups)
    return parts, np.array([logsumexp(groups[p]) for p in parts])


def greedy_select(lw: np.ndarray, m: int, key_of: Optional[Callable[[int], Any]] = None) -> np.ndarray:
    """Indices of the ``m`` heaviest items ordered by (weight desc, key asc).

    ``key_of(i)`` is only called for items tied on weight, so it may be costly.
    Without a key, ties fall back to input order.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    lw = np.asarray(lw, dtype=float)
    n = len(lw)
    if n == 0:
        raise ValueError("nothing to resample")
    key_of = key_of or (lambda i: i)
    if m >= n:
        sel = np.arange(n)
    else:
        thr = lw[np.argpartition(-lw, m - 1)[m - 1]]
        above = np.flatnonzero(lw > thr)
        tied = np.flatnonzero(lw == thr)
        need = m - len(above)
        if len(tied) > need:
            tied = np.array(sorted(tied.tolist(), key=key_of)[:need], dtype=np.int64)
        sel = np.concatenate([above, tied])
    order = sel[np.argsort(-lw[sel], kind="stable")]
    vals = lw[order]
    if len(vals) > 1 and np.any(vals[1:] == vals[:-1]):
        out: list[int] = []
        start = 0
        for k in range(1, len(order) + 1):
            if k == len(order) or vals[k] != vals[start]:
                run = order[start:k].tolist()
                out.extend(sorted(run, key=key_of) if len(run) > 1 else run)
                start = k
        order = np.array(out, dtype=np.int64)
    return order


def _default_key(payload):
    return payload.key() if isinstance(payload, Partition) else payload


def greedy_resample(items: Sequence[tuple[Any, float]], m: int,
                    key: Callable[[Any], Any] = _default_key) -> list[tuple[Any, float]]:
    """Keep the ``m`` highest-weight items and renormalise their log weights."""
    if m < 1:
        raise ValueError("m must be at least 1")
    if not items:
        raise ValueError("nothing to resample")
    lw = np.array([w for _, w in items], dtype=float)
    sel = greedy_select(lw, m, lambda i: key(items[i][0]))
    norm = _normalise(lw[sel])
    return [(items[i][0], float(w)) for i, w in zip(sel, norm)]


def assignment_log_probs(scorer, x: DataId, clusters: Sequence[Cluster], alpha: float,
                         t: int) -> tuple[np.ndarray, float]:
    """Unnormalised log p(x joins c) for each cluster, and for a new cluster.

    Prior term |c| / (alpha + t - 1) (alpha for a new cluster) times the
    predictive p(c + x) / p(c).  ``t`` counts every observation including x.
    """
    denom = math.log(alpha + t - 1)
    new = math.log(alpha) - denom + scorer.log_marginal(Cluster.singleton(x))
    if not clusters:
        return np.empty(0), new
    joined = scorer.log_marginals([c.add(x) for c in clusters])
    base = scorer.log_marginals(clusters)
    sizes = np.fromiter((len(c) for c in clusters), dtype=float, count=len(clusters))
    return np.log(sizes) - denom + joined - base, new


@dataclass
class PutativeBatch:
    """Columnar putative set: ``target`` indexes ``clusters`` or is -1 for a new cluster."""

    source: np.ndarray
    target: np.ndarray
    clusters: list[Cluster]
    log_weight: np.ndarray
    source_lw: np.ndarray
    group: Optional[np.ndarray] = None  # owning subproblem, used by split SMC

    def __len__(self) -> int:
        return len(self.source)

    def take(self, idx: np.ndarray) -> "PutativeBatch":
        return PutativeBatch(self.source[idx], self.target[idx], self.clusters,
                             self.log_weight[idx], self.source_lw[idx],
                             None if self.group is None else self.group[idx])

    @classmethod
    def concat(cls, batches: Sequence["PutativeBatch"]) -> "PutativeBatch":
        groups = [b.group if b.group is not None else np.full(len(b), k, dtype=np.int64)
                  for k, b in enumerate(batches)]
        return cls(np.concatenate([b.source for b in batches]),
                   np.concatenate([b.target for b in batches]),
                   batches[0].clusters,
                   np.concatenate([b.log_weight for b in batches]),
                   np.concatenate([b.source_lw for b in batches]),
                   np.concatenate(groups))

    @property
    def is_new(self) -> np.ndarray:
        return self.target < 0


def index_clusters(partition_lists: Iterable[Sequence[Partition]]) -> tuple[list[Cluster], dict]:
    clusters: list[Cluster] = []
    where: dict[Cluster, int] = {}
    for parts in partition_lists:
        for p in parts:
            for c in p.clusters:
                if c not in where:
                    where[c] = len(clusters)
                    clusters.append(c)
    return clusters, where


def expand_batch(pset: ParticleSet, x: DataId, scorer, alpha: float, t: int,
                 clusters: Optional[list[Cluster]] = None, where: Optional[dict] = None,
                 probs: Optional[np.ndarray] = None, new_prob: Optional[float] = None,
                 with_new: bool = True) -> PutativeBatch:
    """All one-step extensions of every particle, weighted by ``scorer``."""
    if clusters is None:
        clusters, where = index_clusters([pset.partitions])
    if probs is None:
        probs, new_prob = assignment_log_probs(scorer, x, clusters, alpha, t)
    src: list[int] = []
    tgt: list[int] = []
    for i, p in enumerate(pset.partitions):
        for c in p.clusters:
            src.append(i)
            tgt.append(where[c])
        if with_new:
            src.append(i)
            tgt.append(-1)
    source = np.asarray(src, dtype=np.int64)
    target = np.asarray(tgt, dtype=np.int64)
    base = pset.log_weights[source]
    return PutativeBatch(source, target, clusters, base + lookup_probs(target, probs, new_prob), base)


def lookup_probs(target: np.ndarray, probs: np.ndarray, new_prob: float) -> np.ndarray:
    if len(probs) == 0:
        return np.full(len(target), new_prob)
    return np.where(target >= 0, probs[np.maximum(target, 0)], new_prob)


def materialise(pset: ParticleSet, batch: PutativeBatch, k: int, x: DataId) -> Partition:
    tgt = batch.target[k]
    return pset.partitions[batch.source[k]].assign(x, batch.clusters[tgt] if tgt >= 0 else None)


def expand_putative(pset: ParticleSet, x: DataId, scorer, prior: CrpPrior) -> list[PutativeParticle]:
    """Unnormalised putative particles: one per (particle, existing cluster) and per (particle, new)."""
    if x in pset.ids:
        raise ValueError(f"observation {x} is already covered")
    t = len(pset.ids) + 1
    batch = expand_batch(pset, x, scorer, prior.alpha, t)
    return [
        PutativeParticle(int(s), batch.clusters[c] if c >= 0 else NEW_CLUSTER, float(w))
        for s, c, w in zip(batch.source, batch.target, batch.log_weight)
    ]


def _resample_batch(pset: ParticleSet, batch: PutativeBatch, x: DataId, m: int) -> ParticleSet:
    cache: dict[int, Partition] = {}

    def part(k: int) -> Partition:
        if k not in cache:
            cache[k] = materialise(pset, batch, k, x)
        return cache[k]

    sel = greedy_select(batch.log_weight, m, lambda k: part(int(k)).key())
    parts = [part(int(k)) for k in sel]
    return ParticleSet(parts, batch.log_weight[sel], pset.ids | {x})


def smc_step(pset: ParticleSet, x: DataId, scorer, prior: CrpPrior, m: int,
             proposal=None) -> ParticleSet:
    """Propagate, weight and greedily resample one observation.

    Distinct source partitions always yield distinct putatives (dropping ``x``
    recovers the source), so no coalescing is needed before selection.
    """
    if x in pset.ids:
        raise ValueError(f"observation {x} is already covered")
    t = len(pset.ids) + 1
    if proposal is None:
        batch = expand_batch(pset, x, scorer, prior.alpha, t)
    else:
        from .proposal import partition_key, propose_and_rescore

        batch = expand_batch(pset, x, proposal.surrogate, prior.alpha, t)
        batch = propose_and_rescore(batch, [pset], x, proposal, prior.alpha, t,
                                    partition_key(pset, batch, x))
    return _resample_batch(pset, batch, x, m)


def top_log_posterior(partition: Partition, alpha: float, scorer) -> float:
    return ewens_log_posterior(partition, alpha, scorer)


def run_smc(stream: Sequence[DataId], scorer, prior: CrpPrior, m: int,
            trace_sink=None, proposal=None, gold: Optional[Partition] = None,
            record_every: int = 1) -> tuple[ParticleSet, RunTrace]:
    """Run SMC over ``stream`` in order, emitting one trace record per step."""
    if len(stream) == 0:
        raise ValueError("empty stream")
    trace = RunTrace(sink=trace_sink)
    pset = ParticleSet.initial()
    gold_of = None
    if gold is not None:
        gold_of = {i: k for k, c in enumerate(gold) for i in c.members}
    t0 = time.perf_counter()
    for step, x in enumerate(stream, start=1):
        pset = smc_step(pset, x, scorer, prior, m, proposal)
        if step % record_every == 0 or step == len(stream):
            top = pset.top()
            f1 = None
            if gold_of is not None:
                seen = pset.ids
                g = Partition.from_labels({i: gold_of[i] for i in seen})
                f1 = bcubed(top, g).f1
            trace.append(TraceRecord(
                step=step,
                top_log_posterior=top_log_posterior(top, prior.alpha, scorer),
                n_subproblems=1,
                log_effective_particles=math.log(len(pset)),
                n_particles=len(pset),
                main_evaluations=scorer.misses,
                wall_time=time.perf_counter() - t0,
                f1=f1,
            ))
    return pset, trace
