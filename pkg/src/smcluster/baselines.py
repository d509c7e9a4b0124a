"""Offline comparison methods: Gibbs, Metropolis-within-Gibbs and agglomerative clustering.

Assignment vectors are integer arrays aligned with an ``ids`` sequence; labels
are kept dense (0..K-1) by compacting as soon as a cluster empties.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .core import Cluster, CrpPrior, DataId, Partition, ewens_log_posterior
from .metrics import RunTrace, TraceRecord


@dataclass(frozen=True)
class McmcConfig:
    max_runtime_seconds: float = math.inf
    patience_sweeps: int = 500
    seed: int = 0
    max_sweeps: Optional[int] = None

    def __post_init__(self):
        if self.patience_sweeps < 1:
            raise ValueError("patience_sweeps must be at least 1")
        if self.max_runtime_seconds < 0:
            raise ValueError("max_runtime_seconds must be non-negative")


@dataclass(frozen=True)
class AgglomConfig:
    batch_size: Optional[int] = None  # None scores every pair
    patience_iterations: int = 100
    accept_threshold: float = 0.0
    seed: int = 0
    max_runtime_seconds: float = math.inf

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be at least 1 (or None for full)")
        if self.patience_iterations < 1:
            raise ValueError("patience_iterations must be at least 1")


class _Chain:
    """Mutable clustering state shared by the Gibbs and MwG sweeps."""

    def __init__(self, ids: Sequence[DataId], z: np.ndarray):
        self.ids = list(ids)
        z = compact_labels(np.asarray(z, dtype=np.int64)).tolist()
        self.z: list[int] = z
        groups: list[list[DataId]] = [[] for _ in range(max(z) + 1)] if z else []
        for i, k in zip(self.ids, z):
            groups[k].append(i)
        self.clusters = [Cluster(g) for g in groups]
        self.members: list[list[int]] = [[] for _ in groups]
        for pos, k in enumerate(z):
            self.members[k].append(pos)

    def detach(self, pos: int) -> Optional[int]:
        """Remove the item at ``pos``; returns its remaining cluster's label or None if it emptied."""
        k = self.z[pos]
        rest = self.clusters[k].remove(self.ids[pos])
        self.z[pos] = -1
        self.members[k].remove(pos)
        if rest is not None:
            self.clusters[k] = rest
            return k
        last = len(self.clusters) - 1
        if k != last:
            self.clusters[k] = self.clusters[last]
            self.members[k] = self.members[last]
            for q in self.members[k]:
                self.z[q] = k
        self.clusters.pop()
        self.members.pop()
        return None

    def attach(self, pos: int, k: Optional[int]) -> None:
        x = self.ids[pos]
        if k is None:
            self.clusters.append(Cluster.singleton(x))
            self.members.append([pos])
            self.z[pos] = len(self.clusters) - 1
        else:
            self.clusters[k] = self.clusters[k].add(x)
            self.members[k].append(pos)
            self.z[pos] = k

    def partition(self) -> Partition:
        return Partition._trusted(frozenset(self.clusters), len(self.ids))

    def labels(self) -> np.ndarray:
        return np.array(self.z, dtype=np.int64)


def compact_labels(z: np.ndarray) -> np.ndarray:
    """Relabel to 0..K-1 in order of first appearance."""
    _, first, inv = np.unique(z, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv.ravel()]


def gibbs_conditional(scorer, x: DataId, clusters: Sequence[Cluster], alpha: float) -> np.ndarray:
    """Unnormalised log conditional over ``clusters`` then a new cluster (last entry).

    The common denominator alpha + n - 1 is omitted.
    """
    return np.array(_conditional(scorer, x, clusters, alpha))


def _conditional(scorer, x: DataId, clusters: Sequence[Cluster], alpha: float) -> list[float]:
    lm = scorer.log_marginal
    out = [math.log(len(c)) + lm(c.add(x)) - lm(c) for c in clusters]
    out.append(math.log(alpha) + lm(Cluster.singleton(x)))
    return out


def _inverse_cdf(logp: Sequence[float], u: float) -> int:
    top = max(logp)
    acc = 0.0
    cum = []
    for v in logp:
        acc += math.exp(v - top)
        cum.append(acc)
    target = u * acc
    for k, c in enumerate(cum):
        if target < c:
            return k
    return len(cum) - 1


def _gibbs_pass(chain: _Chain, scorer, alpha: float, rng: np.random.Generator) -> None:
    order = rng.permutation(len(chain.ids))
    draws = rng.random((len(order), 2))
    for pos, u in zip(order.tolist(), draws[:, 0].tolist()):
        chain.detach(pos)
        logp = _conditional(scorer, chain.ids[pos], chain.clusters, alpha)
        k = _inverse_cdf(logp, u)
        chain.attach(pos, None if k == len(chain.clusters) else k)


def _mwg_pass(chain: _Chain, main, surrogate, alpha: float, rng: np.random.Generator) -> None:
    order = rng.permutation(len(chain.ids))
    draws = rng.random((len(order), 2))
    for pos, (u, v) in zip(order.tolist(), draws.tolist()):
        x = chain.ids[pos]
        kept = chain.detach(pos)
        cur = len(chain.clusters) if kept is None else kept
        q = _conditional(surrogate, x, chain.clusters, alpha)
        prop = _inverse_cdf(q, u)
        if prop != cur:
            log_ratio = (_conditional_at(main, x, chain.clusters, prop, alpha)
                         - _conditional_at(main, x, chain.clusters, cur, alpha)
                         - (q[prop] - q[cur]))
            if log_ratio < 0 and math.log(v) >= log_ratio:
                prop = cur
        chain.attach(pos, None if prop == len(chain.clusters) else prop)


def gibbs_sweep(z: np.ndarray, ids: Sequence[DataId], scorer, prior: CrpPrior,
                rng: np.random.Generator) -> np.ndarray:
    """One systematic-scan Gibbs sweep in a fresh random order."""
    chain = _Chain(ids, z)
    _gibbs_pass(chain, scorer, prior.alpha, rng)
    return chain.labels()


def _conditional_at(scorer, x: DataId, clusters: Sequence[Cluster], k: int, alpha: float) -> float:
    if k == len(clusters):
        return math.log(alpha) + scorer.log_marginal(Cluster.singleton(x))
    c = clusters[k]
    return math.log(len(c)) + scorer.log_marginal(c.add(x)) - scorer.log_marginal(c)


def mwg_sweep(z: np.ndarray, ids: Sequence[DataId], main, surrogate, prior: CrpPrior,
              rng: np.random.Generator) -> np.ndarray:
    """Gibbs sweep whose proposals come from the surrogate, corrected by Metropolis-Hastings.

    Draws the same uniforms as :func:`gibbs_sweep`, so with ``surrogate is main``
    every proposal is accepted and the chain coincides with the Gibbs chain.
    """
    chain = _Chain(ids, z)
    _mwg_pass(chain, main, surrogate, prior.alpha, rng)
    return chain.labels()


def partition_frequencies(ids: Sequence[DataId], scorer, prior: CrpPrior, n_sweeps: int,
                          variant: str = "gibbs", surrogate=None, seed: int = 0) -> dict[Partition, int]:
    """Visit counts of each partition over ``n_sweeps`` sweeps from all-singletons."""
    rng = np.random.default_rng(seed)
    chain = _Chain(ids, np.arange(len(ids)))
    counts: dict[Partition, int] = {}
    for _ in range(n_sweeps):
        if variant == "gibbs":
            _gibbs_pass(chain, scorer, prior.alpha, rng)
        else:
            _mwg_pass(chain, scorer, surrogate, prior.alpha, rng)
        p = chain.partition()
        counts[p] = counts.get(p, 0) + 1
    return counts


def mcmc_run(ids: Sequence[DataId], scorer, prior: CrpPrior, cfg: McmcConfig = McmcConfig(),
             variant: str = "gibbs", surrogate=None, trace_sink=None,
             init: Optional[np.ndarray] = None) -> tuple[Partition, dict]:
    """Sweep from the all-singleton state until the best sample stops improving.

    Returns the highest-posterior partition visited and a run summary.
    """
    if variant not in ("gibbs", "mwg"):
        raise ValueError(f"unknown MCMC variant {variant!r}")
    if variant == "mwg" and surrogate is None:
        raise ValueError("mwg needs a surrogate scorer")
    rng = np.random.default_rng(cfg.seed)
    ids = list(ids)
    z = np.arange(len(ids)) if init is None else compact_labels(np.asarray(init))
    chain = _Chain(ids, z)
    best = chain.partition()
    best_lp = ewens_log_posterior(best, prior.alpha, scorer)
    trace = RunTrace(sink=trace_sink)
    t0 = time.perf_counter()
    sweeps = stale = 0
    timed_out = False
    while stale < cfg.patience_sweeps:
        if cfg.max_sweeps is not None and sweeps >= cfg.max_sweeps:
            break
        if time.perf_counter() - t0 >= cfg.max_runtime_seconds:
            timed_out = True
            break
        if variant == "gibbs":
            _gibbs_pass(chain, scorer, prior.alpha, rng)
        else:
            _mwg_pass(chain, scorer, surrogate, prior.alpha, rng)
        sweeps += 1
        part = chain.partition()
        lp = ewens_log_posterior(part, prior.alpha, scorer)
        if lp > best_lp:
            best, best_lp, stale = part, lp, 0
        else:
            stale += 1
        trace.append(TraceRecord(step=sweeps, top_log_posterior=best_lp, n_particles=1,
                                 main_evaluations=scorer.misses,
                                 wall_time=time.perf_counter() - t0))
    summary = {
        "sweeps": sweeps,
        "log_posterior": best_lp,
        "n_clusters": len(best),
        "timed_out": timed_out,
        "trace": trace,
    }
    return best, summary


def merge_delta(scorer, a: Cluster, b: Cluster, alpha: float) -> float:
    """Change in the Ewens log posterior from merging clusters ``a`` and ``b``."""
    na, nb = len(a), len(b)
    return float(-math.log(alpha) + gammaln(na + nb) - gammaln(na) - gammaln(nb)
                 + scorer.log_marginal(a.union(b)) - scorer.log_marginal(a) - scorer.log_marginal(b))


def _merge_deltas(scorer, pairs: Sequence[tuple[Cluster, Cluster]], alpha: float) -> np.ndarray:
    if not pairs:
        return np.empty(0)
    na = np.array([len(a) for a, _ in pairs], dtype=float)
    nb = np.array([len(b) for _, b in pairs], dtype=float)
    joined = scorer.log_marginals([a.union(b) for a, b in pairs])
    la = scorer.log_marginals([a for a, _ in pairs])
    lb = scorer.log_marginals([b for _, b in pairs])
    return -math.log(alpha) + gammaln(na + nb) - gammaln(na) - gammaln(nb) + joined - la - lb


def _pair_from_index(k: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map flat indices over the strict upper triangle of an n x n grid to (i, j)."""
    # row i starts at offset i*n - i*(i+1)/2 - ... solved via the quadratic formula
    b = 2 * n - 1
    i = np.floor((b - np.sqrt(b * b - 8.0 * k)) / 2).astype(np.int64)
    start = i * (2 * n - i - 1) // 2
    # guard float rounding at row boundaries
    over = k < start
    i[over] -= 1
    start = i * (2 * n - i - 1) // 2
    under = k >= start + (n - 1 - i)
    i[under] += 1
    start = i * (2 * n - i - 1) // 2
    j = k - start + i + 1
    return i, j


def agglomerative_run(ids: Sequence[DataId], scorer, prior: CrpPrior,
                      cfg: AgglomConfig = AgglomConfig(), trace_sink=None) -> Partition:
    """Greedy pairwise merging from all-singletons, by largest posterior gain."""
    rng = np.random.default_rng(cfg.seed)
    clusters: list[Cluster] = [Cluster.singleton(i) for i in ids]
    trace = RunTrace(sink=trace_sink)
    t0 = time.perf_counter()
    lp = ewens_log_posterior(Partition._trusted(frozenset(clusters), len(clusters)), prior.alpha,
                             scorer) if clusters else 0.0
    full = cfg.batch_size is None
    gains: dict[tuple[Cluster, Cluster], float] = {}
    if full and len(clusters) > 1:
        pairs = [(a, b) for k, a in enumerate(clusters) for b in clusters[k + 1:]]
        gains = dict(zip(pairs, _merge_deltas(scorer, pairs, prior.alpha).tolist()))
    step = stale = 0
    while len(clusters) > 1 and stale < cfg.patience_iterations:
        if time.perf_counter() - t0 >= cfg.max_runtime_seconds:
            break
        step += 1
        if full:
            (a, b), best = max(gains.items(), key=lambda kv: kv[1])
        else:
            n = len(clusters)
            n_pairs = n * (n - 1) // 2
            flat = rng.choice(n_pairs, size=min(cfg.batch_size, n_pairs), replace=False)
            ii, jj = _pair_from_index(np.sort(flat), n)
            pairs = [(clusters[i], clusters[j]) for i, j in zip(ii.tolist(), jj.tolist())]
            deltas = _merge_deltas(scorer, pairs, prior.alpha)
            k = int(np.argmax(deltas))
            (a, b), best = pairs[k], float(deltas[k])
        if best > cfg.accept_threshold:
            merged = a.union(b)
            clusters = [c for c in clusters if c != a and c != b]
            if full:
                gains = {p: g for p, g in gains.items() if a not in p and b not in p}
                new_pairs = [(c, merged) for c in clusters]
                gains.update(zip(new_pairs, _merge_deltas(scorer, new_pairs, prior.alpha).tolist()))
            clusters.append(merged)
            lp += best
            stale = 0
        elif full:
            break
        else:
            stale += 1
        trace.append(TraceRecord(step=step, top_log_posterior=lp, n_particles=1,
                                 main_evaluations=scorer.misses,
                                 wall_time=time.perf_counter() - t0))
    return Partition._trusted(frozenset(clusters), len(ids))
