"""Surrogate-likelihood proposals.

A cheap surrogate scores every putative assignment; only the ``m_prime``
best non-singleton assignments plus every new-cluster assignment are scored
by the main model.  The new-cluster assignments are always kept because the
concentration parameter is tuned for the main model and may be miscalibrated
under the surrogate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import CrpPrior, DataId, Partition
from .smc import (
    NEW_CLUSTER,
    ParticleSet,
    PutativeBatch,
    PutativeParticle,
    _normalise,
    assignment_log_probs,
    greedy_select,
    lookup_probs,
)


@dataclass
class SurrogatePair:
    surrogate: object  # LikelihoodCache
    main: object  # LikelihoodCache
    m_prime: int

    def __post_init__(self):
        if self.m_prime < 1:
            raise ValueError("m_prime must be at least 1")


def shortlist_indices(log_weight: np.ndarray, is_new: np.ndarray, m_prime: int,
                      key_of: Optional[Callable[[int], object]] = None) -> np.ndarray:
    """Greedy top ``m_prime`` non-singleton entries, then every singleton entry."""
    joins = np.flatnonzero(~is_new)
    singles = np.flatnonzero(is_new)
    if len(joins) == 0:
        return singles
    sub_key = None if key_of is None else (lambda k: key_of(int(joins[k])))
    kept = joins[greedy_select(log_weight[joins], m_prime, sub_key)]
    return np.concatenate([kept, singles])


def surrogate_propose(putatives: Sequence[PutativeParticle], m_prime: int) -> list[PutativeParticle]:
    """Shortlist putatives whose weights were computed with the surrogate."""
    lw = np.array([p.log_weight for p in putatives], dtype=float)
    is_new = np.array([p.target_cluster is NEW_CLUSTER for p in putatives], dtype=bool)
    sel = shortlist_indices(lw, is_new, m_prime,
                            lambda k: (putatives[k].source_particle_index,
                                       putatives[k].target_cluster.members))
    return [putatives[k] for k in sel]


def rescore_and_resample(shortlist: Sequence[PutativeParticle], main, prior: CrpPrior,
                         source: ParticleSet, x: DataId, m: int) -> list[tuple[PutativeParticle, float]]:
    """Recompute putative weights under ``main`` and keep the ``m`` heaviest.

    Returns (putative carrying its main-model weight, normalised log weight).
    """
    if not shortlist:
        raise ValueError("empty shortlist")
    t = len(source.ids) + 1
    uniq = list(dict.fromkeys(p.target_cluster for p in shortlist if p.target_cluster is not NEW_CLUSTER))
    probs, new_prob = assignment_log_probs(main, x, uniq, prior.alpha, t)
    pos = {c: k for k, c in enumerate(uniq)}
    rescored = [
        PutativeParticle(
            p.source_particle_index, p.target_cluster,
            float(source.log_weights[p.source_particle_index]
                  + (new_prob if p.target_cluster is NEW_CLUSTER else probs[pos[p.target_cluster]])),
        )
        for p in shortlist
    ]
    lw = np.array([p.log_weight for p in rescored])

    def key(k: int):
        p = rescored[k]
        return source.partitions[p.source_particle_index].assign(x, p.target_cluster).key()

    sel = greedy_select(lw, m, key)
    norm = _normalise(lw[sel])
    return [(rescored[k], float(w)) for k, w in zip(sel, norm)]


def propose_and_rescore(batch: PutativeBatch, psets: Sequence[ParticleSet], x: DataId,
                        proposal: SurrogatePair, alpha: float, t: int,
                        key_of: Optional[Callable[[int], object]] = None) -> PutativeBatch:
    """Shortlist a surrogate-weighted batch and reweight the shortlist with the main model.

    The main model sees at most ``m_prime`` joined clusters plus the singleton
    ``{x}``; the clusters being joined were themselves scored when created.
    """
    sel = shortlist_indices(batch.log_weight, batch.is_new, proposal.m_prime, key_of)
    short = batch.take(sel)
    joins = short.target[short.target >= 0]
    uniq_idx = np.unique(joins)
    probs_u, new_prob = assignment_log_probs(
        proposal.main, x, [short.clusters[k] for k in uniq_idx], alpha, t
    )
    probs = np.zeros(len(short.clusters))
    probs[uniq_idx] = probs_u
    short.log_weight = short.source_lw + lookup_probs(short.target, probs, new_prob)
    return short


def partition_key(pset: ParticleSet, batch: PutativeBatch, x: DataId) -> Callable[[int], tuple]:
    def key(k: int) -> tuple:
        tgt = batch.target[k]
        part: Partition = pset.partitions[batch.source[k]]
        return part.assign(x, batch.clusters[tgt] if tgt >= 0 else None).key()

    return key
