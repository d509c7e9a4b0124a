"""Split SMC: a factorised particle approximation over independent subproblems.

The observed ids are partitioned into subproblems, each carrying its own
particle set over exactly its ids.  The represented posterior is the product
of the subproblem particle sets.  After each update the subproblem holding the
new observation is split into the connected components of its co-occurrence
graph; when a new observation's plausible assignments straddle subproblems,
those subproblems are merged by resampling their explicit joint.
"""

from __future__ import annotations

import math
import time
from collections import Counter
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import Cluster, CrpPrior, DataId, Partition, ewens_log_posterior
from .metrics import RunTrace, TraceRecord, bcubed
from .smc import (
    ParticleSet,
    PutativeBatch,
    assignment_log_probs,
    expand_batch,
    greedy_select,
    index_clusters,
)

# explicit joints larger than this multiple of m^2 go through multinomial merging
JOINT_CAP_FACTOR = 10


@dataclass
class Subproblem:
    ids: frozenset
    particles: ParticleSet

    @property
    def first(self) -> DataId:
        return min(self.ids)

    def __len__(self) -> int:
        return len(self.particles)


@dataclass
class FactorisedState:
    subproblems: list[Subproblem] = field(default_factory=list)

    @property
    def n_observed(self) -> int:
        return sum(len(s.ids) for s in self.subproblems)

    def ids(self) -> frozenset:
        return frozenset().union(*(s.ids for s in self.subproblems))

    def index_of(self, x: DataId) -> int:
        for k, s in enumerate(self.subproblems):
            if x in s.ids:
                return k
        raise KeyError(x)

    def top(self) -> Partition:
        """Highest-weighted joint clustering: the product of per-subproblem maxima."""
        clusters: set = set()
        n = 0
        for s in self.subproblems:
            p = s.particles.top()
            clusters.update(p.clusters)
            n += p.n_items
        return Partition._trusted(frozenset(clusters), n)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.subproblems]

    def joint(self, limit: int = 200_000) -> list[tuple[Partition, float]]:
        """Explicit product distribution (small states only)."""
        if math.prod(self.sizes()) > limit:
            raise ValueError("implicit particle set too large to enumerate")
        out = []
        for combo in product(*(list(s.particles) for s in self.subproblems)):
            part = combo[0].partition
            for wp in combo[1:]:
                part = part.union(wp.partition)
            out.append((part, float(sum(wp.log_weight for wp in combo))))
        return out

    def validate(self, m: Optional[int] = None) -> None:
        seen: set = set()
        for s in self.subproblems:
            if seen & s.ids:
                raise AssertionError("subproblems overlap")
            seen |= s.ids
            if s.particles.ids != s.ids:
                raise AssertionError("particle set ids differ from subproblem ids")
            s.particles.validate()
            if m is not None and len(s.particles) > m:
                raise AssertionError(f"subproblem holds {len(s.particles)} > m particles")


def effective_particle_count(state: FactorisedState) -> float:
    """log of the product of subproblem particle-set sizes."""
    return float(sum(math.log(len(s)) for s in state.subproblems))


class CooccurrenceGraph:
    """Graph over ids with an edge between consecutive members of every stored cluster.

    Path edges within each cluster give the same connected components as
    the full clique.
    """

    def __init__(self, ids: Iterable[DataId], clusters: Iterable[Cluster]):
        self.ids = frozenset(ids)
        self.edges: set[tuple[DataId, DataId]] = set()
        for c in clusters:
            m = c.members
            self.edges.update(zip(m[:-1], m[1:]))

    def components(self) -> list[frozenset]:
        return _components(self.ids, ((a, b) for a, b in self.edges))

    def adjacency(self) -> dict[DataId, set]:
        adj: dict[DataId, set] = {i: set() for i in self.ids}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj


def _components(ids: Iterable[DataId], edges: Iterable[tuple[DataId, DataId]]) -> list[frozenset]:
    parent: dict[DataId, DataId] = {}

    def find(a):
        root = a
        while parent.get(root, root) != root:
            root = parent[root]
        while a != root:
            nxt = parent.get(a, a)
            parent[a] = root
            a = nxt
        return root

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            if rb < ra:
                ra, rb = rb, ra
            parent[rb] = ra
    groups: dict[DataId, list] = {}
    for i in ids:
        groups.setdefault(find(i), []).append(i)
    return sorted((frozenset(g) for g in groups.values()), key=min)


def _cluster_edges(clusters: Iterable[Cluster]):
    for c in clusters:
        m = c.members
        for k in range(len(m) - 1):
            yield m[k], m[k + 1]


def build_cooccurrence_graph(sub: Subproblem) -> CooccurrenceGraph:
    clusters, _ = index_clusters([sub.particles.partitions])
    return CooccurrenceGraph(sub.ids, (c for c in clusters if len(c) > 1))


def split(sub: Subproblem) -> list[Subproblem]:
    """Decompose a subproblem into the connected components of its co-occurrence graph.

    Each component's particles are the distinct restrictions of the original
    particles, weighted by the total weight of the originals they came from.
    """
    clusters, _ = index_clusters([sub.particles.partitions])
    comps = _components(sub.ids, _cluster_edges(c for c in clusters if len(c) > 1))
    if len(comps) == 1:
        return [sub]
    comp_of = {i: k for k, comp in enumerate(comps) for i in comp}
    sizes = [len(comp) for comp in comps]
    buckets: list[dict[Partition, list[float]]] = [{} for _ in comps]
    for part, lw in zip(sub.particles.partitions, sub.particles.log_weights.tolist()):
        pieces: list[list[Cluster]] = [[] for _ in comps]
        for c in part.clusters:
            pieces[comp_of[c.members[0]]].append(c)
        for k, piece in enumerate(pieces):
            restricted = Partition._trusted(frozenset(piece), sizes[k])
            buckets[k].setdefault(restricted, []).append(lw)
    out = []
    for comp, bucket in zip(comps, buckets):
        parts = list(bucket)
        lws = np.array([logsumexp(bucket[p]) if len(bucket[p]) > 1 else bucket[p][0] for p in parts])
        order = greedy_select(lws, len(lws), lambda k: parts[k].key())
        out.append(Subproblem(comp, ParticleSet([parts[k] for k in order], lws[order], comp)))
    return out


class Survivor(NamedTuple):
    subproblem: int
    partition: Partition  # over the subproblem's ids plus x
    log_weight: float


@dataclass
class StepInfo:
    event: str  # "new", "grow", "merge", "multinomial-merge"
    merged: int = 0
    dropped: int = 0
    split_into: int = 1
    subproblem: int = 0


def _product_weights(subs: Sequence[Subproblem]) -> tuple[np.ndarray, tuple[int, ...]]:
    lw = np.zeros(1)
    shape: list[int] = []
    for s in subs:
        lw = np.add.outer(lw, s.particles.log_weights).ravel()
        shape.append(len(s))
    return lw, tuple(shape)


def explicit_joint(subs: Sequence[Subproblem], survivors: Sequence[Survivor],
                   m: Optional[int] = None) -> tuple[list[Partition], np.ndarray]:
    """Cross every survivor with every combination of the other subproblems' particles.

    ``subs`` are the affected subproblems (indexed by ``Survivor.subproblem``).
    With ``m`` given, only the ``m`` heaviest joint partitions are built.
    """
    cand_surv: list[np.ndarray] = []
    cand_flat: list[np.ndarray] = []
    cand_lw: list[np.ndarray] = []
    meta = {}
    for s in sorted({u.subproblem for u in survivors}):
        us = [k for k, u in enumerate(survivors) if u.subproblem == s]
        others = [o for o in range(len(subs)) if o != s]
        plw, shape = _product_weights([subs[o] for o in others])
        keep = np.arange(len(plw))
        if m is not None and len(plw) > m:
            thr = np.partition(plw, len(plw) - m)[len(plw) - m]
            keep = np.flatnonzero(plw >= thr)
        meta[s] = (others, shape)
        ulw = np.array([survivors[k].log_weight for k in us])
        grid = ulw[:, None] + plw[keep][None, :]
        cand_surv.append(np.repeat(np.asarray(us), len(keep)))
        cand_flat.append(np.tile(keep, len(us)))
        cand_lw.append(grid.ravel())
    surv_idx = np.concatenate(cand_surv)
    flat_idx = np.concatenate(cand_flat)
    lw = np.concatenate(cand_lw)

    built: dict[int, Partition] = {}

    def build(k: int) -> Partition:
        if k not in built:
            u = survivors[surv_idx[k]]
            others, shape = meta[u.subproblem]
            part = u.partition
            if others:
                for o, j in zip(others, np.unravel_index(flat_idx[k], shape)):
                    part = part.union(subs[o].particles.partitions[j])
            built[k] = part
        return built[k]

    sel = greedy_select(lw, m if m is not None else len(lw), lambda k: build(int(k)).key())
    return [build(int(k)) for k in sel], lw[sel]


def multinomial_merge(subs: Sequence[Subproblem], survivors: Sequence[Survivor], m: int,
                      rng: np.random.Generator, exact_if_small: bool = True) -> tuple[list[Partition], np.ndarray]:
    """Sample the merged particle set in three stages.

    (i) draw ``m`` survivors with replacement by weight, (ii) pair each with one
    independently drawn particle from every other affected subproblem,
    (iii) merge duplicates, weighting by counts.  When the whole joint fits in
    ``m`` particles it is returned exactly instead.
    """
    if rng is None:
        raise ValueError("multinomial merge needs a random generator")
    if exact_if_small:
        joint_size = sum(
            math.prod(len(subs[o]) for o in range(len(subs)) if o != u.subproblem) for u in survivors
        )
        if joint_size <= m:
            return explicit_joint(subs, survivors, None)
    ulw = np.array([u.log_weight for u in survivors])
    p = np.exp(ulw - logsumexp(ulw))
    draws = rng.choice(len(survivors), size=m, p=p / p.sum())
    picks = []
    for s in subs:
        w = s.particles.weights
        picks.append(rng.choice(len(s), size=m, p=w / w.sum()))
    counts: Counter = Counter()
    for d in range(m):
        u = int(draws[d])
        own = survivors[u].subproblem
        key = (u,) + tuple(int(picks[o][d]) if o != own else -1 for o in range(len(subs)))
        counts[key] += 1
    parts, lws = [], []
    for key, n in counts.items():
        u = survivors[key[0]]
        part = u.partition
        for o, j in enumerate(key[1:]):
            if j >= 0:
                part = part.union(subs[o].particles.partitions[j])
        parts.append(part)
        lws.append(math.log(n / m))
    lws = np.array(lws)
    order = greedy_select(lws, len(lws), lambda k: parts[k].key())
    return [parts[k] for k in order], lws[order]


def merge(state: FactorisedState, affected: set[int], survivors: Sequence[Survivor], m: int,
          x: DataId, pool_weight: Optional[dict[int, float]] = None,
          rng: Optional[np.random.Generator] = None) -> tuple[FactorisedState, int, StepInfo]:
    """Merge the subproblems holding the survivors' assignments of ``x``.

    First drops every subproblem whose pooled assignments carry combined
    weight <= 1/m (never the one holding the top survivor).  Returns the new
    state, the index of the subproblem now holding ``x``, and a step summary.
    """
    if pool_weight is None:
        tot = logsumexp([u.log_weight for u in survivors])
        pool_weight = {}
        for u in survivors:
            pool_weight[u.subproblem] = pool_weight.get(u.subproblem, 0.0) + math.exp(u.log_weight - tot)
    top_s = survivors[0].subproblem
    kept = sorted(s for s in affected if s == top_s or pool_weight.get(s, 0.0) > 1.0 / m)
    dropped = len(affected) - len(kept)
    survivors = [u for u in survivors if u.subproblem in kept]
    if len(kept) == 1:
        s = kept[0]
        new_sub = _subproblem_from(state.subproblems[s].ids | {x}, survivors)
        subs = list(state.subproblems)
        subs[s] = new_sub
        return FactorisedState(subs), s, StepInfo("grow", dropped=dropped)

    local = {s: k for k, s in enumerate(kept)}
    subs_k = [state.subproblems[s] for s in kept]
    surv_local = [Survivor(local[u.subproblem], u.partition, u.log_weight) for u in survivors]
    multi = sum(1 for s in subs_k if len(s) > 1)
    biggest_other = max(
        math.prod(len(subs_k[o]) for o in range(len(subs_k)) if o != k) for k in range(len(subs_k))
    )
    if multi <= 2 and biggest_other <= JOINT_CAP_FACTOR * m * m:
        parts, lws = explicit_joint(subs_k, surv_local, m)
        event = "merge"
    else:
        parts, lws = multinomial_merge(subs_k, surv_local, m, rng)
        event = "multinomial-merge"
    ids = frozenset().union(*(s.ids for s in subs_k)) | {x}
    merged = Subproblem(ids, ParticleSet(parts, lws, ids))
    # the merged subproblem takes the slot of the lowest kept index
    pos = kept[0]
    subs = [s for k, s in enumerate(state.subproblems) if k not in local or k == pos]
    subs[pos] = merged
    return FactorisedState(subs), pos, StepInfo(event, merged=len(kept), dropped=dropped)


def _subproblem_from(ids: frozenset, survivors: Sequence[Survivor]) -> Subproblem:
    return Subproblem(ids, ParticleSet([u.partition for u in survivors],
                                       np.array([u.log_weight for u in survivors]), ids))


def _singleton_keeper(state: FactorisedState, probs: np.ndarray, bounds: list[tuple[int, int]]) -> int:
    best_s, best_v, best_first = 0, -math.inf, None
    for s, (lo, hi) in enumerate(bounds):
        if hi <= lo:
            continue
        v = float(probs[lo:hi].max())
        first = state.subproblems[s].first
        if v > best_v or (v == best_v and first < best_first):
            best_s, best_v, best_first = s, v, first
    return best_s


def pool_putatives(state: FactorisedState, x: DataId, scorer, prior: CrpPrior,
                   proposal=None) -> tuple[PutativeBatch, int]:
    """Expand every subproblem and pool the putatives, tagging each with its subproblem.

    New-cluster putatives are kept only for the subproblem holding the single most
    probable assignment of ``x``.  Returns the pool and that subproblem's index.
    """
    t = state.n_observed + 1
    subs = state.subproblems
    clusters, where = index_clusters(s.particles.partitions for s in subs)
    bounds, start = [], 0
    for s in subs:
        # clusters of different subproblems are disjoint, so each occupies a contiguous run
        n_s = len({c for p in s.particles.partitions for c in p.clusters})
        bounds.append((start, start + n_s))
        start += n_s
    weigh = proposal.surrogate if proposal is not None else scorer
    probs, new_prob = assignment_log_probs(weigh, x, clusters, prior.alpha, t)
    keeper = _singleton_keeper(state, probs, bounds)
    batches = []
    for k, s in enumerate(subs):
        b = expand_batch(s.particles, x, weigh, prior.alpha, t, clusters, where, probs, new_prob,
                         with_new=(k == keeper))
        b.group = np.full(len(b), k, dtype=np.int64)
        batches.append(b)
    return PutativeBatch.concat(batches), keeper


def factorised_update(state: FactorisedState, x: DataId, scorer, prior: CrpPrior, m: int,
                      proposal=None, rng: Optional[np.random.Generator] = None
                      ) -> tuple[FactorisedState, StepInfo]:
    """Add observation ``x`` to a factorised state, merging and splitting as needed."""
    if state.subproblems and any(x in s.ids for s in state.subproblems):
        raise ValueError(f"observation {x} is already covered")
    t = state.n_observed + 1
    if not state.subproblems:
        ids = frozenset([x])
        sub = Subproblem(ids, ParticleSet([Partition([[x]])], np.zeros(1), ids))
        scorer.log_marginal(Cluster.singleton(x))
        return FactorisedState([sub]), StepInfo("new")

    subs = state.subproblems
    pool, _ = pool_putatives(state, x, scorer, prior, proposal)

    def local_partition(k: int) -> Partition:
        tgt = pool.target[k]
        part = subs[pool.group[k]].particles.partitions[pool.source[k]]
        return part.assign(x, pool.clusters[tgt] if tgt >= 0 else None)

    def key_of(k: int) -> tuple:
        return local_partition(int(k)).key()

    if proposal is not None:
        from .proposal import propose_and_rescore

        pool = propose_and_rescore(pool, [s.particles for s in subs], x, proposal, prior.alpha, t,
                                   key_of)

    norm = pool.log_weight - logsumexp(pool.log_weight)
    pool_weight: dict[int, float] = {}
    for g in np.unique(pool.group):
        pool_weight[int(g)] = float(np.exp(logsumexp(norm[pool.group == g])))
    sel = greedy_select(pool.log_weight, m, key_of)
    sel_lw = pool.log_weight[sel] - logsumexp(pool.log_weight[sel])
    survivors = [Survivor(int(pool.group[k]), local_partition(int(k)), float(w))
                 for k, w in zip(sel, sel_lw)]
    affected = {u.subproblem for u in survivors}
    if len(affected) == 1:
        s = survivors[0].subproblem
        new_subs = list(subs)
        new_subs[s] = _subproblem_from(subs[s].ids | {x}, survivors)
        new_state, pos, info = FactorisedState(new_subs), s, StepInfo("grow")
    else:
        new_state, pos, info = merge(state, affected, survivors, m, x, pool_weight, rng)
    pieces = split(new_state.subproblems[pos])
    info.split_into = len(pieces)
    if len(pieces) > 1:
        new_state.subproblems[pos:pos + 1] = pieces
    info.subproblem = pos
    return new_state, info


def run_split_smc(stream: Sequence[DataId], scorer, prior: CrpPrior, m: int,
                  trace_sink=None, proposal=None, gold: Optional[Partition] = None,
                  seed: int = 0, record_every: int = 1) -> tuple[FactorisedState, RunTrace]:
    """Run split SMC over ``stream``, emitting one trace record per step."""
    if len(stream) == 0:
        raise ValueError("empty stream")
    rng = np.random.default_rng(seed)
    state = FactorisedState()
    trace = RunTrace(sink=trace_sink)
    gold_of = None
    if gold is not None:
        gold_of = {i: k for k, c in enumerate(gold) for i in c.members}
    main = proposal.main if proposal is not None else scorer
    t0 = time.perf_counter()
    for step, x in enumerate(stream, start=1):
        before = main.misses
        state, info = factorised_update(state, x, scorer, prior, m, proposal, rng)
        if step % record_every == 0 or step == len(stream):
            top = state.top()
            f1 = None
            if gold_of is not None:
                g = Partition.from_labels({i: gold_of[i] for i in state.ids()})
                f1 = bcubed(top, g).f1
            trace.append(TraceRecord(
                step=step,
                top_log_posterior=ewens_log_posterior(top, prior.alpha, scorer),
                n_subproblems=len(state.subproblems),
                log_effective_particles=effective_particle_count(state),
                n_particles=sum(state.sizes()),
                main_evaluations=main.misses,
                wall_time=time.perf_counter() - t0,
                f1=f1,
                event=f"{info.event}:{main.misses - before}",
            ))
    return state, trace
