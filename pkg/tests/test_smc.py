import io
import json
import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smcluster.core import BELL_NUMBERS, Cluster, CrpPrior, Partition, ewens_log_posterior, exact_posterior
from smcluster.smc import (
    NEW_CLUSTER,
    ParticleSet,
    expand_putative,
    greedy_resample,
    greedy_select,
    run_smc,
    smc_step,
)

from conftest import nig_scorer, unit_scorer


def reverse_kl_of_support(p, support):
    """KL(q || p) for q = p restricted to ``support`` and renormalised."""
    return -math.log(p[list(support)].sum())


class TestGreedyResample:
    def test_example(self):
        items = [("a", math.log(0.5)), ("b", math.log(0.3)), ("c", math.log(0.1)), ("d", math.log(0.1))]
        out = greedy_resample(items, 2)
        assert [k for k, _ in out] == ["a", "b"]
        np.testing.assert_allclose(np.exp([w for _, w in out]), [0.625, 0.375], atol=1e-15)

    def test_identity_when_m_large(self):
        items = [("a", 0.0), ("b", -1.0), ("c", -3.0)]
        out = greedy_resample(items, 10)
        w = np.array([w for _, w in items])
        np.testing.assert_allclose([w for _, w in out], w - np.log(np.exp(w).sum()), atol=1e-15)

    def test_idempotent(self, rng):
        items = [(k, float(v)) for k, v in enumerate(rng.normal(size=12))]
        once = greedy_resample(items, 5)
        twice = greedy_resample(once, 5)
        assert [k for k, _ in twice] == [k for k, _ in once]
        np.testing.assert_allclose([w for _, w in twice], [w for _, w in once], atol=1e-15)

    def test_ties_broken_by_key(self):
        items = [("c", 0.0), ("a", 0.0), ("b", 0.0), ("z", 1.0)]
        assert [k for k, _ in greedy_resample(items, 3)] == ["z", "a", "b"]

    def test_m_zero_rejected(self):
        with pytest.raises(ValueError):
            greedy_resample([("a", 0.0)], 0)

    @pytest.mark.parametrize("m", [2, 3, 4])
    def test_minimises_reverse_kl(self, m):
        rng = np.random.default_rng(m)
        for _ in range(100):
            p = rng.dirichlet(np.ones(8))
            chosen = greedy_select(np.log(p), m)
            best = min(reverse_kl_of_support(p, s) for s in combinations(range(8), m))
            assert reverse_kl_of_support(p, chosen) <= best + 1e-12


class TestExpand:
    def test_single_particle(self):
        pset = ParticleSet([Partition([[0]])], [0.0])
        puts = expand_putative(pset, 1, unit_scorer(2), CrpPrior(1.0))
        assert len(puts) == 2
        targets = {p.target_cluster for p in puts}
        assert targets == {Cluster([0]), NEW_CLUSTER}
        np.testing.assert_allclose([p.log_weight for p in puts], [math.log(0.5)] * 2, atol=1e-15)

    def test_counts(self):
        pset = ParticleSet([Partition([[0, 1]]), Partition([[0], [1]])], [math.log(0.4), math.log(0.6)])
        assert len(expand_putative(pset, 2, unit_scorer(3), CrpPrior(1.0))) == 5

    def test_covered_rejected(self):
        with pytest.raises(ValueError):
            expand_putative(ParticleSet([Partition([[0]])], [0.0]), 0, unit_scorer(1), CrpPrior(1.0))


def assert_matches_exact(pset, ids, alpha, scorer, atol):
    exact = dict(exact_posterior(ids, alpha, scorer))
    got = pset.as_dict()
    assert set(got) == set(exact)
    for part, lw in got.items():
        assert math.exp(lw) == pytest.approx(exact[part], abs=atol)


class TestSmc:
    def test_three_points_unit(self):
        sc = unit_scorer(3)
        pset, _ = run_smc([0, 1, 2], sc, CrpPrior(1.0), 5)
        assert_matches_exact(pset, [0, 1, 2], 1.0, sc, 1e-12)

    def test_six_points_nig(self, rng):
        sc = nig_scorer(rng.normal(size=6) * 2, lam=0.5, a=2.0, b=0.5)
        pset, _ = run_smc(list(range(6)), sc, CrpPrior(1.0), BELL_NUMBERS[6])
        assert_matches_exact(pset, list(range(6)), 1.0, sc, 1e-9)

    def test_m1_is_greedy(self, rng):
        pts = rng.normal(size=15) * 4
        sc = nig_scorer(pts, lam=0.1, a=2.0, b=0.5)
        alpha = 0.8
        clusters: list[Cluster] = []
        for t, x in enumerate(range(15), start=1):
            scores = [math.log(len(c)) + sc.log_predictive(x, c) for c in clusters]
            scores.append(math.log(alpha) + sc.log_predictive(x, None))
            k = int(np.argmax(scores))
            if k == len(clusters):
                clusters.append(Cluster([x]))
            else:
                clusters[k] = clusters[k].add(x)
        pset, _ = run_smc(list(range(15)), sc, CrpPrior(alpha), 1)
        assert pset.top() == Partition(clusters)

    def test_far_points_are_separate(self):
        sc = nig_scorer([0.0, 1000.0], lam=1.0, a=2.0, b=0.5)
        pset, _ = run_smc([0, 1], sc, CrpPrior(1.0), 2)
        assert pset.top() == Partition([[0], [1]])
        assert ewens_log_posterior(Partition([[0], [1]]), 1.0, sc) > ewens_log_posterior(Partition([[0, 1]]), 1.0, sc)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 10_000))
    def test_step_invariants(self, n, m, seed):
        pts = np.random.default_rng(seed).normal(size=n) * 3
        sc = nig_scorer(pts)
        pset = ParticleSet.initial()
        for x in range(n):
            prev_ids = pset.ids
            pset = smc_step(pset, x, sc, CrpPrior(1.0), m)
            pset.validate()
            assert pset.ids == prev_ids | {x}
            assert len(pset) <= m
            assert len({p.key() for p in pset.partitions}) == len(pset)
            assert abs(np.exp(pset.log_weights).sum() - 1.0) <= 1e-9

    def test_trace(self, rng):
        sc = nig_scorer(rng.normal(size=8))
        sink = io.StringIO()
        pset, trace = run_smc(list(range(8)), sc, CrpPrior(1.0), 4, trace_sink=sink)
        assert trace.column("step") == list(range(1, 9))
        lines = [json.loads(line) for line in sink.getvalue().splitlines()]
        assert len(lines) == 8
        assert lines[-1]["top_log_posterior"] == pytest.approx(ewens_log_posterior(pset.top(), 1.0, sc))
        assert lines[-1]["n_particles"] == len(pset)

    def test_empty_stream(self):
        with pytest.raises(ValueError):
            run_smc([], unit_scorer(1), CrpPrior(1.0), 3)

    def test_order_matters_in_general(self):
        pts = np.array([0.0, 1.5, 3.0, 4.5, 6.0, 7.5])
        sc = nig_scorer(pts, lam=0.1, a=1.0, b=0.3)
        a, _ = run_smc([0, 1, 2, 3, 4, 5], sc, CrpPrior(1.0), 1)
        b, _ = run_smc([0, 5, 2, 3, 1, 4], sc, CrpPrior(1.0), 1)
        assert a.top() == Partition([[0], [1, 2, 3, 4, 5]])
        assert b.top() == Partition([[0], [1, 2], [3, 4, 5]])


class TestParticleSet:
    def test_duplicates_coalesced(self):
        p = Partition([[0, 1]])
        pset = ParticleSet([p, p, Partition([[0], [1]])], np.log([0.2, 0.3, 0.5]))
        assert len(pset) == 2
        assert math.exp(pset.as_dict()[p]) == pytest.approx(0.5)

    def test_cover_mismatch(self):
        with pytest.raises(AssertionError):
            ParticleSet([Partition([[0]]), Partition([[1]])], [0.0, 0.0]).validate()
