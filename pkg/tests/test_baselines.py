import math

import numpy as np
import pytest

from smcluster.baselines import (
    AgglomConfig,
    McmcConfig,
    _pair_from_index,
    agglomerative_run,
    compact_labels,
    gibbs_conditional,
    gibbs_sweep,
    mcmc_run,
    merge_delta,
    mwg_sweep,
    partition_frequencies,
)
from smcluster.core import Cluster, CrpPrior, Partition, ewens_log_posterior, exact_posterior
from smcluster.models import LikelihoodCache, NigGaussianModel, ScaledModel, UnitModel

from conftest import nig_scorer, unit_scorer


def within_3_sigma(counts, probs, n):
    for part, p in probs.items():
        sd = math.sqrt(n * p * (1 - p))
        if abs(counts.get(part, 0) - n * p) > 3 * sd:
            return False
    return set(counts) <= set(probs)


class TestGibbs:
    def test_single_point(self, rng):
        z = gibbs_sweep(np.array([0]), [0], unit_scorer(1), CrpPrior(1.0), rng)
        np.testing.assert_array_equal(z, [0])

    def test_new_cluster_prior_mass(self):
        # x=2 removed from its singleton; remaining clusters {0},{1}
        logp = gibbs_conditional(unit_scorer(3), 2, [Cluster([0]), Cluster([1])], 1.5)
        p = np.exp(logp - np.logaddexp.reduce(logp))
        assert p[-1] == pytest.approx(1.5 / (1.5 + 3 - 1), abs=1e-15)

    def test_labels_stay_dense(self, rng):
        sc = nig_scorer(rng.normal(size=12) * 5)
        z = np.arange(12)
        for _ in range(20):
            z = gibbs_sweep(z, list(range(12)), sc, CrpPrior(1.0), rng)
            assert set(z.tolist()) == set(range(z.max() + 1))

    def test_stationary_distribution(self):
        sc = unit_scorer(3)
        exact = dict(exact_posterior([0, 1, 2], 1.0, sc))
        counts = partition_frequencies([0, 1, 2], sc, CrpPrior(1.0), 20_000, "gibbs", seed=3)
        assert within_3_sigma(counts, exact, 20_000)


class TestMwg:
    def test_same_chain_as_gibbs_when_surrogate_is_main(self):
        sc = nig_scorer(np.random.default_rng(0).normal(size=10) * 3)
        za = zb = np.arange(10)
        ra, rb = np.random.default_rng(5), np.random.default_rng(5)
        for _ in range(30):
            za = gibbs_sweep(za, list(range(10)), sc, CrpPrior(1.0), ra)
            zb = mwg_sweep(zb, list(range(10)), sc, sc, CrpPrior(1.0), rb)
            np.testing.assert_array_equal(za, zb)

    def test_stationary_with_mismatched_surrogate(self):
        main = unit_scorer(3)
        sur = LikelihoodCache.for_payloads(ScaledModel(UnitModel(), 0.0, math.log(4.0)), [None] * 3)
        exact = dict(exact_posterior([0, 1, 2], 1.0, main))
        counts = partition_frequencies([0, 1, 2], main, CrpPrior(1.0), 20_000, "mwg", sur, seed=4)
        assert within_3_sigma(counts, exact, 20_000)

    def test_main_evaluations_per_item(self, rng):
        pts = rng.normal(size=15) * 4
        main = nig_scorer(pts)
        sur = nig_scorer(pts, lam=0.01)
        z = np.arange(15)
        for _ in range(5):
            z = mwg_sweep(z, list(range(15)), main, sur, CrpPrior(1.0), rng)
        before = main.misses
        mwg_sweep(z, list(range(15)), main, sur, CrpPrior(1.0), rng)
        assert main.misses - before <= 2 * 15


class TestMcmcRun:
    def test_budget_zero_returns_singletons(self):
        sc = nig_scorer(np.arange(5.0))
        part, info = mcmc_run(range(5), sc, CrpPrior(1.0), McmcConfig(max_runtime_seconds=0.0))
        assert part == Partition([[k] for k in range(5)])
        assert info["sweeps"] == 0 and info["timed_out"]

    def test_map_not_worse_than_initial(self, rng):
        sc = nig_scorer(rng.normal(size=20) * 3)
        part, info = mcmc_run(range(20), sc, CrpPrior(1.0), McmcConfig(patience_sweeps=20, seed=1))
        init = ewens_log_posterior(Partition([[k] for k in range(20)]), 1.0, sc)
        assert info["log_posterior"] >= init
        assert info["log_posterior"] == pytest.approx(ewens_log_posterior(part, 1.0, sc))

    def test_patience_one_stops_after_stale_sweep(self):
        # a single point has one partition: the first sweep cannot improve on it
        part, info = mcmc_run([0], unit_scorer(1), CrpPrior(1.0), McmcConfig(patience_sweeps=1))
        assert info["sweeps"] == 1

    def test_mwg_needs_surrogate(self):
        with pytest.raises(ValueError):
            mcmc_run([0], unit_scorer(1), CrpPrior(1.0), variant="mwg")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            McmcConfig(patience_sweeps=0)
        with pytest.raises(ValueError):
            AgglomConfig(batch_size=0)


class TestAgglomerative:
    def test_coincident_points_merge(self):
        sc = LikelihoodCache.for_payloads(NigGaussianModel(0.0, 0.0002, 2.0, 0.5), [0.0, 0.0])
        delta = merge_delta(sc, Cluster([0]), Cluster([1]), 1.0)
        expected = (ewens_log_posterior(Partition([[0, 1]]), 1.0, sc)
                    - ewens_log_posterior(Partition([[0], [1]]), 1.0, sc))
        assert delta == pytest.approx(expected, abs=1e-12)
        assert delta > 0
        assert agglomerative_run([0, 1], sc, CrpPrior(1.0)) == Partition([[0, 1]])

    def test_unit_likelihood_zero_delta(self):
        sc = unit_scorer(2)
        assert merge_delta(sc, Cluster([0]), Cluster([1]), 1.0) == 0.0
        assert agglomerative_run([0, 1], sc, CrpPrior(1.0)) == Partition([[0], [1]])

    def test_delta_matches_full_difference(self, rng):
        for _ in range(30):
            n = int(rng.integers(3, 9))
            sc = nig_scorer(rng.normal(size=n) * 2, lam=0.3, a=2.0, b=0.5)
            labels = rng.integers(0, 3, size=n)
            part = Partition.from_labels(list(labels))
            if len(part) < 2:
                continue
            a, b = part.sorted_clusters()[:2]
            merged = Partition([c for c in part if c not in (a, b)] + [a.union(b)])
            alpha = float(rng.uniform(0.2, 3.0))
            want = ewens_log_posterior(merged, alpha, sc) - ewens_log_posterior(part, alpha, sc)
            assert merge_delta(sc, a, b, alpha) == pytest.approx(want, abs=1e-10)

    def test_full_mode_merge_count(self, rng):
        n = 25
        sc = nig_scorer(rng.normal(size=(n, 2)) * 4, lam=0.05, a=2.0, b=0.5)
        part = agglomerative_run(range(n), sc, CrpPrior(1.0))
        assert 1 <= len(part) <= n
        assert part.ids() == frozenset(range(n))

    def test_batched_stops_on_patience(self, rng):
        n = 30
        sc = nig_scorer(rng.normal(size=(n, 2)) * 10, lam=0.05, a=2.0, b=0.5)
        sink = []

        class Sink:
            def write(self, s):
                sink.append(s)

        part = agglomerative_run(range(n), sc, CrpPrior(1.0),
                                 AgglomConfig(batch_size=5, patience_iterations=10, seed=2), Sink())
        assert part.ids() == frozenset(range(n))
        assert len(sink) >= 10

    def test_full_and_batched_improve_posterior(self, rng):
        n = 20
        sc = nig_scorer(rng.normal(size=(n, 2)) * 6, lam=0.05, a=2.0, b=0.5)
        start = ewens_log_posterior(Partition([[k] for k in range(n)]), 1.0, sc)
        for cfg in (AgglomConfig(), AgglomConfig(batch_size=10, seed=1)):
            assert ewens_log_posterior(agglomerative_run(range(n), sc, CrpPrior(1.0), cfg), 1.0, sc) >= start


def test_pair_index_roundtrip():
    for n in (2, 3, 7, 50):
        k = np.arange(n * (n - 1) // 2)
        i, j = _pair_from_index(k, n)
        want = [(a, b) for a in range(n) for b in range(a + 1, n)]
        assert list(zip(i.tolist(), j.tolist())) == want


def test_compact_labels():
    np.testing.assert_array_equal(compact_labels(np.array([5, 2, 5, 9])), [0, 1, 0, 2])
