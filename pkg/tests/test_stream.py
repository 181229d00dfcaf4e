import numpy as np
import pytest

from streamdp.dpmm import DpmmModel, SuffStats, compute_suffstats, global_update, local_update
from streamdp.errors import StateError
from streamdp.stream import (BirthConfig, MergeConfig, StatScope, StreamConfig, StreamLedger,
                             absorb_posterior_as_prior, birth_move, finalize_stream, merge_move,
                             run_stream, stats_cycle, stream_elbo)
from streamdp.vae import make_codec


def blobs(rng, centers, per, scale=1.0):
    centers = np.asarray(centers, dtype=float)
    z = np.concatenate([c + scale * rng.standard_normal((per, centers.shape[1])) for c in centers])
    labels = np.repeat(np.arange(len(centers)), per)
    order = rng.permutation(len(z))
    return z[order], labels[order]


def identity_ledger(dim, seed=0, num_clusters=1, truncation_max=50):
    model = DpmmModel.initial(dim, num_clusters=num_clusters, truncation_max=truncation_max)
    return StreamLedger.create(model, make_codec(dim, dim, hidden=(), init="identity"), seed=seed)


def live_ledger(z, gamma, seed=0, truncation_max=50):
    ledger = identity_ledger(z.shape[1], seed, gamma.shape[1], truncation_max)
    ledger.scope.begin_stream(0)
    stats_cycle(ledger.scope, 0, 0, compute_suffstats(z, gamma))
    ledger.model = global_update(ledger.model, ledger.scope.stream)
    return ledger


def assert_stats_close(a, b, tol=1e-9):
    np.testing.assert_allclose(a.n, b.n, atol=tol)
    np.testing.assert_allclose(a.s1, b.s1, atol=tol)
    np.testing.assert_allclose(a.s2, b.s2, atol=tol)


class TestStatsCycle:
    def test_identical_twice(self, rng):
        scope = StatScope(2, 2).begin_stream(0)
        s = compute_suffstats(rng.standard_normal((5, 2)), rng.dirichlet(np.ones(2), size=5))
        stats_cycle(scope, 0, 0, s)
        before = scope.stream.copy()
        stats_cycle(scope, 0, 0, s)
        assert_stats_close(scope.stream, before, 1e-12)

    def test_first_visits_sum(self, rng):
        scope = StatScope(2, 2).begin_stream(0)
        parts = [compute_suffstats(rng.standard_normal((5, 2)), rng.dirichlet(np.ones(2), size=5))
                 for _ in range(3)]
        for i, s in enumerate(parts):
            stats_cycle(scope, 0, i, s)
        assert_stats_close(scope.stream, parts[0] + parts[1] + parts[2])

    def test_three_passes_match_recompute(self, rng):
        z = [rng.standard_normal((20, 3)) for _ in range(2)]
        scope = StatScope(3, 3).begin_stream(0)
        gammas = [None, None]
        for _ in range(3):
            for i in range(2):
                gammas[i] = rng.dirichlet(np.ones(3), size=20)
                stats_cycle(scope, 0, i, compute_suffstats(z[i], gammas[i]))
                stored = scope.minibatch[0] + scope.minibatch[1] if len(scope.minibatch) == 2 \
                    else scope.minibatch[0]
                assert_stats_close(scope.stream, stored)
        whole = compute_suffstats(np.concatenate(z), np.concatenate(gammas))
        assert_stats_close(scope.stream, whole)

    def test_unknown_stream(self):
        scope = StatScope(1, 1)
        with pytest.raises(StateError):
            stats_cycle(scope, 0, 0, SuffStats.zeros(1, 1))
        scope.begin_stream(0)
        with pytest.raises(StateError):
            stats_cycle(scope, 1, 0, SuffStats.zeros(1, 1))


class TestFinalize:
    def test_empty_stream(self, rng):
        scope = StatScope(2, 2)
        scope.overall = compute_suffstats(rng.standard_normal((4, 2)), rng.dirichlet(np.ones(2), size=4))
        before = scope.overall.copy()
        finalize_stream(scope.begin_stream(0))
        assert_stats_close(scope.overall, before, 0.0)
        assert scope.stream is None and scope.minibatch == {}

    def test_counts(self, rng):
        scope = StatScope(2, 1).begin_stream(0)
        g = np.zeros((7, 2))
        g[:, 0] = 1.0
        stats_cycle(scope, 0, 0, compute_suffstats(rng.standard_normal((7, 1)), g))
        finalize_stream(scope)
        assert scope.overall.n[0] == 7.0
        scope.begin_stream(1)
        stats_cycle(scope, 1, 0, compute_suffstats(rng.standard_normal((7, 1)), g))
        finalize_stream(scope)
        assert scope.overall.n[0] == 14.0

    def test_double_finalize(self):
        scope = StatScope(1, 1).begin_stream(0)
        finalize_stream(scope)
        with pytest.raises(StateError):
            finalize_stream(scope)


class TestAbsorb:
    def test_fixed_point(self, rng):
        z = rng.standard_normal((30, 2))
        g = rng.dirichlet(np.ones(3), size=30)
        ledger = live_ledger(z, g)
        finalize_stream(ledger.scope)
        absorb_posterior_as_prior(ledger)
        assert ledger.stream_index == 1
        after = global_update(ledger.model, SuffStats.zeros(3, 2))
        for a, b in zip(ledger.model.clusters, after.clusters):
            assert np.array_equal(a.m, b.m) and a.beta == b.beta and a.nu == b.nu
            assert np.array_equal(a.winv_chol.lower, b.winv_chol.lower)
            assert (a.eta1, a.eta2) == (b.eta1, b.eta2)

    def test_beta_increments(self):
        # four hard points on a fresh prior (beta0 = 0.2) would give 4.2; use 4.8 units of mass
        z = np.array([[0.0], [1.0], [2.0], [3.0], [4.0]])
        g = np.array([[1.0], [1.0], [1.0], [1.0], [0.8]])
        ledger = live_ledger(z, g)
        assert ledger.model.clusters[0].beta == pytest.approx(5.0)
        finalize_stream(ledger.scope)
        absorb_posterior_as_prior(ledger)
        ledger.scope.begin_stream(1)
        stats_cycle(ledger.scope, 1, 0, compute_suffstats(np.array([[9.0]]), np.ones((1, 1))))
        ledger.model = global_update(ledger.model, ledger.scope.stream)
        assert ledger.model.clusters[0].beta == pytest.approx(6.0)

    def test_telescoping(self, rng):
        z = rng.standard_normal((60, 2)) * 2
        g = rng.dirichlet(np.ones(3), size=60)
        ledger = identity_ledger(2, num_clusters=3)
        for j, half in enumerate((slice(0, 30), slice(30, 60))):
            ledger.scope.begin_stream(j)
            stats_cycle(ledger.scope, j, 0, compute_suffstats(z[half], g[half]))
            ledger.model = global_update(ledger.model, ledger.scope.stream)
            finalize_stream(ledger.scope)
            absorb_posterior_as_prior(ledger)
        batch = global_update(DpmmModel.initial(2, num_clusters=3), compute_suffstats(z, g))
        for a, b in zip(ledger.model.clusters, batch.clusters):
            np.testing.assert_allclose(a.m, b.m, atol=1e-9)
            np.testing.assert_allclose(a.w, b.w, atol=1e-9)
            assert a.beta == pytest.approx(b.beta, abs=1e-9) and a.nu == pytest.approx(b.nu, abs=1e-9)

    def test_live_stream_refused(self):
        ledger = identity_ledger(1)
        ledger.scope.begin_stream(0)
        with pytest.raises(StateError):
            absorb_posterior_as_prior(ledger)


class TestBirth:
    def test_small_subsample_skipped(self, rng):
        z = rng.standard_normal((30, 2))
        ledger = live_ledger(z, np.ones((30, 1)))
        ledger, _, born = birth_move(ledger, z, np.ones((30, 1)), BirthConfig())
        assert born == 0 and ledger.model.num_clusters == 1

    def test_two_gaussians(self, rng):
        z, _ = blobs(rng, [[-6.0, 0.0], [6.0, 0.0]], 200)
        gamma = np.ones((400, 1))
        ledger = live_ledger(z, gamma)
        ledger, gammas, born = birth_move(ledger, z, gamma, BirthConfig())
        assert born >= 1
        mass = ledger.scope.stream.n / 400
        assert np.sum(mass >= 0.05) >= 2
        np.testing.assert_allclose(np.concatenate(gammas).sum(axis=1), 1.0, atol=1e-10)

    def test_truncation_cap(self, rng):
        z, _ = blobs(rng, [[-6.0, 0.0], [6.0, 0.0]], 200)
        gamma = np.ones((400, 1))
        ledger = live_ledger(z, gamma, truncation_max=1)
        ledger, _, born = birth_move(ledger, z, gamma, BirthConfig())
        assert born == 0 and ledger.model.num_clusters == 1


class TestMerge:
    def test_redundant_pair_merged(self, rng):
        z = rng.standard_normal((100, 2))
        zz = np.concatenate([z, z])
        g = np.full((200, 2), 1e-12)
        g[:100, 0] = 1.0
        g[100:, 1] = 1.0
        g /= g.sum(axis=1, keepdims=True)
        ledger = live_ledger(zz, g)
        before = stream_elbo(ledger, [g])
        ledger, gammas, merged = merge_move(ledger, zz, g)
        assert merged == 1 and ledger.model.num_clusters == 1
        assert stream_elbo(ledger, gammas) > before

    def test_separated_pair_kept(self, rng):
        z, labels = blobs(rng, [[-5.0, 0.0], [5.0, 0.0]], 100)
        g = np.full((200, 2), 1e-12)
        g[np.arange(200), labels] = 1.0
        g /= g.sum(axis=1, keepdims=True)
        ledger = live_ledger(z, g)
        ledger, _, merged = merge_move(ledger, z, g, MergeConfig(top_m=3))
        assert merged == 0 and ledger.model.num_clusters == 2

    def test_single_cluster_noop(self, rng):
        z = rng.standard_normal((10, 2))
        ledger = live_ledger(z, np.ones((10, 1)))
        ledger, _, merged = merge_move(ledger, z, np.ones((10, 1)))
        assert merged == 0 and ledger.model.num_clusters == 1


class TestRunStream:
    def test_three_gaussians_from_one_cluster(self, rng):
        z, labels = blobs(rng, [[-8.0, 0.0], [8.0, 0.0], [0.0, 10.0]], 300)
        ledger = identity_ledger(2)
        run_stream(ledger, z, StreamConfig())
        assign = np.argmax(local_update(z, ledger.model), axis=1)
        mass = np.bincount(assign, minlength=ledger.model.num_clusters) / len(z)
        assert np.sum(mass >= 0.01) == 3
        assert ledger.stream_index == 1
        rec = ledger.history[-1]
        assert rec["stream"] == 0 and rec["rows"] == 900 and np.isfinite(rec["elbo"])

    def test_stationary_stream(self, rng):
        z, _ = blobs(rng, [[-8.0, 0.0], [8.0, 0.0], [0.0, 10.0]], 300)
        ledger = identity_ledger(2)
        run_stream(ledger, z, StreamConfig())
        k = ledger.model.num_clusters
        cfg = StreamConfig(train_codec=False, birth=BirthConfig(enabled=False))
        cfg.replay.enabled = False
        run_stream(ledger, z, cfg)
        assert ledger.model.num_clusters == k
        events = ledger.history[-1]["events"]
        for (p, b) in {(e["pass"], e["batch"]) for e in events}:
            trace = [e["elbo"] for e in events if (e["pass"], e["batch"]) == (p, b)]
            assert all(t1 - t0 >= -1e-8 * abs(t0) for t0, t1 in zip(trace, trace[1:]))

    def test_empty_stream(self):
        ledger = identity_ledger(2)
        before = ledger.model.copy()
        run_stream(ledger, np.zeros((0, 2)), StreamConfig())
        assert ledger.stream_index == 1
        assert ledger.scope.live_stream is None
        for a, b in zip(before.clusters, ledger.model.clusters):
            assert np.array_equal(a.m, b.m) and a.beta == b.beta

    def test_event_records(self, rng):
        z, _ = blobs(rng, [[-8.0, 0.0], [8.0, 0.0]], 100)
        ledger = identity_ledger(2)
        run_stream(ledger, z, StreamConfig(minibatches=2))
        for e in ledger.history[-1]["events"]:
            assert set(e) == {"pass", "batch", "sweep", "elbo", "clusters", "births", "merges"}
            assert np.isfinite(e["elbo"])

    def test_statistics_conserved_through_edits(self, rng):
        z, _ = blobs(rng, [[-8.0, 0.0], [8.0, 0.0], [0.0, 10.0]], 200)
        ledger = identity_ledger(2)
        run_stream(ledger, z, StreamConfig(passes=2))
        # every point's unit of mass ends up in the carried statistics
        assert ledger.model.prior_stats.n.sum() == pytest.approx(600.0, abs=1e-6)
