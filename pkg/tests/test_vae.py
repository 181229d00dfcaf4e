import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import finite_difference_errors, tiny_instance
from streamdp.dpmm import DpmmModel, compute_suffstats
from streamdp.errors import NumericError, ShapeError
from streamdp.vae import (AdamState, LatentCodec, MlpParams, adam_step, decode, elbo_vae,
                          elbo_vae_and_grad, encode, grad_elbo_vae, make_codec, reparameterize)


def oracle_objective(codec, x, gamma, model, eps):
    """Four summands written with cluster statistics of the encoder means."""
    mu, log_var = encode(codec, x)
    stats = compute_suffstats(mu, gamma)
    total = 0.0
    for k, c in enumerate(model.clusters):
        nk = stats.n[k]
        zbar = stats.s1[k] / nk
        sk = stats.s2[k] / nk - np.outer(zbar, zbar)
        w = c.w
        total -= 0.5 * nk * c.nu * np.trace(sk @ w)
        total -= 0.5 * nk * c.nu * (zbar - c.m) @ w @ (zbar - c.m)
    recon = 0.0
    for e in eps:
        z = mu + e * np.exp(0.5 * log_var)
        mx, lvx = decode(codec, z)
        recon += np.sum(-0.5 * lvx - 0.5 * (x - mx) ** 2 / np.exp(lvx))
    total += recon / len(eps)
    for row in log_var:
        total += 0.5 * np.linalg.slogdet(2 * math.pi * math.e * np.diag(np.exp(row)))[1]
    return total


class TestForward:
    def test_zero_parameters(self):
        codec = make_codec(3, 2, hidden=(4,))
        codec = codec.with_arrays([np.zeros_like(a) for a in codec.arrays()])
        mu, lv = encode(codec, np.ones((5, 3)))
        assert np.all(mu == 0) and np.all(lv == 0)

    def test_batch_rows(self, rng):
        codec = make_codec(6, 2)
        mu, lv = encode(codec, rng.standard_normal((11, 6)))
        assert mu.shape == (11, 2) and lv.shape == (11, 2)
        mx, _ = decode(codec, mu)
        assert mx.shape == (11, 6)

    def test_hand_linear_encoder(self):
        w = np.array([[1.0, 2.0, 0.5, 0.0], [3.0, -1.0, 0.0, 1.0]])
        b = np.array([0.5, 0.0, -1.0, 2.0])
        enc = MlpParams([w], [b])
        dec = MlpParams([np.zeros((2, 4))], [np.zeros(4)])
        codec = LatentCodec(enc, dec, 2, 2)
        mu, lv = encode(codec, np.array([[1.0, 2.0]]))
        # [1, 2] @ w + b = [7.5, 0, -0.5, 4]
        np.testing.assert_allclose(mu, [[7.5, 0.0]])
        np.testing.assert_allclose(lv, [[-0.5, 4.0]])

    def test_log_variance_clamp(self):
        enc = MlpParams([np.zeros((1, 2))], [np.array([0.0, 50.0])])
        codec = LatentCodec(enc, MlpParams([np.zeros((1, 2))], [np.zeros(2)]), 1, 1)
        assert encode(codec, np.zeros((1, 1)))[1][0, 0] == 10.0

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            encode(make_codec(3, 2), np.zeros((2, 4)))

    def test_numeric_error_names_layer(self):
        codec = make_codec(2, 1, hidden=(3,))
        codec = codec.with_arrays([a * 1e300 if i == 0 else a for i, a in enumerate(codec.arrays())])
        with pytest.raises(NumericError) as info:
            encode(codec, np.array([[1e300, -1e300]]))
        assert info.value.layer == 0


class TestReparameterize:
    def test_examples(self):
        mu = np.array([[1.0, -2.0]])
        np.testing.assert_array_equal(reparameterize(mu, np.zeros((1, 2)), np.zeros((1, 2))), mu)
        e = np.array([[0.3, -0.7]])
        np.testing.assert_allclose(reparameterize(mu, np.zeros((1, 2)), e), mu + e)
        assert reparameterize(np.array([1.0]), np.array([math.log(4.0)]), np.array([0.5]))[0] == pytest.approx(2.0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            reparameterize(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


class TestObjective:
    def test_reconstruction_zero_when_perfect(self):
        # identity codec: decoder mean returns z = x when eps = 0, unit output variance
        codec = make_codec(2, 2, hidden=(), init="identity")
        model = DpmmModel.initial(2)
        x = np.array([[0.3, -0.2], [1.0, 2.0]])
        gamma = np.ones((2, 1))
        value = elbo_vae(codec, x, gamma, model, np.zeros((2, 2)))
        c = model.clusters[0]
        cluster = -0.5 * c.nu * sum(r @ c.w @ r for r in x - c.m)
        entropy = 2 * 0.5 * math.log((2 * math.pi * math.e) ** 2)
        assert value - cluster - entropy == pytest.approx(0.0, abs=1e-12)

    def test_entropy_constant(self):
        codec = make_codec(2, 2, hidden=(), init="identity")
        value = elbo_vae(codec, np.zeros((1, 2)), np.ones((1, 1)), DpmmModel.initial(2),
                         np.zeros((1, 2)))
        assert value == pytest.approx(2.8379, abs=1e-4)
        assert value == pytest.approx(math.log(2 * math.pi * math.e), abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_oracle(self, seed):
        codec, x, gamma, model, eps = tiny_instance(seed, draws=1 + seed % 3)
        assert elbo_vae(codec, x, gamma, model, eps) == pytest.approx(
            oracle_objective(codec, x, gamma, model, eps), rel=1e-10, abs=1e-10)

    @given(st.integers(0, 10_000))
    def test_row_permutation_invariance(self, seed):
        codec, x, gamma, model, eps = tiny_instance(seed, n=6)
        perm = np.random.default_rng(seed).permutation(6)
        a = elbo_vae(codec, x, gamma, model, eps)
        b = elbo_vae(codec, x[perm], gamma[perm], model, eps[:, perm])
        assert b == pytest.approx(a, rel=1e-12, abs=1e-12)

    def test_shape_errors(self):
        codec, x, gamma, model, eps = tiny_instance(0)
        with pytest.raises(ShapeError):
            elbo_vae(codec, x, gamma[:, :1], model, eps)
        with pytest.raises(ShapeError):
            elbo_vae(codec, x, gamma, model, eps[:, :2])


class TestGradient:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        assert finite_difference_errors(*tiny_instance(seed)) <= 1e-4

    def test_softplus_and_draws(self):
        codec, x, gamma, model, eps = tiny_instance(3, hidden=(4, 3), draws=2)
        codec = LatentCodec(MlpParams(codec.encoder.weights, codec.encoder.biases, "softplus"),
                            MlpParams(codec.decoder.weights, codec.decoder.biases, "softplus"),
                            codec.latent_dim, codec.data_dim)
        assert finite_difference_errors(codec, x, gamma, model, eps) <= 1e-4

    def test_dead_unit(self):
        codec, x, gamma, model, eps = tiny_instance(1, hidden=(5,))
        enc = codec.encoder
        w_out = enc.weights[1].copy()
        w_out[2, :] = 0.0  # hidden unit 2 feeds nothing
        codec = LatentCodec(MlpParams([enc.weights[0], w_out], enc.biases), codec.decoder,
                            codec.latent_dim, codec.data_dim)
        g = grad_elbo_vae(codec, x, gamma, model, eps)
        assert np.all(g.encoder.weights[0][:, 2] == 0.0)
        assert g.encoder.biases[0][2] == 0.0

    def test_doubling(self):
        codec, x, gamma, model, eps = tiny_instance(2)
        v1, g1 = elbo_vae_and_grad(codec, x, gamma, model, eps)
        v2, g2 = elbo_vae_and_grad(codec, np.vstack([x, x]), np.vstack([gamma, gamma]), model,
                                   np.concatenate([eps, eps], axis=1))
        assert v2 == pytest.approx(2 * v1, rel=1e-12)
        for a, b in zip(g1.arrays(), g2.arrays()):
            np.testing.assert_allclose(b, 2 * a, rtol=1e-10, atol=1e-12)


class TestAdam:
    def test_zero_gradient(self):
        codec = make_codec(3, 2, hidden=(4,))
        state = AdamState.for_codec(codec)
        zero = codec.with_arrays([np.zeros_like(a) for a in codec.arrays()])
        new, st2 = adam_step(state, codec, zero)
        assert st2.step == 1
        for a, b in zip(codec.arrays(), new.arrays()):
            assert np.array_equal(a, b)

    def test_first_step_magnitude(self, rng):
        codec = make_codec(3, 2, hidden=(4,))
        state = AdamState.for_codec(codec, lr=1e-3)
        grads = codec.with_arrays([rng.standard_normal(a.shape) for a in codec.arrays()])
        new, _ = adam_step(state, codec, grads)
        for a, b, g in zip(codec.arrays(), new.arrays(), grads.arrays()):
            np.testing.assert_allclose(b - a, 1e-3 * np.sign(g), rtol=1e-4)

    def test_deterministic(self, rng):
        codec = make_codec(3, 2, hidden=(4,))
        state = AdamState.for_codec(codec)
        grads = codec.with_arrays([rng.standard_normal(a.shape) for a in codec.arrays()])
        a = adam_step(state, codec, grads)
        b = adam_step(state, codec, grads)
        for p, q in zip(a[0].arrays() + a[1].m, b[0].arrays() + b[1].m):
            assert np.array_equal(p, q)

    def test_shape_mismatch(self):
        codec = make_codec(3, 2, hidden=(4,))
        other = make_codec(3, 2, hidden=(5,))
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_codec(codec), codec, other)

    def test_decay(self):
        state = AdamState(lr=2e-3, decay=0.9)
        assert state.decayed().lr == pytest.approx(1.8e-3)

    @pytest.mark.parametrize("seed", range(3))
    def test_ascent_over_200_steps(self, seed):
        codec, x, gamma, model, eps = tiny_instance(seed)
        state = AdamState.for_codec(codec)
        start = elbo_vae(codec, x, gamma, model, eps)
        for _ in range(200):
            _, grads = elbo_vae_and_grad(codec, x, gamma, model, eps)
            codec, state = adam_step(state, codec, grads)
        assert elbo_vae(codec, x, gamma, model, eps) > start
