"""Fully connected Gaussian encoder/decoder with hand-written gradients.

The objective maximized here is the codec part of the ELBO: the cluster
fit of the encoder means, the Gaussian reconstruction log-likelihood and
the entropy of the diagonal encoder posterior.  Gradients are exact
reverse-mode derivatives with the noise draws ``eps`` held fixed.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
LOG_2PI_E = np.log(2.0 * np.pi) + 1.0


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "tanh"

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays):
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.activation)


@dataclass
class LatentCodec:
    encoder: MlpParams
    decoder: MlpParams
    latent_dim: int
    data_dim: int

    def arrays(self):
        return self.encoder.arrays() + self.decoder.arrays()

    def with_arrays(self, arrays):
        k = len(self.encoder.arrays())
        return LatentCodec(self.encoder.with_arrays(arrays[:k]),
                           self.decoder.with_arrays(arrays[k:]),
                           self.latent_dim, self.data_dim)

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])


def _glorot(fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(sizes, rng, activation="tanh"):
    weights = [_glorot(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return MlpParams(weights, biases, activation)


def make_codec(data_dim, latent_dim, hidden=(64, 32), activation="tanh", seed=0,
               init="glorot"):
    """Build an encoder ``d-h1-...-2D`` and a mirrored decoder ``D-...-h1-2d``.

    ``init="identity"`` requires ``hidden == ()`` and ``data_dim >= latent_dim``;
    the encoder mean then copies the first ``latent_dim`` inputs and the
    decoder mean writes them back, both log-variance heads start at 0.
    """
    hidden = tuple(int(h) for h in hidden)
    if init == "identity":
        if hidden or data_dim < latent_dim:
            raise ShapeError("identity initialization needs a linear codec with data_dim >= latent_dim")
        enc_w = np.zeros((data_dim, 2 * latent_dim))
        enc_w[:latent_dim, :latent_dim] = np.eye(latent_dim)
        dec_w = np.zeros((latent_dim, 2 * data_dim))
        dec_w[:latent_dim, :latent_dim] = np.eye(latent_dim)
        encoder = MlpParams([enc_w], [np.zeros(2 * latent_dim)], activation)
        decoder = MlpParams([dec_w], [np.zeros(2 * data_dim)], activation)
        return LatentCodec(encoder, decoder, latent_dim, data_dim)
    rng = np.random.default_rng(seed)
    encoder = init_mlp((data_dim,) + hidden + (2 * latent_dim,), rng, activation)
    decoder = init_mlp((latent_dim,) + hidden[::-1] + (2 * data_dim,), rng, activation)
    return LatentCodec(encoder, decoder, latent_dim, data_dim)


def _act(name, a):
    if name == "tanh":
        return np.tanh(a)
    if name == "softplus":
        return np.logaddexp(0.0, a)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, pre, post):
    if name == "tanh":
        return 1.0 - post * post
    return 0.5 * (1.0 + np.tanh(0.5 * pre))  # logistic sigmoid


def mlp_forward(params, x):
    """Return the linear output and the per-layer cache for backprop."""
    h = x
    cache = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        with np.errstate(over="ignore", invalid="ignore"):
            pre = h @ w + b
            post = pre if i == last else _act(params.activation, pre)
        if not (np.all(np.isfinite(pre)) and np.all(np.isfinite(post))):
            raise NumericError(f"non-finite activation in layer {i}", layer=i)
        cache.append((h, pre, post))
        h = post
    return h, cache


def mlp_backward(params, cache, grad_out):
    """Gradients of a scalar w.r.t. weights, biases and the network input."""
    last = len(params.weights) - 1
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    g = grad_out
    for i in range(last, -1, -1):
        h_in, pre, post = cache[i]
        if i != last:
            g = g * _act_grad(params.activation, pre, post)
        gw[i] = h_in.T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return MlpParams(gw, gb, params.activation), g


def _check_input(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} must have {width} columns, got shape {x.shape}")
    return x


def _split_heads(out, width):
    raw_logvar = out[:, width:]
    return out[:, :width], np.clip(raw_logvar, LOGVAR_MIN, LOGVAR_MAX), raw_logvar


def encode(codec, x):
    """Encoder mean and clamped log-variance for every row of ``x``."""
    x = _check_input(x, codec.data_dim, "encoder input")
    out, _ = mlp_forward(codec.encoder, x)
    mu, log_var, _ = _split_heads(out, codec.latent_dim)
    return mu, log_var


def decode(codec, z):
    """Decoder mean and clamped log-variance for every row of ``z``."""
    z = _check_input(z, codec.latent_dim, "decoder input")
    out, _ = mlp_forward(codec.decoder, z)
    mu, log_var, _ = _split_heads(out, codec.data_dim)
    return mu, log_var


def reparameterize(mu, log_var, eps):
    mu = np.asarray(mu, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if mu.shape != log_var.shape or eps.shape[-mu.ndim:] != mu.shape:
        raise ShapeError(f"shapes disagree: mu {mu.shape}, log_var {log_var.shape}, eps {eps.shape}")
    return mu + eps * np.exp(0.5 * log_var)


def _as_draws(eps, n, latent_dim):
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    if eps.ndim != 3 or eps.shape[1:] != (n, latent_dim):
        raise ShapeError(f"eps must be (L, {n}, {latent_dim}) or ({n}, {latent_dim}), got {eps.shape}")
    return eps


def _cluster_arrays(model):
    means = np.array([c.m for c in model.clusters])
    prec = np.array([c.nu * c.w for c in model.clusters])  # nu_k W_k
    return means, prec


def _forward_objective(codec, x, gamma, model, eps):
    x = _check_input(x, codec.data_dim, "data")
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (x.shape[0], model.num_clusters):
        raise ShapeError(f"responsibilities {gamma.shape} do not match ({x.shape[0]}, {model.num_clusters})")
    draws = _as_draws(eps, x.shape[0], codec.latent_dim)
    enc_out, enc_cache = mlp_forward(codec.encoder, x)
    mu, log_var, raw_lv = _split_heads(enc_out, codec.latent_dim)

    means, prec = _cluster_arrays(model)
    diff = mu[:, None, :] - means[None, :, :]             # n, K, D
    pdiff = np.einsum("kij,nkj->nki", prec, diff)          # nu_k W_k (mu_n - m_k)
    cluster_term = -0.5 * float(np.sum(gamma * np.sum(diff * pdiff, axis=2)))

    entropy = 0.5 * float(np.sum(LOG_2PI_E + log_var))

    n_draws = draws.shape[0]
    recon = 0.0
    decoded = []
    for e in draws:
        z = mu + e * np.exp(0.5 * log_var)
        dec_out, dec_cache = mlp_forward(codec.decoder, z)
        mx, lvx, raw_lvx = _split_heads(dec_out, codec.data_dim)
        resid = x - mx
        inv_var = np.exp(-lvx)
        recon += -0.5 * float(np.sum(lvx + resid * resid * inv_var)) / n_draws
        decoded.append((e, dec_cache, resid, inv_var, raw_lvx))

    value = cluster_term + recon + entropy
    if not np.isfinite(value):
        raise NumericError("codec objective is not finite")
    state = (enc_cache, mu, log_var, raw_lv, gamma, pdiff, decoded, n_draws)
    return value, state


def elbo_vae(codec, x, gamma, model, eps):
    """Codec part of the ELBO for a batch, summed over rows and averaged over draws."""
    return _forward_objective(codec, x, gamma, model, eps)[0]


def elbo_vae_and_grad(codec, x, gamma, model, eps):
    value, state = _forward_objective(codec, x, gamma, model, eps)
    enc_cache, mu, log_var, raw_lv, gamma, pdiff, decoded, n_draws = state

    g_mu = -np.einsum("nk,nki->ni", gamma, pdiff)
    g_lv = np.full_like(log_var, 0.5)
    dec_grads = None
    sigma = np.exp(0.5 * log_var)
    for e, dec_cache, resid, inv_var, raw_lvx in decoded:
        g_mx = resid * inv_var / n_draws
        g_lvx = -0.5 * (1.0 - resid * resid * inv_var) / n_draws
        g_lvx = g_lvx * ((raw_lvx > LOGVAR_MIN) & (raw_lvx < LOGVAR_MAX))
        grads, g_z = mlp_backward(codec.decoder, dec_cache, np.hstack([g_mx, g_lvx]))
        if dec_grads is None:
            dec_grads = grads
        else:
            dec_grads = MlpParams([a + b for a, b in zip(dec_grads.weights, grads.weights)],
                                  [a + b for a, b in zip(dec_grads.biases, grads.biases)],
                                  grads.activation)
        g_mu = g_mu + g_z
        g_lv = g_lv + g_z * e * 0.5 * sigma
    g_lv = g_lv * ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX))
    enc_grads, _ = mlp_backward(codec.encoder, enc_cache, np.hstack([g_mu, g_lv]))
    grads = LatentCodec(enc_grads, dec_grads, codec.latent_dim, codec.data_dim)
    if not all(np.all(np.isfinite(a)) for a in grads.arrays()):
        raise NumericError("non-finite codec gradient")
    return value, grads


def grad_elbo_vae(codec, x, gamma, model, eps):
    """Gradient of :func:`elbo_vae` shaped like ``codec``."""
    return elbo_vae_and_grad(codec, x, gamma, model, eps)[1]


@dataclass
class AdamState:
    lr: float = 2e-3
    decay: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_codec(cls, codec, lr=2e-3, decay=0.9):
        arrays = codec.arrays()
        return cls(lr=lr, decay=decay, m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays])

    def decayed(self):
        """Copy of the state with the learning rate multiplied by ``decay``."""
        return AdamState(self.lr * self.decay, self.decay, self.beta1, self.beta2, self.eps,
                         self.step, self.m, self.v)


def adam_step(state, codec, grads):
    """One Adam ascent step.  Returns ``(codec, state)``; inputs are not modified."""
    params = codec.arrays()
    g_arrays = grads.arrays()
    if len(params) != len(g_arrays) or any(p.shape != g.shape for p, g in zip(params, g_arrays)):
        raise ShapeError("gradient structure does not match the codec")
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the codec")
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        new_p.append(p + state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.lr, state.decay, state.beta1, state.beta2, state.eps, t,
                          new_m, new_v)
    return codec.with_arrays(new_p), new_state
