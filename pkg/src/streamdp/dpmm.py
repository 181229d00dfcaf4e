"""Truncated stick-breaking DP mixture with Normal-Wishart components.

The variational family is q(v) q(phi) q(y): a Beta factor per stick, a
Normal-Wishart factor per component and a categorical factor per point.
All ``T`` sticks are free; mass beyond the truncation is never assigned.

Each cluster's prior is the base Normal-Wishart prior updated with the
cluster's *carried* statistics (``DpmmModel.prior_stats``).  A fresh
cluster carries zeros and therefore sits on the base prior; a cluster
that survived earlier streams carries everything absorbed so far, which
makes the posterior of stream ``b - 1`` the prior of stream ``b``.
"""
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from . import mathcore
from .errors import DomainError, NotPositiveDefinite, NumericError, ShapeError
from .mathcore import LOG_2PI, CholeskyFactor, cholesky, digamma, log_sum_exp

GAMMA_FLOOR = 1e-12


@dataclass
class NWPrior:
    m0: np.ndarray
    beta0: float
    nu0: float
    w0: np.ndarray

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        self.w0 = np.atleast_2d(np.asarray(self.w0, dtype=np.float64))
        dim = self.m0.shape[0]
        if self.w0.shape != (dim, dim):
            raise ShapeError(f"w0 must be {dim}x{dim}, got {self.w0.shape}")
        if not self.beta0 > 0:
            raise DomainError("beta0 must be positive")
        if not self.nu0 > dim - 1:
            raise DomainError(f"nu0 must exceed D - 1 = {dim - 1}")
        self._w0_chol = cholesky(self.w0)
        self.w0_inv = self._w0_chol.inverse()
        self.w0_inv = 0.5 * (self.w0_inv + self.w0_inv.T)

    @classmethod
    def default(cls, dim):
        return cls(np.zeros(dim), 0.2, dim + 2.0, np.eye(dim))

    @property
    def dim(self):
        return self.m0.shape[0]

    def as_cluster(self, eta1=1.0, eta2=1.0):
        return ClusterPosterior(self.m0.copy(), float(self.beta0), float(self.nu0),
                                cholesky(self.w0_inv), float(eta1), float(eta2))


@dataclass
class ClusterPosterior:
    """Variational factors of one component.

    ``winv_chol`` factors the inverse scale matrix ``W^{-1}``; ``W`` itself
    is only reached through triangular solves.
    """
    m: np.ndarray
    beta: float
    nu: float
    winv_chol: CholeskyFactor
    eta1: float
    eta2: float

    @property
    def dim(self):
        return self.m.shape[0]

    @property
    def w(self):
        w = self.winv_chol.inverse()
        return 0.5 * (w + w.T)

    @property
    def logdet_w(self):
        return -self.winv_chol.logdet()

    def mahalanobis(self, z):
        """Row-wise ``(z - m)^T W (z - m)``."""
        return self.winv_chol.quad_inv(np.asarray(z) - self.m)


@dataclass
class SuffStats:
    """Per-cluster zeroth, first and second weighted moments."""
    n: np.ndarray
    s1: np.ndarray
    s2: np.ndarray

    @classmethod
    def zeros(cls, num_clusters, dim):
        return cls(np.zeros(num_clusters), np.zeros((num_clusters, dim)),
                   np.zeros((num_clusters, dim, dim)))

    @property
    def num_clusters(self):
        return self.n.shape[0]

    @property
    def dim(self):
        return self.s1.shape[1]

    def copy(self):
        return SuffStats(self.n.copy(), self.s1.copy(), self.s2.copy())

    def __add__(self, other):
        self._check(other)
        return SuffStats(self.n + other.n, self.s1 + other.s1, self.s2 + other.s2)

    def __sub__(self, other):
        self._check(other)
        return SuffStats(self.n - other.n, self.s1 - other.s1, self.s2 - other.s2)

    def _check(self, other):
        if self.s1.shape != other.s1.shape:
            raise ShapeError(f"statistics shapes differ: {self.s1.shape} vs {other.s1.shape}")

    def means(self):
        """Weighted means; rows with zero count are returned as zeros."""
        safe = np.where(self.n > 0, self.n, 1.0)
        return np.where(self.n[:, None] > 0, self.s1 / safe[:, None], 0.0)

    def scatter(self):
        """Normalized scatter ``S_k = sum_zz / N_k - zbar zbar^T``."""
        zbar = self.means()
        safe = np.where(self.n > 0, self.n, 1.0)
        s = self.s2 / safe[:, None, None] - np.einsum("ki,kj->kij", zbar, zbar)
        return np.where(self.n[:, None, None] > 0, s, 0.0)

    def take(self, index):
        index = np.asarray(index, dtype=int)
        return SuffStats(self.n[index].copy(), self.s1[index].copy(), self.s2[index].copy())

    def extended(self, extra):
        """Append ``extra`` zero clusters."""
        z = SuffStats.zeros(extra, self.dim)
        return SuffStats(np.concatenate([self.n, z.n]), np.concatenate([self.s1, z.s1]),
                         np.concatenate([self.s2, z.s2]))

    def merged(self, a, b):
        """Fold cluster ``b`` into ``a`` (``a < b``) and drop ``b``."""
        out = self.copy()
        out.n[a] += out.n[b]
        out.s1[a] += out.s1[b]
        out.s2[a] += out.s2[b]
        keep = [k for k in range(self.num_clusters) if k != b]
        return out.take(keep)

    def clamp(self, tol=1e-9):
        """Zero out counts that drifted slightly negative through subtraction."""
        small = self.n < 0
        if np.any(self.n < -tol * max(1.0, float(np.max(np.abs(self.n))))):
            raise DomainError("statistics have materially negative counts")
        if np.any(small):
            self.n[small] = 0.0
            self.s1[small] = 0.0
            self.s2[small] = 0.0
        return self


@dataclass
class DpmmModel:
    alpha0: float
    prior: NWPrior
    clusters: list
    truncation_max: int = 50
    prior_stats: SuffStats = None

    def __post_init__(self):
        if self.prior_stats is None:
            self.prior_stats = SuffStats.zeros(len(self.clusters), self.prior.dim)
        if not 1 <= len(self.clusters) <= self.truncation_max:
            raise DomainError(f"cluster count {len(self.clusters)} outside [1, {self.truncation_max}]")

    @classmethod
    def initial(cls, dim, alpha0=1.0, truncation_max=50, prior=None, num_clusters=1):
        prior = prior or NWPrior.default(dim)
        clusters = [prior.as_cluster(1.0, alpha0) for _ in range(num_clusters)]
        return cls(alpha0, prior, clusters, truncation_max)

    @property
    def num_clusters(self):
        return len(self.clusters)

    @property
    def dim(self):
        return self.prior.dim

    def copy(self):
        return replace(self, clusters=[replace(c, m=c.m.copy()) for c in self.clusters],
                       prior_stats=self.prior_stats.copy())

    def eta(self):
        return (np.array([c.eta1 for c in self.clusters]),
                np.array([c.eta2 for c in self.clusters]))

    def cluster_priors(self):
        """Effective Normal-Wishart prior of every cluster."""
        ps = self.prior_stats
        return [posterior_from_stats(self.prior, ps.n[k], ps.s1[k], ps.s2[k])
                for k in range(self.num_clusters)]

    def stick_priors(self):
        """Beta prior parameters ``(a_k, b_k)`` carried by each stick."""
        return stick_parameters(self.prior_stats.n, self.alpha0)


def stick_weights(v):
    """Mixture weights from stick proportions ``v``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError("stick proportions must be a non-empty vector")
    if np.any(~np.isfinite(v)) or np.any(v <= 0) or np.any(v > 1):
        raise DomainError("stick proportions must lie in (0, 1]")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - v[:-1])])
    return v * remaining


def expected_log_sticks(eta1, eta2):
    """``(E[log v], E[log(1 - v)])`` under ``Beta(eta1, eta2)`` factors."""
    eta1 = np.asarray(eta1, dtype=np.float64)
    eta2 = np.asarray(eta2, dtype=np.float64)
    if np.any(eta1 <= 0) or np.any(eta2 <= 0):
        raise DomainError("Beta parameters must be positive")
    dsum = digamma(eta1 + eta2)
    return digamma(eta1) - dsum, digamma(eta2) - dsum


def expected_stick_weights(model):
    """Mixture weights built from ``E[v_k]``, renormalized over the truncation."""
    eta1, eta2 = model.eta()
    ev = eta1 / (eta1 + eta2)
    w = ev * np.concatenate([[1.0], np.cumprod(1.0 - ev[:-1])])
    return w / w.sum()


def expected_log_det_precision(c):
    return mathcore.expected_logdet_wishart(c.logdet_w, c.dim, c.nu)


def stick_parameters(counts, alpha0):
    counts = np.asarray(counts, dtype=np.float64)
    tail = np.concatenate([np.cumsum(counts[::-1])[::-1][1:], [0.0]])
    return 1.0 + counts, alpha0 + tail


def posterior_from_stats(prior, n, s1, s2):
    """Normal-Wishart posterior for weighted moments ``(n, s1, s2)``.

    Returns ``(m, beta, nu, winv_chol)``.  With ``n == 0`` the prior comes
    back unchanged.
    """
    if n == 0:
        return prior.m0.copy(), float(prior.beta0), float(prior.nu0), cholesky(prior.w0_inv)
    beta = prior.beta0 + n
    nu = prior.nu0 + n
    m = (prior.beta0 * prior.m0 + s1) / beta
    zbar = s1 / n
    d = zbar - prior.m0
    winv = (prior.w0_inv + (s2 - np.outer(s1, s1) / n)
            + (prior.beta0 * n / beta) * np.outer(d, d))
    winv = 0.5 * (winv + winv.T)
    return m, float(beta), float(nu), cholesky(winv)


def _check_z(z, dim):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != dim:
        raise ShapeError(f"expected an (n, {dim}) latent matrix, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise DomainError("latent matrix has non-finite entries")
    return z


def log_scores(z, model):
    """Unnormalized log responsibilities ``S_nk``."""
    z = _check_z(z, model.dim)
    eta1, eta2 = model.eta()
    elog_v, elog_1mv = expected_log_sticks(eta1, eta2)
    prior_part = elog_v + np.concatenate([[0.0], np.cumsum(elog_1mv[:-1])])
    out = np.empty((z.shape[0], model.num_clusters))
    dim = model.dim
    with np.errstate(over="ignore", invalid="ignore"):
        for k, c in enumerate(model.clusters):
            out[:, k] = (prior_part[k] + 0.5 * expected_log_det_precision(c)
                         - 0.5 * dim / c.beta - 0.5 * c.nu * c.mahalanobis(z))
    if not np.all(np.isfinite(out)):
        raise NumericError("responsibility scores overflowed")
    return out


def normalize_log_scores(scores):
    gamma = np.exp(scores - log_sum_exp(scores, axis=1)[:, None])
    gamma = np.maximum(gamma, GAMMA_FLOOR)
    return gamma / gamma.sum(axis=1, keepdims=True)


def local_update(z, model, workers=1):
    """Soft assignments of latent rows to clusters.

    With ``workers > 1`` rows are scored in contiguous blocks on a thread
    pool; block results are concatenated in row order.
    """
    z = _check_z(z, model.dim)
    if workers <= 1 or z.shape[0] < 2 * workers:
        return normalize_log_scores(log_scores(z, model))
    from concurrent.futures import ThreadPoolExecutor
    blocks = np.array_split(z, workers)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda b: normalize_log_scores(log_scores(b, model)), blocks))
    return np.concatenate(parts)


def compute_suffstats(z, gamma):
    z = np.asarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if z.ndim != 2 or gamma.ndim != 2 or z.shape[0] != gamma.shape[0]:
        raise ShapeError(f"latent rows {z.shape} and responsibility rows {gamma.shape} disagree")
    n = gamma.sum(axis=0)
    s1 = gamma.T @ z
    s2 = np.einsum("nk,ni,nj->kij", gamma, z, z)
    s2 = 0.5 * (s2 + np.swapaxes(s2, 1, 2))
    return SuffStats(n, s1, s2)


def assignment_entropy(gamma):
    gamma = np.asarray(gamma)
    return float(-np.sum(gamma * np.log(gamma))) if gamma.size else 0.0


def global_update(model, stats):
    """Closed-form update of every Normal-Wishart and stick factor.

    ``stats`` are the current-stream statistics; the cluster's carried
    statistics are added before conjugate updating.
    """
    if stats.num_clusters != model.num_clusters:
        raise ShapeError(f"{stats.num_clusters} statistic records for {model.num_clusters} clusters")
    total = model.prior_stats + stats
    eta1, eta2 = stick_parameters(total.n, model.alpha0)
    clusters = []
    for k in range(model.num_clusters):
        try:
            m, beta, nu, winv_chol = posterior_from_stats(model.prior, total.n[k], total.s1[k],
                                                          total.s2[k])
        except NotPositiveDefinite as err:
            raise NotPositiveDefinite(err.pivot, f"cluster {k}: corrupted statistics ({err})")
        clusters.append(ClusterPosterior(m, beta, nu, winv_chol, float(eta1[k]), float(eta2[k])))
    return replace(model, clusters=clusters, prior_stats=model.prior_stats.copy())


def _kl_beta(a1, b1, a0, b0):
    """KL(Beta(a1, b1) || Beta(a0, b0)) element-wise."""
    lb1 = gammaln(a1) + gammaln(b1) - gammaln(a1 + b1)
    lb0 = gammaln(a0) + gammaln(b0) - gammaln(a0 + b0)
    return (lb0 - lb1 + (a1 - a0) * digamma(a1) + (b1 - b0) * digamma(b1)
            + (a0 - a1 + b0 - b1) * digamma(a1 + b1))


def elbo_from_stats(model, stats, entropy):
    """DPMM part of the ELBO from cached statistics and ``H[q(y)]``."""
    if stats.num_clusters != model.num_clusters:
        raise ShapeError(f"{stats.num_clusters} statistic records for {model.num_clusters} clusters")
    dim = model.dim
    eta1, eta2 = model.eta()
    a0, b0 = model.stick_priors()
    elog_v, elog_1mv = expected_log_sticks(eta1, eta2)
    tail = np.concatenate([np.cumsum(stats.n[::-1])[::-1][1:], [0.0]])
    total = float(np.sum(stats.n * elog_v + tail * elog_1mv))
    total -= float(np.sum(_kl_beta(eta1, eta2, a0, b0)))

    for k, (c, p) in enumerate(zip(model.clusters, model.cluster_priors())):
        pm, pbeta, pnu, pwinv_chol = p
        n = stats.n[k]
        logdet_w = c.logdet_w
        elog_lam = mathcore.expected_logdet_wishart(logdet_w, dim, c.nu)
        # sum_n gamma_nk (z_n - m)^T W (z_n - m) from raw moments
        wm = c.winv_chol.solve(c.m)
        quad = (c.winv_chol.trace_inv(stats.s2[k]) - 2.0 * float(wm @ stats.s1[k])
                + n * float(c.m @ wm))
        total += 0.5 * (n * (elog_lam - dim / c.beta - dim * LOG_2PI) - c.nu * quad)

        p_logdet_w = -pwinv_chol.logdet()
        dm = c.m - pm
        log_p_phi = (0.5 * (dim * np.log(pbeta / (2.0 * np.pi)) + elog_lam - dim * pbeta / c.beta
                            - pbeta * c.nu * float(c.winv_chol.quad_inv(dm)))
                     + mathcore.log_wishart_normalizer_from_logdet(p_logdet_w, dim, pnu)
                     + 0.5 * (pnu - dim - 1) * elog_lam
                     - 0.5 * c.nu * c.winv_chol.trace_inv(pwinv_chol.reconstruct()))
        entropy_lam = (-mathcore.log_wishart_normalizer_from_logdet(logdet_w, dim, c.nu)
                       - 0.5 * (c.nu - dim - 1) * elog_lam + 0.5 * c.nu * dim)
        log_q_phi = (0.5 * elog_lam + 0.5 * dim * np.log(c.beta / (2.0 * np.pi))
                     - 0.5 * dim - entropy_lam)
        total += log_p_phi - log_q_phi
    return float(total + entropy)


def elbo_dpmm(model, z, gamma):
    """Every ELBO term except reconstruction and encoder entropy."""
    z = _check_z(z, model.dim)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (z.shape[0], model.num_clusters):
        raise ShapeError(f"responsibilities {gamma.shape} do not match "
                         f"({z.shape[0]}, {model.num_clusters})")
    return elbo_from_stats(model, compute_suffstats(z, gamma), assignment_entropy(gamma))


def log_marginal_nw(prior, n, s1, s2):
    """Log marginal likelihood of weighted moments under a Normal-Wishart prior."""
    dim = prior.dim
    m, beta, nu, winv_chol = posterior_from_stats(prior, n, s1, s2)
    i = np.arange(1, dim + 1)
    return float(-0.5 * n * dim * np.log(np.pi)
                 + np.sum(gammaln(0.5 * (nu + 1 - i)) - gammaln(0.5 * (prior.nu0 + 1 - i)))
                 + 0.5 * prior.nu0 * cholesky(prior.w0_inv).logdet()
                 - 0.5 * nu * winv_chol.logdet()
                 + 0.5 * dim * (np.log(prior.beta0) - np.log(beta)))


def sample_latent(model, n, rng):
    """Ancestral draws ``(z, k)`` using expected weights and mean precisions."""
    weights = expected_stick_weights(model)
    ks = rng.choice(model.num_clusters, size=n, p=weights)
    z = np.empty((n, model.dim))
    for k in range(model.num_clusters):
        rows = np.flatnonzero(ks == k)
        if rows.size == 0:
            continue
        c = model.clusters[k]
        # covariance (nu W)^{-1} = W^{-1} / nu, factor L / sqrt(nu)
        eps = rng.standard_normal((rows.size, model.dim))
        z[rows] = c.m + eps @ (c.winv_chol.lower.T / np.sqrt(c.nu))
    return z, ks


def sample_generative(model, codec, n, seed):
    """Decoded samples: cluster from the sticks, latent from the cluster, x from the decoder mean."""
    from .vae import decode
    if n == 0:
        return np.zeros((0, codec.data_dim))
    rng = np.random.default_rng(seed)
    z, _ = sample_latent(model, n, rng)
    mu_x, _ = decode(codec, z)
    return mu_x
