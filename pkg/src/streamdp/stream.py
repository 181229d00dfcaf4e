"""Streaming orchestration over mini-batches and data streams.

Three levels of statistics are kept: one record per mini-batch of the live
stream, their sum for the live stream, and the overall sum of every
finalized stream.  Revisiting a mini-batch subtracts its old record,
stores the new one and adds it back.  After a stream is finalized its
statistics become the carried prior statistics of the model.
"""
from dataclasses import dataclass, field
import logging

import numpy as np

from . import dpmm
from .dpmm import SuffStats, compute_suffstats, global_update, local_update
from .errors import NumericError, StateError
from .replay import ReplayConfig, replay_augment
from .vae import AdamState, adam_step, elbo_vae_and_grad, encode

log = logging.getLogger(__name__)


@dataclass
class BirthConfig:
    enabled: bool = True
    collect_threshold: float = 0.1
    k_prime: int = 10
    min_subsample: int = 50
    subsample_cap: int = 500
    fit_iters: int = 50
    refine_sweeps: int = 2

    def __post_init__(self):
        if not 0 < self.collect_threshold < 1:
            raise ValueError("collect_threshold must lie in (0, 1)")
        if self.k_prime < 1:
            raise ValueError("k_prime must be >= 1")


@dataclass
class MergeConfig:
    enabled: bool = True
    top_m: int = 3


@dataclass
class StreamConfig:
    minibatches: int = 2
    vae_steps: int = 10
    passes: int = 1
    max_sweeps: int = 20
    tol: float = 1e-6
    mc_samples: int = 1
    train_codec: bool = True
    prune: bool = True
    prune_threshold: float = 0.01
    workers: int = 1
    birth: BirthConfig = field(default_factory=BirthConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)


class StatScope:
    """Mini-batch, stream and overall statistics."""

    def __init__(self, num_clusters, dim):
        self.dim = dim
        self.minibatch = {}
        self.stream = None
        self.overall = SuffStats.zeros(num_clusters, dim)
        self.live_stream = None

    @property
    def num_clusters(self):
        return self.overall.num_clusters

    def begin_stream(self, j):
        if self.live_stream is not None:
            raise StateError(f"stream {self.live_stream} is still live")
        self.live_stream = j
        self.minibatch = {}
        self.stream = SuffStats.zeros(self.num_clusters, self.dim)
        return self

    def remap(self, fn):
        """Apply a structural edit (append/merge/drop clusters) to every record."""
        self.overall = fn(self.overall)
        if self.stream is not None:
            self.stream = fn(self.stream)
        self.minibatch = {i: fn(s) for i, s in self.minibatch.items()}


def stats_cycle(scope, j, i, new_batch_stats):
    """Swap mini-batch ``i``'s record in stream ``j`` for ``new_batch_stats``."""
    if scope.live_stream is None or j != scope.live_stream:
        raise StateError(f"stream {j} is not the live stream ({scope.live_stream})")
    old = scope.minibatch.get(i)
    if old is not None:
        scope.stream = scope.stream - old
    scope.minibatch[i] = new_batch_stats.copy()
    scope.stream = (scope.stream + new_batch_stats).clamp()
    return scope


def finalize_stream(scope):
    """Fold the live stream into the overall statistics and clear the stream slots."""
    if scope.live_stream is None:
        raise StateError("no live stream to finalize")
    scope.overall = scope.overall + scope.stream
    scope.stream = None
    scope.minibatch = {}
    scope.live_stream = None
    return scope


@dataclass
class StreamLedger:
    model: dpmm.DpmmModel
    codec: object
    adam: AdamState
    scope: StatScope
    stream_index: int = 0
    rng: np.random.Generator = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(0)

    @classmethod
    def create(cls, model, codec, lr=2e-3, lr_decay=0.9, seed=0):
        return cls(model, codec, AdamState.for_codec(codec, lr, lr_decay),
                   StatScope(model.num_clusters, model.dim), rng=np.random.default_rng(seed))

    @property
    def prior_snapshot(self):
        return self.model.prior, self.model.prior_stats

    def _edit(self, clusters, fn):
        model = self.model
        self.model = dpmm.DpmmModel(model.alpha0, model.prior, clusters, model.truncation_max,
                                    fn(model.prior_stats))
        self.scope.remap(fn)

    def append_clusters(self, new):
        extra = len(new)
        self._edit(self.model.clusters + list(new), lambda s: s.extended(extra))

    def merge_clusters(self, a, b):
        a, b = min(a, b), max(a, b)
        clusters = [c for k, c in enumerate(self.model.clusters) if k != b]
        self._edit(clusters, lambda s: s.merged(a, b))

    def keep_clusters(self, keep):
        keep = list(keep)
        self._edit([self.model.clusters[k] for k in keep], lambda s: s.take(keep))


def absorb_posterior_as_prior(ledger):
    """Make the current posterior the prior for the next stream."""
    if ledger.scope.live_stream is not None:
        raise StateError("finalize the live stream before absorbing it")
    ledger.model = dpmm.DpmmModel(ledger.model.alpha0, ledger.model.prior, ledger.model.clusters,
                                  ledger.model.truncation_max, ledger.scope.overall.copy())
    ledger.stream_index += 1
    return ledger


def _as_batches(z, gamma):
    if isinstance(z, np.ndarray):
        return [z], [gamma]
    return list(z), list(gamma)


def _refresh(ledger, z_batches):
    """Local update on every batch, statistic swap, then one global update."""
    j = ledger.scope.live_stream
    gammas = []
    for i, zb in enumerate(z_batches):
        g = local_update(zb, ledger.model)
        stats_cycle(ledger.scope, j, i, compute_suffstats(zb, g))
        gammas.append(g)
    ledger.model = global_update(ledger.model, ledger.scope.stream)
    return gammas


def stream_elbo(ledger, gammas):
    entropy = sum(dpmm.assignment_entropy(g) for g in gammas if g is not None)
    return dpmm.elbo_from_stats(ledger.model, ledger.scope.stream, entropy)


def _kmeanspp(z, k, rng):
    centers = [z[rng.integers(z.shape[0])]]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        centers.append(z[rng.choice(z.shape[0], p=d2 / total)])
        d2 = np.minimum(d2, np.sum((z - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def fit_fresh_dpmm(z, prior, alpha0, num_clusters, iters, rng):
    """Fit a fresh truncated DPMM to ``z`` from a k-means++ hard start."""
    centers = _kmeanspp(z, num_clusters, rng)
    k = centers.shape[0]
    d2 = np.sum((z[:, None, :] - centers[None]) ** 2, axis=2)
    gamma = np.full((z.shape[0], k), dpmm.GAMMA_FLOOR)
    gamma[np.arange(z.shape[0]), np.argmin(d2, axis=1)] = 1.0
    gamma /= gamma.sum(axis=1, keepdims=True)
    model = dpmm.DpmmModel.initial(prior.dim, alpha0, max(k, 1), prior, num_clusters=k)
    model = global_update(model, compute_suffstats(z, gamma))
    for _ in range(iters):
        gamma = local_update(z, model)
        model = global_update(model, compute_suffstats(z, gamma))
    return model, gamma


def birth_move(ledger, z, gamma, cfg, rng=None):
    """Propose new components from per-cluster subsamples.

    ``z`` and ``gamma`` are the live stream's latent rows and
    responsibilities, either single matrices or per-mini-batch lists.
    Returns ``(ledger, gammas, n_born)`` with refreshed responsibilities.
    """
    rng = ledger.rng if rng is None else rng
    z_batches, g_batches = _as_batches(z, gamma)
    z_all = np.concatenate(z_batches)
    g_all = np.concatenate(g_batches)
    model = ledger.model
    born = []
    born_stats = []
    for k in range(model.num_clusters):
        if model.num_clusters + len(born) + cfg.k_prime > model.truncation_max:
            log.info("birth skipped: truncation cap %d reached", model.truncation_max)
            break
        sub = z_all[g_all[:, k] > cfg.collect_threshold]
        if sub.shape[0] < cfg.min_subsample:
            continue
        if sub.shape[0] > cfg.subsample_cap:
            sub = sub[np.sort(rng.choice(sub.shape[0], cfg.subsample_cap, replace=False))]
        fitted, fit_gamma = fit_fresh_dpmm(sub, model.prior, model.alpha0, cfg.k_prime,
                                           cfg.fit_iters, rng)
        keep = np.flatnonzero(fit_gamma.sum(axis=0) >= 1.0)
        born.extend(fitted.clusters[k] for k in keep)
        born_stats.append(compute_suffstats(sub, fit_gamma).take(keep))
    if not born:
        return ledger, g_batches, 0
    ledger.append_clusters(born)
    # seed the expanded model with the subsample statistics so the newborn
    # sticks carry mass before the first local step; dropped on refresh
    seed = SuffStats(np.concatenate([np.zeros(model.num_clusters)] + [s.n for s in born_stats]),
                     np.concatenate([np.zeros((model.num_clusters, model.dim))]
                                    + [s.s1 for s in born_stats]),
                     np.concatenate([np.zeros((model.num_clusters, model.dim, model.dim))]
                                    + [s.s2 for s in born_stats]))
    ledger.model = global_update(ledger.model, ledger.scope.stream + seed)
    for _ in range(max(cfg.refine_sweeps, 1)):
        g_batches = _refresh(ledger, z_batches)
    return ledger, g_batches, len(born)


def merge_candidates(model, stats):
    """Cluster pairs ranked by the Normal-Wishart marginal-likelihood merge score."""
    total = model.prior_stats + stats
    lml = [dpmm.log_marginal_nw(model.prior, total.n[k], total.s1[k], total.s2[k])
           for k in range(model.num_clusters)]
    scored = []
    for a in range(model.num_clusters):
        for b in range(a + 1, model.num_clusters):
            merged = dpmm.log_marginal_nw(model.prior, total.n[a] + total.n[b],
                                          total.s1[a] + total.s1[b], total.s2[a] + total.s2[b])
            scored.append((merged - lml[a] - lml[b], a, b))
    scored.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(a, b) for _, a, b in scored]


def _merge_gamma(g, a, b):
    g = g.copy()
    g[:, a] += g[:, b]
    return np.delete(g, b, axis=1)


def merge_move(ledger, z, gamma, cfg=None):
    """Try the top-ranked pairs; keep a merge only if the DPMM ELBO strictly improves.

    Uses the live stream's statistics in ``ledger.scope``.  Returns
    ``(ledger, gammas, n_merged)``.
    """
    cfg = cfg or MergeConfig()
    _, g_batches = _as_batches(z, gamma)
    merged_count = 0
    attempts = 0
    tried = set()
    while attempts < cfg.top_m and ledger.model.num_clusters >= 2:
        stats = ledger.scope.stream
        current = stream_elbo(ledger, g_batches)
        pairs = [p for p in merge_candidates(ledger.model, stats) if p not in tried]
        if not pairs:
            break
        a, b = pairs[0]
        attempts += 1
        tried.add((a, b))
        cand_gammas = [_merge_gamma(g, a, b) for g in g_batches]
        model = ledger.model
        cand = dpmm.DpmmModel(model.alpha0, model.prior,
                              [c for k, c in enumerate(model.clusters) if k != b],
                              model.truncation_max, model.prior_stats.merged(a, b))
        cand_stats = stats.merged(a, b)
        cand = global_update(cand, cand_stats)
        entropy = sum(dpmm.assignment_entropy(g) for g in cand_gammas)
        proposed = dpmm.elbo_from_stats(cand, cand_stats, entropy)
        if proposed > current:
            ledger.merge_clusters(a, b)
            ledger.model = cand
            g_batches = cand_gammas
            merged_count += 1
            tried = set()
            log.debug("merged clusters %d and %d: elbo %.6g -> %.6g", a, b, current, proposed)
    return ledger, g_batches, merged_count


def prune_clusters(ledger, z_batches, threshold):
    """Drop clusters whose carried plus live mass is below ``threshold``."""
    total = ledger.model.prior_stats.n + ledger.scope.stream.n
    keep = [k for k in range(ledger.model.num_clusters) if total[k] >= threshold]
    if not keep:
        keep = [int(np.argmax(total))]
    if len(keep) == ledger.model.num_clusters:
        return ledger, None, 0
    removed = ledger.model.num_clusters - len(keep)
    ledger.keep_clusters(keep)
    gammas = _refresh(ledger, z_batches)
    return ledger, gammas, removed


def train_codec_batch(ledger, x, steps, mc_samples=1):
    """``steps`` Adam ascent steps on one mini-batch with the DPMM held fixed."""
    mu, _ = encode(ledger.codec, x)
    gamma = local_update(mu, ledger.model)
    value = None
    for _ in range(steps):
        eps = ledger.rng.standard_normal((mc_samples, x.shape[0], ledger.codec.latent_dim))
        value, grads = elbo_vae_and_grad(ledger.codec, x, gamma, ledger.model, eps)
        ledger.codec, ledger.adam = adam_step(ledger.adam, ledger.codec, grads)
    return value


def run_stream(ledger, stream, cfg):
    """Process one data stream end to end and absorb it into the prior.

    Returns the ledger; the stream's event record is appended to
    ``ledger.history``.
    """
    stream = np.asarray(stream, dtype=np.float64)
    j = ledger.stream_index
    record = {"stream": j, "rows": int(stream.shape[0]), "replayed": 0, "events": []}
    if stream.shape[0] == 0:
        ledger.stream_index += 1
        record["clusters"] = ledger.model.num_clusters
        ledger.history.append(record)
        return ledger

    x = replay_augment(ledger, stream, cfg.replay, cfg.minibatches)
    record["replayed"] = int(x.shape[0] - stream.shape[0])
    batches = np.array_split(x, min(cfg.minibatches, x.shape[0]))
    n_batches = len(batches)
    ledger.scope.begin_stream(j)
    z_batches = [None] * n_batches
    g_batches = [None] * n_batches
    birth_pending = cfg.birth.enabled

    for pass_index in range(cfg.passes):
        for i, xb in enumerate(batches):
            if cfg.train_codec and cfg.vae_steps > 0:
                train_codec_batch(ledger, xb, cfg.vae_steps, cfg.mc_samples)
            z_batches[i] = encode(ledger.codec, xb)[0]
            prev = None
            for sweep in range(cfg.max_sweeps):
                g_batches[i] = local_update(z_batches[i], ledger.model, cfg.workers)
                stats_cycle(ledger.scope, j, i, compute_suffstats(z_batches[i], g_batches[i]))
                ledger.model = global_update(ledger.model, ledger.scope.stream)
                visited = [k for k in range(n_batches) if z_batches[k] is not None]
                elbo = stream_elbo(ledger, g_batches)
                births = merges = 0
                if birth_pending and pass_index == 0 and i == n_batches - 1:
                    birth_pending = False
                    ledger, new_g, births = birth_move(
                        ledger, [z_batches[k] for k in visited],
                        [g_batches[k] for k in visited], cfg.birth)
                    for k, g in zip(visited, new_g):
                        g_batches[k] = g
                if cfg.merge.enabled and ledger.model.num_clusters >= 2:
                    ledger, new_g, merges = merge_move(
                        ledger, [z_batches[k] for k in visited],
                        [g_batches[k] for k in visited], cfg.merge)
                    for k, g in zip(visited, new_g):
                        g_batches[k] = g
                if births or merges:
                    elbo = stream_elbo(ledger, g_batches)
                if not np.isfinite(elbo):
                    raise NumericError(
                        f"non-finite ELBO in stream {j}, batch {i}, sweep {sweep} "
                        f"with {ledger.model.num_clusters} clusters")
                record["events"].append({"pass": pass_index, "batch": i, "sweep": sweep,
                                         "elbo": float(elbo),
                                         "clusters": ledger.model.num_clusters,
                                         "births": births, "merges": merges})
                if (not births and not merges and prev is not None
                        and abs(elbo - prev) <= cfg.tol * abs(elbo)):
                    break
                prev = elbo
        if cfg.prune:
            ledger, new_g, removed = prune_clusters(ledger, z_batches, cfg.prune_threshold)
            if new_g is not None:
                g_batches = new_g
            record["pruned"] = record.get("pruned", 0) + removed
        if cfg.train_codec:
            ledger.adam = ledger.adam.decayed()

    record["elbo"] = float(stream_elbo(ledger, g_batches))
    record["clusters"] = ledger.model.num_clusters
    finalize_stream(ledger.scope)
    absorb_posterior_as_prior(ledger)
    ledger.history.append(record)
    return ledger
