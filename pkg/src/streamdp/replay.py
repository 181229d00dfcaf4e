"""Generative replay: splice model samples into incoming streams."""
from dataclasses import dataclass

import numpy as np

from .dpmm import sample_generative

SEED_POLICIES = ("fixed-seed", "stream-derived")


@dataclass
class ReplayConfig:
    enabled: bool = True
    samples_per_minibatch: int = 100
    seed_policy: str = "stream-derived"
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_minibatch < 0:
            raise ValueError("samples_per_minibatch must be >= 0")
        if self.seed_policy not in SEED_POLICIES:
            raise ValueError(f"seed_policy must be one of {SEED_POLICIES}")


def _seeds(cfg, stream_index):
    base = np.random.SeedSequence([cfg.seed, stream_index, 0x5eed])
    sample_seed, shuffle_seed = base.spawn(2)
    if cfg.seed_policy == "fixed-seed":
        sample_seed = np.random.SeedSequence([cfg.seed, 0x5eed])
    return sample_seed, shuffle_seed


def replay_augment(ledger, stream, cfg, minibatches=2):
    """Prepend ``minibatches * samples_per_minibatch`` generated rows and shuffle.

    The first stream (nothing learned yet) and disabled replay return the
    input unchanged.  Generated rows are decoder means.
    """
    stream = np.asarray(stream, dtype=np.float64)
    n_gen = minibatches * cfg.samples_per_minibatch
    if not cfg.enabled or ledger.stream_index < 1 or n_gen == 0 or stream.shape[0] == 0:
        return stream
    sample_seed, shuffle_seed = _seeds(cfg, ledger.stream_index)
    generated = sample_generative(ledger.model, ledger.codec, n_gen, sample_seed)
    merged = np.vstack([generated, stream])
    order = np.random.default_rng(shuffle_seed).permutation(merged.shape[0])
    return merged[order]
