"""Streaming Dirichlet-process mixture clustering in a learned latent space."""
from .errors import (CheckpointIntegrityError, CheckpointVersionError, ConfigError,
                     DataFormatError, DomainError, NotPositiveDefinite, NumericError, ShapeError,
                     StateError, StreamDPError)
from .dpmm import (DpmmModel, NWPrior, SuffStats, compute_suffstats, elbo_dpmm, global_update,
                   local_update, sample_generative)
from .vae import AdamState, LatentCodec, adam_step, elbo_vae, grad_elbo_vae, make_codec
from .stream import StreamConfig, StreamLedger, run_stream
from .replay import ReplayConfig, replay_augment
from .config import RunConfig, load_config
from .data import load_dataset, make_gmm
from .protocols import assign, run_protocol

__version__ = "0.1.0"
