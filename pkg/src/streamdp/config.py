"""Run configuration with flat dotted keys (``birth.k_prime``, ``replay.enabled``)."""
from dataclasses import dataclass, field, fields, is_dataclass

import yaml

from .errors import ConfigError
from .replay import ReplayConfig
from .stream import BirthConfig, MergeConfig, StreamConfig

PROTOCOLS = ("batch", "disjoint-streams", "contamination")


@dataclass
class DisjointConfig:
    classes_per_stream: int = 2


@dataclass
class ContaminationConfig:
    novel_class: int = -1            # -1: largest label
    fraction: float = 0.05
    streams: int = 1
    pretrain_streams: int = 1


@dataclass
class RunConfig:
    protocol: str = "batch"
    seed: int = 0
    latent_dim: int = 2
    data_dim: int = 0                # 0: taken from the data
    hidden: tuple = (64, 32)
    activation: str = "tanh"
    codec_init: str = "glorot"
    stream_size: int = 1000
    minibatches: int = 2
    batch_size: int = 1500
    batch_passes: int = 2
    vae_steps: int = 10
    mc_samples: int = 1
    learning_rate: float = 2e-3
    lr_decay: float = 0.9
    alpha0: float = 1.0
    truncation_max: int = 50
    max_sweeps: int = 20
    tol: float = 1e-6
    prune: bool = True
    prune_threshold: float = 0.01
    workers: int = 1
    birth: BirthConfig = field(default_factory=BirthConfig)
    merge: MergeConfig = field(default_factory=MergeConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    disjoint: DisjointConfig = field(default_factory=DisjointConfig)
    contamination: ContaminationConfig = field(default_factory=ContaminationConfig)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        for name in ("latent_dim", "stream_size", "minibatches", "batch_size", "batch_passes",
                     "mc_samples", "truncation_max", "max_sweeps", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.vae_steps < 0:
            raise ConfigError("vae_steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not self.alpha0 > 0:
            raise ConfigError("alpha0 must be positive")
        if self.codec_init not in ("glorot", "identity"):
            raise ConfigError("codec_init must be 'glorot' or 'identity'")
        if not 0 <= self.contamination.fraction <= 1:
            raise ConfigError("contamination.fraction must lie in [0, 1]")

    def stream_config(self, minibatches=None, passes=1):
        return StreamConfig(minibatches=minibatches or self.minibatches,
                            vae_steps=self.vae_steps, passes=passes,
                            max_sweeps=self.max_sweeps, tol=self.tol,
                            mc_samples=self.mc_samples, prune=self.prune,
                            prune_threshold=self.prune_threshold, workers=self.workers,
                            birth=self.birth, merge=self.merge, replay=self.replay)

    def to_flat(self):
        return _flatten(self)

    @classmethod
    def from_flat(cls, flat):
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat):
        """Apply ``{"dotted.key": value}`` overrides in place."""
        for key, value in flat.items():
            obj = self
            parts = key.split(".")
            for part in parts[:-1]:
                if not hasattr(obj, part) or not is_dataclass(getattr(obj, part)):
                    raise ConfigError(f"unknown config key {key!r}")
                obj = getattr(obj, part)
            leaf = parts[-1]
            if leaf not in {f.name for f in fields(obj)} or is_dataclass(getattr(obj, leaf)):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(obj, leaf, _coerce(getattr(obj, leaf), value, key))
        self.hidden = tuple(int(h) for h in self.hidden)
        try:
            self.validate()
            for sub in (self.birth, self.replay):
                sub.__post_init__()
        except ValueError as err:
            raise ConfigError(str(err))
        return self


def _flatten(obj, prefix=""):
    out = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        if is_dataclass(value):
            out.update(_flatten(value, prefix + f.name + "."))
        else:
            out[prefix + f.name] = list(value) if isinstance(value, tuple) else value
    return out


def _coerce(current, value, key):
    if isinstance(value, str) and not isinstance(current, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError:
            raise ConfigError(f"cannot parse value for {key!r}")
    try:
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(current, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            return tuple(int(v) for v in (value if isinstance(value, (list, tuple)) else [value]))
        if isinstance(current, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key!r}")
    return value


def load_config(path):
    """Read a YAML mapping of flat dotted keys into a :class:`RunConfig`."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping of dotted keys")
    return RunConfig.from_flat(raw)
