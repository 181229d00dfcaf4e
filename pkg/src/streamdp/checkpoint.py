"""Binary checkpoints of a streaming run.

Layout::

    magic (8 bytes) | version (uint32 LE) | header length (uint64 LE)
    | JSON header | float64 LE arrays in directory order | blake2b-64 checksum

The header carries the run configuration, scalars, shapes, the array
directory, the RNG state and the per-stream history.  Checkpoints are taken
between streams, so no live mini-batch statistics exist.
"""
import hashlib
import json
import struct

import numpy as np

from .config import RunConfig
from .dpmm import ClusterPosterior, DpmmModel, NWPrior, SuffStats
from .errors import CheckpointIntegrityError, CheckpointVersionError, StateError
from .mathcore import CholeskyFactor
from .stream import StatScope, StreamLedger
from .vae import AdamState, LatentCodec, MlpParams

MAGIC = b"STRMDPCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_CHECKSUM_BYTES = 8


def _checksum(payload):
    return hashlib.blake2b(payload, digest_size=_CHECKSUM_BYTES).digest()


def _collect_arrays(ledger):
    model = ledger.model
    arrays = [("prior.m0", model.prior.m0), ("prior.w0", model.prior.w0)]
    for k, c in enumerate(model.clusters):
        arrays += [(f"cluster.{k}.m", c.m), (f"cluster.{k}.winv_chol", c.winv_chol.lower),
                   (f"cluster.{k}.scalars", np.array([c.beta, c.nu, c.eta1, c.eta2]))]
    for name, stats in (("prior_stats", model.prior_stats), ("overall", ledger.scope.overall)):
        arrays += [(f"{name}.n", stats.n), (f"{name}.s1", stats.s1), (f"{name}.s2", stats.s2)]
    for i, a in enumerate(ledger.codec.arrays()):
        arrays.append((f"codec.{i}", a))
    for i, (m, v) in enumerate(zip(ledger.adam.m, ledger.adam.v)):
        arrays += [(f"adam.m.{i}", m), (f"adam.v.{i}", v)]
    return arrays


def checkpoint_bytes(ledger, config):
    """Serialize ``ledger`` (and the config echo) to bytes."""
    if ledger.scope.live_stream is not None:
        raise StateError("cannot checkpoint while a stream is live")
    arrays = _collect_arrays(ledger)
    model, codec, adam = ledger.model, ledger.codec, ledger.adam
    header = {
        "config": config.to_flat(),
        "model": {"alpha0": model.alpha0, "truncation_max": model.truncation_max,
                  "beta0": model.prior.beta0, "nu0": model.prior.nu0,
                  "num_clusters": model.num_clusters, "dim": model.dim},
        "codec": {"latent_dim": codec.latent_dim, "data_dim": codec.data_dim,
                  "encoder_layers": len(codec.encoder.weights),
                  "encoder_activation": codec.encoder.activation,
                  "decoder_activation": codec.decoder.activation},
        "adam": {"lr": adam.lr, "decay": adam.decay, "beta1": adam.beta1,
                 "beta2": adam.beta2, "eps": adam.eps, "step": adam.step,
                 "moments": len(adam.m)},
        "stream_index": ledger.stream_index,
        "rng": ledger.rng.bit_generator.state,
        "history": ledger.history,
        "arrays": [[name, list(np.shape(a))] for name, a in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    payload = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + body
    return payload + _checksum(payload)


def parse_checkpoint(blob):
    """Inverse of :func:`checkpoint_bytes`; returns ``(ledger, config)``."""
    if len(blob) < _PREFIX.size + _CHECKSUM_BYTES:
        raise CheckpointIntegrityError(f"checkpoint too short ({len(blob)} bytes)")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointIntegrityError("bad magic; not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    payload, digest = blob[:-_CHECKSUM_BYTES], blob[-_CHECKSUM_BYTES:]
    if _checksum(payload) != digest:
        raise CheckpointIntegrityError("checksum mismatch (truncated or corrupted file)")
    start = _PREFIX.size
    try:
        header = json.loads(payload[start:start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as err:
        raise CheckpointIntegrityError(f"unreadable header: {err}")
    offset = start + head_len
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise CheckpointIntegrityError(f"array {name} runs past the end of the file")
        arrays[name] = np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(payload):
        raise CheckpointIntegrityError("trailing bytes after the array section")
    return _rebuild(header, arrays)


def _rebuild(header, arrays):
    config = RunConfig.from_flat(header["config"])
    hm = header["model"]
    prior = NWPrior(arrays["prior.m0"], hm["beta0"], hm["nu0"], arrays["prior.w0"])
    clusters = []
    for k in range(hm["num_clusters"]):
        beta, nu, eta1, eta2 = (float(v) for v in arrays[f"cluster.{k}.scalars"])
        clusters.append(ClusterPosterior(arrays[f"cluster.{k}.m"], beta, nu,
                                         CholeskyFactor(arrays[f"cluster.{k}.winv_chol"]),
                                         eta1, eta2))

    def stats(name):
        return SuffStats(arrays[f"{name}.n"], arrays[f"{name}.s1"], arrays[f"{name}.s2"])

    model = DpmmModel(hm["alpha0"], prior, clusters, hm["truncation_max"], stats("prior_stats"))
    hc = header["codec"]
    codec_arrays = [arrays[name] for name, _ in header["arrays"] if name.startswith("codec.")]
    k = 2 * hc["encoder_layers"]
    codec = LatentCodec(MlpParams(codec_arrays[0:k:2], codec_arrays[1:k:2], hc["encoder_activation"]),
                        MlpParams(codec_arrays[k::2], codec_arrays[k + 1::2], hc["decoder_activation"]),
                        hc["latent_dim"], hc["data_dim"])
    ha = header["adam"]
    adam = AdamState(ha["lr"], ha["decay"], ha["beta1"], ha["beta2"], ha["eps"], ha["step"],
                     [arrays[f"adam.m.{i}"] for i in range(ha["moments"])],
                     [arrays[f"adam.v.{i}"] for i in range(ha["moments"])])
    scope = StatScope(model.num_clusters, model.dim)
    scope.overall = stats("overall")
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    ledger = StreamLedger(model, codec, adam, scope, header["stream_index"], rng, header["history"])
    return ledger, config


def save_checkpoint(path, ledger, config):
    blob = checkpoint_bytes(ledger, config)
    with open(path, "wb") as fh:
        fh.write(blob)
    return blob


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def checkpoint_roundtrip(path, ledger, config):
    """Save then load; returns the restored ``(ledger, config)``."""
    save_checkpoint(path, ledger, config)
    return load_checkpoint(path)
