"""Experiment protocols: batch recovery, disjoint class streams, contamination."""
import logging
import math

import numpy as np

from . import dpmm
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError
from .metrics import clustering_report, novelty_precision_recall
from .report import build_report
from .stream import StreamLedger, run_stream
from .vae import encode, make_codec

log = logging.getLogger(__name__)


def assign(codec, model, x, workers=1):
    """Hard cluster index per row: argmax responsibility of the encoder mean."""
    mu, _ = encode(codec, np.asarray(x, dtype=np.float64))
    return np.argmax(dpmm.local_update(mu, model, workers), axis=1)


def init_ledger(config, data_dim):
    if config.data_dim and config.data_dim != data_dim:
        raise ShapeError(f"config data_dim {config.data_dim} does not match data width {data_dim}")
    hidden = () if config.codec_init == "identity" else config.hidden
    try:
        codec = make_codec(data_dim, config.latent_dim, hidden, config.activation,
                           seed=config.seed, init=config.codec_init)
    except ValueError as err:
        raise ConfigError(str(err))
    model = dpmm.DpmmModel.initial(config.latent_dim, config.alpha0, config.truncation_max)
    return StreamLedger.create(model, codec, config.learning_rate, config.lr_decay,
                               seed=config.seed)


def _chunks(index, size):
    return [index[i:i + size] for i in range(0, index.size, size)]


def plan_streams(config, x, labels):
    """Row indices of each stream, the labels counted as novel there, and its pass count.

    Depends only on the config and the data, so a resumed run sees the same plan.
    """
    n = x.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x91a7]))
    protocol = config.protocol
    if protocol == "batch":
        return [{"rows": rng.permutation(n), "novel": [],
                 "minibatches": max(1, math.ceil(n / config.batch_size)),
                 "passes": config.batch_passes}]
    if labels is None:
        raise ConfigError(f"protocol {protocol!r} needs labelled data")
    classes = np.unique(labels)
    plan = []
    if protocol == "disjoint-streams":
        per = config.disjoint.classes_per_stream
        if per < 1:
            raise ConfigError("disjoint.classes_per_stream must be >= 1")
        for g in range(0, classes.size, per):
            group = classes[g:g + per]
            rows = rng.permutation(np.flatnonzero(np.isin(labels, group)))
            for c, chunk in enumerate(_chunks(rows, config.stream_size)):
                novel = group.tolist() if g > 0 and c == 0 else []
                plan.append({"rows": chunk, "novel": novel})
    else:
        cc = config.contamination
        novel_class = int(classes[-1]) if cc.novel_class < 0 else cc.novel_class
        if novel_class not in classes:
            raise ConfigError(f"novel class {novel_class} does not occur in the labels")
        if classes.size < 2:
            raise ConfigError("contamination needs at least two classes")
        old = rng.permutation(np.flatnonzero(labels != novel_class))
        new = rng.permutation(np.flatnonzero(labels == novel_class))
        n_new = int(round(cc.fraction * config.stream_size))
        n_old = config.stream_size - n_new
        need_old = cc.pretrain_streams * config.stream_size + cc.streams * n_old
        if need_old > old.size or cc.streams * n_new > new.size:
            raise ConfigError(
                f"contamination needs {need_old} known-class and {cc.streams * n_new} "
                f"novel rows; data has {old.size} and {new.size}")
        pre = cc.pretrain_streams * config.stream_size
        for chunk in _chunks(old[:pre], config.stream_size):
            plan.append({"rows": chunk, "novel": []})
        for s in range(cc.streams):
            rows = np.concatenate([old[pre + s * n_old: pre + (s + 1) * n_old],
                                   new[s * n_new:(s + 1) * n_new]])
            plan.append({"rows": rng.permutation(rows),
                         "novel": [novel_class] if n_new > 0 else []})
    for item in plan:
        item.setdefault("minibatches", config.minibatches)
        item.setdefault("passes", 1)
    return plan


def evaluate(ledger, x, labels, seen, novel, workers=1):
    """Metric block over the rows seen so far."""
    pred = assign(ledger.codec, ledger.model, x[seen], workers)
    out = {"clusters_used": int(np.unique(pred).size)}
    if labels is None:
        return out
    truth = labels[seen]
    out["metrics"] = clustering_report(truth, pred) if seen.size >= 2 else None
    if novel:
        scores = novelty_precision_recall(truth, pred, novel)
        out["novelty"] = {str(lab): {"precision": s.precision, "recall": s.recall,
                                     "detected": s.detected,
                                     "clusters": [int(c) for c in s.clusters]}
                          for lab, s in scores.items()}
    return out


def run_protocol(config, x, labels=None, checkpoint=None, resume=None, stop_after=None):
    """Run ``config.protocol`` over ``x``; returns ``(report, ledger)``.

    ``checkpoint`` is written after every stream.  ``resume`` restarts from a
    saved checkpoint (its config is used).  ``stop_after`` ends the run once
    that many streams are done; the report is then marked incomplete.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError("data must be a non-empty n x d matrix")
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (x.shape[0],):
            raise ShapeError("labels must have one entry per row")
    if resume is not None:
        ledger, config = load_checkpoint(resume)
        if ledger.codec.data_dim != x.shape[1]:
            raise ShapeError("checkpoint codec does not match the data width")
    else:
        config.validate()
        ledger = init_ledger(config, x.shape[1])
    plan = plan_streams(config, x, labels)
    for s in range(ledger.stream_index, len(plan)):
        if stop_after is not None and s >= stop_after:
            break
        item = plan[s]
        cfg = config.stream_config(item["minibatches"], item["passes"])
        run_stream(ledger, x[item["rows"]], cfg)
        seen = np.concatenate([p["rows"] for p in plan[:s + 1]])
        ledger.history[-1].update(evaluate(ledger, x, labels, seen, item["novel"],
                                           config.workers))
        ledger.history[-1]["novel_labels"] = [int(v) for v in item["novel"]]
        log.info("stream %d done: %d clusters", s, ledger.model.num_clusters)
        if checkpoint is not None:
            save_checkpoint(checkpoint, ledger, config)
    complete = ledger.stream_index >= len(plan)
    seen = np.concatenate([p["rows"] for p in plan[:ledger.stream_index]]
                          or [np.zeros(0, dtype=np.int64)])
    final_novel = []
    if labels is not None and config.protocol == "contamination":
        final_novel = sorted({v for p in plan for v in p["novel"]})
    elif labels is not None and config.protocol == "disjoint-streams":
        final_novel = sorted({v for p in plan[1:ledger.stream_index] for v in p["novel"]})
    final = evaluate(ledger, x, labels, seen, final_novel, config.workers) if seen.size else {}
    final["clusters"] = ledger.model.num_clusters
    final["cluster_mass"] = [float(v) for v in ledger.model.prior_stats.n]
    return build_report(config, ledger, final, complete, len(plan)), ledger
