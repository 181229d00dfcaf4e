"""Command-line entry point: ``streamdp {train,generate,assign,evaluate,synth}``."""
import argparse
import json
import logging
import sys

from . import data
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .dpmm import sample_generative
from .errors import (CheckpointIntegrityError, CheckpointVersionError, ConfigError,
                     DataFormatError, DomainError, NotPositiveDefinite, NumericError, ShapeError)
from .metrics import clustering_report, completeness, homogeneity
from .protocols import assign, run_protocol
from .report import dumps_report

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _overrides(args):
    flat = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        flat[key.strip()] = value.strip()
    for key, attr in (("protocol", "protocol"), ("seed", "seed"), ("workers", "workers"),
                      ("replay.samples_per_minibatch", "replay_samples"),
                      ("replay.enabled", "replay")):
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    return flat


def _emit(text, path):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(args):
    config = load_config(args.config) if args.config else RunConfig()
    config.update(_overrides(args))
    x, labels = data.load_dataset(args.data, has_labels=args.labels)
    report, _ = run_protocol(config, x, labels, checkpoint=args.checkpoint,
                             resume=args.resume, stop_after=args.stop_after)
    _emit(dumps_report(report), args.report)


def cmd_generate(args):
    ledger, _ = load_checkpoint(args.checkpoint)
    samples = sample_generative(ledger.model, ledger.codec, args.n, args.seed)
    if args.out:
        data.save_dataset(args.out, samples)
    else:
        for row in samples:
            sys.stdout.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_assign(args):
    ledger, config = load_checkpoint(args.checkpoint)
    x, _ = data.load_dataset(args.data, has_labels=args.labels)
    pred = assign(ledger.codec, ledger.model, x, args.workers or config.workers)
    _emit("".join(f"{int(c)}\n" for c in pred), args.out)


def cmd_evaluate(args):
    truth = data.load_labels(args.truth)
    pred = data.load_labels(args.pred)
    if truth.shape != pred.shape:
        raise DataFormatError(f"label files differ in length ({truth.size} vs {pred.size})")
    out = clustering_report(truth, pred)
    out["homogeneity"] = homogeneity(truth, pred)
    out["completeness"] = completeness(truth, pred)
    _emit(json.dumps(out, sort_keys=True, indent=2) + "\n", args.out)


def cmd_synth(args):
    x, labels = data.make_gmm(args.seed, args.k, args.d, args.n, args.separation)
    data.save_dataset(args.out, x, labels if not args.no_labels else None)


def build_parser():
    parser = argparse.ArgumentParser(prog="streamdp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="run an experiment protocol")
    p.add_argument("--data", required=True, help="CSV file, one sample per line")
    p.add_argument("--labels", action="store_true", help="last CSV column holds labels")
    p.add_argument("--config", help="YAML file of flat dotted keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--protocol", choices=["batch", "disjoint-streams", "contamination"])
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--replay", dest="replay", action="store_true", default=None)
    p.add_argument("--no-replay", dest="replay", action="store_false")
    p.add_argument("--replay-samples", type=int, metavar="N",
                   help="generated samples per mini-batch")
    p.add_argument("--checkpoint", help="write a checkpoint after each stream")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--stop-after", type=int, metavar="S", help="stop after S streams")
    p.add_argument("--report", help="report path (default: stdout)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample data rows from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("assign", help="cluster new rows with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", action="store_true", help="ignore a trailing label column")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("evaluate", help="metrics from ground-truth and predicted label files")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic Gaussian mixture CSV")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--d", type=int, default=2)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-labels", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, ShapeError, DomainError, OSError,
            CheckpointIntegrityError, CheckpointVersionError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NotPositiveDefinite, FloatingPointError) as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
