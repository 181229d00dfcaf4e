"""Run reports: a JSON document with one section per stream and a final block."""
import json
import math

import jsonschema

REPORT_FORMAT = "streamdp-report/1"

_METRICS = {
    "type": ["object", "null"],
    "required": ["nmi", "ari", "homogeneity", "v_measure"],
    "properties": {k: {"type": "number"} for k in ("nmi", "ari", "homogeneity", "v_measure")},
}

_NOVELTY = {
    "type": "object",
    "additionalProperties": {
        "type": "object",
        "required": ["precision", "recall", "detected", "clusters"],
        "properties": {"precision": {"type": "number", "minimum": 0, "maximum": 1},
                       "recall": {"type": "number", "minimum": 0, "maximum": 1},
                       "detected": {"type": "boolean"},
                       "clusters": {"type": "array", "items": {"type": "integer"}}},
    },
}

_EVENT = {
    "type": "object",
    "required": ["pass", "batch", "sweep", "elbo", "clusters", "births", "merges"],
    "properties": {"pass": {"type": "integer"}, "batch": {"type": "integer"},
                   "sweep": {"type": "integer"}, "elbo": {"type": "number"},
                   "clusters": {"type": "integer", "minimum": 1},
                   "births": {"type": "integer", "minimum": 0},
                   "merges": {"type": "integer", "minimum": 0}},
}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "protocol", "complete", "planned_streams", "config", "streams", "final"],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "protocol": {"enum": ["batch", "disjoint-streams", "contamination"]},
        "complete": {"type": "boolean"},
        "planned_streams": {"type": "integer", "minimum": 1},
        "config": {"type": "object"},
        "streams": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["stream", "rows", "replayed", "clusters", "events"],
                "properties": {"stream": {"type": "integer", "minimum": 0},
                               "rows": {"type": "integer", "minimum": 0},
                               "replayed": {"type": "integer", "minimum": 0},
                               "clusters": {"type": "integer", "minimum": 1},
                               "elbo": {"type": "number"},
                               "events": {"type": "array", "items": _EVENT},
                               "metrics": _METRICS,
                               "novelty": _NOVELTY},
            },
        },
        "final": {
            "type": "object",
            "required": ["clusters", "cluster_mass"],
            "properties": {"clusters": {"type": "integer", "minimum": 1},
                           "cluster_mass": {"type": "array", "items": {"type": "number"}},
                           "metrics": _METRICS,
                           "novelty": _NOVELTY},
        },
    },
}


def _finite_elbos(report):
    for section in report["streams"]:
        values = [e["elbo"] for e in section["events"]]
        if "elbo" in section:
            values.append(section["elbo"])
        bad = [v for v in values if not math.isfinite(v)]
        if bad:
            raise jsonschema.ValidationError(f"stream {section['stream']} has non-finite ELBO values")


def validate_report(report):
    """Raise ``jsonschema.ValidationError`` unless ``report`` matches the schema."""
    jsonschema.validate(report, REPORT_SCHEMA)
    _finite_elbos(report)
    return report


def build_report(config, ledger, final, complete, planned):
    report = {
        "format": REPORT_FORMAT,
        "protocol": config.protocol,
        "complete": bool(complete),
        "planned_streams": int(planned),
        "config": config.to_flat(),
        "streams": [dict(rec) for rec in ledger.history],
        "final": final,
    }
    return validate_report(report)


def dumps_report(report):
    """Canonical text form: sorted keys, two-space indent, trailing newline."""
    return json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_report(report))
