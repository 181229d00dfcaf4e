"""External clustering metrics computed from a contingency table.

Entropies use natural logarithms.  Rows of the table are ground-truth
classes, columns are predicted clusters.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError


@dataclass
class ContingencyTable:
    a: np.ndarray
    classes: np.ndarray
    clusters: np.ndarray

    @classmethod
    def from_labels(cls, labels, clusters):
        labels = np.asarray(labels)
        clusters = np.asarray(clusters)
        if labels.shape != clusters.shape or labels.ndim != 1:
            raise ShapeError(f"label vectors differ: {labels.shape} vs {clusters.shape}")
        classes, li = np.unique(labels, return_inverse=True)
        cl, ci = np.unique(clusters, return_inverse=True)
        a = np.zeros((classes.size, cl.size), dtype=np.int64)
        np.add.at(a, (li, ci), 1)
        return cls(a, classes, cl)

    @property
    def n(self):
        return int(self.a.sum())

    @property
    def row_sums(self):
        return self.a.sum(axis=1)

    @property
    def col_sums(self):
        return self.a.sum(axis=0)


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def _conditional_entropy(a, n):
    """H(rows | cols)."""
    col = a.sum(axis=0)
    nz = a > 0
    cols = np.broadcast_to(col, a.shape)
    return float(-np.sum(a[nz] / n * np.log(a[nz] / cols[nz])))


def _mutual_information(a, n):
    return _entropy(a.sum(axis=0), n) - _conditional_entropy(a.T, n)


def nmi(labels, clusters):
    """``2 I(l, c) / (H(l) + H(c))``.

    If both partitions are constant the ratio is undefined; 1 is returned
    when they coincide and 0 otherwise.
    """
    t = ContingencyTable.from_labels(labels, clusters)
    n = t.n
    if n < 1:
        raise DomainError("nmi needs at least one element")
    hl = _entropy(t.row_sums, n)
    hc = _entropy(t.col_sums, n)
    if hl + hc == 0.0:
        return 1.0 if t.a.shape == (1, 1) else 0.0
    return float(np.clip(2.0 * _mutual_information(t.a, n) / (hl + hc), 0.0, 1.0))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(labels, clusters):
    """Adjusted Rand index (Hubert-Arabie)."""
    t = ContingencyTable.from_labels(labels, clusters)
    if t.n < 2:
        raise DomainError("ari needs at least two elements")
    index = float(np.sum(_comb2(t.a)))
    sum_a = float(np.sum(_comb2(t.row_sums)))
    sum_b = float(np.sum(_comb2(t.col_sums)))
    expected = sum_a * sum_b / float(_comb2(t.n))
    maximum = 0.5 * (sum_a + sum_b)
    if maximum == expected:
        # both partitions are all-singletons or all-one-block
        return 1.0
    return (index - expected) / (maximum - expected)


def homogeneity(labels, clusters):
    """``1 - H(C|K) / H(C)``; 1 when ``H(C) = 0``."""
    t = ContingencyTable.from_labels(labels, clusters)
    n = t.n
    hc = _entropy(t.row_sums, n)
    if hc == 0.0:
        return 1.0
    return float(np.clip(1.0 - _conditional_entropy(t.a, n) / hc, 0.0, 1.0))


def completeness(labels, clusters):
    return homogeneity(clusters, labels)


def v_measure(labels, clusters, beta=1.0):
    h = homogeneity(labels, clusters)
    c = completeness(labels, clusters)
    if beta * h + c == 0.0:
        return 0.0
    return (1.0 + beta) * h * c / (beta * h + c)


@dataclass
class NoveltyScore:
    precision: float
    recall: float
    detected: bool
    clusters: tuple


def majority_labels(labels, clusters):
    """Map each predicted cluster to its most frequent true label (ties: smallest label)."""
    t = ContingencyTable.from_labels(labels, clusters)
    return {c: t.classes[int(np.argmax(t.a[:, j]))] for j, c in enumerate(t.clusters.tolist())}


def novelty_precision_recall(labels, clusters, novel_labels):
    """Precision/recall of the clusters whose majority label is each novel label.

    Clusters sharing a majority label are pooled.  When no cluster has a
    novel majority the score is ``(0, 0)`` with ``detected=False``.
    """
    labels = np.asarray(labels)
    clusters = np.asarray(clusters)
    if labels.shape != clusters.shape:
        raise ShapeError("label vectors differ in length")
    mapping = majority_labels(labels, clusters)
    out = {}
    for lab in novel_labels:
        truth = labels == lab
        if not np.any(truth):
            raise DomainError(f"novel label {lab!r} does not occur in the ground truth")
        owned = tuple(c for c, m in mapping.items() if m == lab)
        if not owned:
            out[lab] = NoveltyScore(0.0, 0.0, False, ())
            continue
        pred = np.isin(clusters, owned)
        hit = float(np.sum(pred & truth))
        out[lab] = NoveltyScore(hit / float(np.sum(pred)), hit / float(np.sum(truth)), True, owned)
    return out


def clustering_report(labels, clusters):
    return {"nmi": nmi(labels, clusters), "ari": ari(labels, clusters),
            "homogeneity": homogeneity(labels, clusters),
            "v_measure": v_measure(labels, clusters)}
