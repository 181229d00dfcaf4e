"""CSV ingestion and synthetic Gaussian-mixture data."""
import math

import numpy as np

from .errors import DataFormatError


def load_dataset(path, has_labels=False):
    """Read comma-separated rows; with ``has_labels`` the last column is an integer label.

    Blank lines are skipped.  Returns ``(x, labels)`` with ``labels`` None
    when ``has_labels`` is false.
    """
    rows = []
    labels = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DataFormatError(f"expected {width} fields, found {len(fields)}", line=lineno)
            if has_labels:
                if width < 2:
                    raise DataFormatError("labelled rows need at least one feature", line=lineno)
                try:
                    lab = int(fields[-1])
                except ValueError:
                    raise DataFormatError(f"label {fields[-1]!r} is not an integer", line=lineno)
                if lab < 0:
                    raise DataFormatError(f"label {lab} is negative", line=lineno)
                labels.append(lab)
                fields = fields[:-1]
            try:
                rows.append([float(f) for f in fields])
            except ValueError as err:
                raise DataFormatError(str(err), line=lineno)
    if not rows:
        raise DataFormatError(f"{path} contains no data rows")
    x = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
        raise DataFormatError("non-finite value", line=bad + 1)
    return x, (np.array(labels, dtype=np.int64) if has_labels else None)


def save_dataset(path, x, labels=None):
    with open(path, "w", encoding="utf-8") as fh:
        for i, row in enumerate(np.asarray(x, dtype=np.float64)):
            fields = [repr(float(v)) for v in row]
            if labels is not None:
                fields.append(str(int(labels[i])))
            fh.write(",".join(fields) + "\n")


def save_labels(path, labels):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def load_labels(path):
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line.split(",")[-1]))
            except ValueError:
                raise DataFormatError(f"{line!r} is not an integer label", line=lineno)
    if not out:
        raise DataFormatError(f"{path} contains no labels")
    return np.array(out, dtype=np.int64)


def gmm_centers(k, d, separation):
    """Centers at pairwise distance >= ``separation``, centered on the origin.

    Up to ``d`` centers sit on scaled coordinate axes (a simplex face);
    more are laid out on a regular grid with spacing ``separation``.
    """
    if k <= d:
        centers = np.eye(d)[:k] * (separation / math.sqrt(2.0)) if k > 1 else np.zeros((1, d))
    else:
        side = int(math.ceil(k ** (1.0 / d) - 1e-9))
        while side ** d < k:
            side += 1
        grid = np.stack(np.meshgrid(*[np.arange(side)] * d, indexing="ij"), axis=-1)
        centers = grid.reshape(-1, d)[:k].astype(np.float64) * separation
    return centers - centers.mean(axis=0)


def make_gmm(seed, k, d, n, separation):
    """``n`` points from ``k`` unit-variance Gaussians with balanced, shuffled labels."""
    if k < 1 or d < 1 or n < 1:
        raise ValueError("k, d and n must be >= 1")
    rng = np.random.default_rng(seed)
    centers = gmm_centers(k, d, separation)
    labels = rng.permutation(np.arange(n) % k)
    x = centers[labels] + rng.standard_normal((n, d))
    return x, labels.astype(np.int64)
