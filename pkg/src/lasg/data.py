"""Datasets: parsing, synthetic generation and worker partitioning.

Samples are stored densely (``X`` is an ``n x dim`` float64 matrix) since the
simulator targets desk-scale problems; ``Sample`` gives the sparse per-row
view used by the text formats.
"""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from lasg.errors import ConfigError, ParseError

SYNTHETIC_KINDS = ("logistic_separable", "logistic_noisy", "quadratic")


@dataclass(frozen=True)
class Sample:
    features: dict
    label: float

    def __post_init__(self):
        keys = list(self.features)
        if any(b <= a for a, b in zip(keys, keys[1:])):
            raise ValueError("feature indices must be strictly increasing")
        if keys and keys[0] < 0:
            raise ValueError("feature indices must be nonnegative")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    classes: tuple = field(default=())

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2:
            raise ConfigError("feature matrix must be two-dimensional")
        if self.X.shape[0] != self.y.shape[0]:
            raise ConfigError("features and labels disagree on sample count")
        if not self.classes and self.y.dtype.kind in "iu":
            self.classes = tuple(int(c) for c in np.unique(self.y))

    @property
    def dim(self):
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(self.X[indices], self.y[indices], self.classes)

    @property
    def samples(self):
        out = []
        for row, label in zip(self.X, self.y):
            nz = np.flatnonzero(row)
            out.append(Sample({int(i): float(row[i]) for i in nz}, label.item()))
        return out

    @classmethod
    def from_samples(cls, samples, dim=None, classes=()):
        samples = list(samples)
        max_index = max((max(s.features, default=-1) for s in samples), default=-1)
        if dim is None:
            dim = max_index + 1
        elif max_index >= dim:
            raise ConfigError(f"feature index {max_index} exceeds declared dimension {dim}")
        X = np.zeros((len(samples), dim))
        for i, s in enumerate(samples):
            for j, v in s.features.items():
                X[i, j] = v
        labels = [s.label for s in samples]
        if all(float(l).is_integer() for l in labels):
            y = np.array(labels, dtype=np.int64)
        else:
            y = np.array(labels, dtype=np.float64)
        return cls(X, y, tuple(classes))


def _open_text(source):
    if isinstance(source, str):
        return open(source, "r", encoding="utf-8")
    return source


def _label_value(token, lineno):
    try:
        value = float(token)
    except ValueError:
        raise ParseError(f"bad label {token!r}", line=lineno) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite label {token!r}", line=lineno)
    return value


def parse_libsvm(source, dim=None):
    """Read LIBSVM text (``label idx:val ...`` with 1-based indices).

    Indices become 0-based. Two-class label sets are mapped to {-1, +1}
    (larger label is +1); other integer label sets become class ids 0..C-1.
    """
    stream = _open_text(source)
    rows, labels = [], []
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            labels.append(_label_value(tokens[0], lineno))
            feats = {}
            prev = 0
            for tok in tokens[1:]:
                idx_s, sep, val_s = tok.partition(":")
                if not sep:
                    raise ParseError(f"expected idx:val, got {tok!r}", line=lineno)
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ParseError(f"malformed feature {tok!r}", line=lineno) from None
                if idx < 1:
                    raise ParseError(f"feature index must be >= 1, got {idx}", line=lineno)
                if idx <= prev:
                    raise ParseError("feature indices must be strictly increasing", line=lineno)
                if not math.isfinite(val):
                    raise ParseError(f"non-finite feature value {tok!r}", line=lineno)
                prev = idx
                if val != 0.0:
                    feats[idx - 1] = val
            rows.append(feats)
    finally:
        if stream is not source:
            stream.close()
    if not rows:
        raise ParseError("no samples found")
    y, classes = _map_labels(labels)
    samples = [Sample(f, l) for f, l in zip(rows, y.tolist())]
    return Dataset.from_samples(samples, dim=dim, classes=classes)


def _map_labels(labels):
    # {-1,+1} kept; other two-value sets -> {-1,+1} (larger is +1);
    # integer sets not already 0..C-1 -> sorted class ids; reals pass through
    labels = np.asarray(labels, dtype=np.float64)
    uniq = np.unique(labels)
    if not np.all(uniq == np.round(uniq)):
        return labels, ()
    if set(uniq.tolist()) <= {-1.0, 1.0}:
        return labels.astype(np.int64), (-1, 1)
    if len(uniq) == 2:
        return np.where(labels == uniq[1], 1, -1).astype(np.int64), (-1, 1)
    if uniq[0] == 0 and uniq[-1] == len(uniq) - 1:
        return labels.astype(np.int64), tuple(range(len(uniq)))
    if len(uniq) == 1:
        return labels.astype(np.int64), (int(uniq[0]),)
    return np.searchsorted(uniq, labels).astype(np.int64), tuple(range(len(uniq)))


def serialize_libsvm(data):
    """Inverse of ``parse_libsvm`` for datasets with {-1,+1} or class-id labels."""
    lines = []
    for s in data.samples:
        label = s.label
        head = f"{label:+d}" if isinstance(label, int) and data.classes == (-1, 1) else repr(label)
        body = " ".join(f"{i + 1}:{v!r}" for i, v in s.features.items())
        lines.append(f"{head} {body}".rstrip())
    return "\n".join(lines) + "\n"


def parse_csv(source, label_column=0, header=False):
    """Read a dense numeric CSV table; zeros are dropped from the sparse view."""
    stream = _open_text(source)
    try:
        reader = csv.reader(stream)
        rows = []
        width = None
        for rowno, row in enumerate(reader, start=1):
            if header and rowno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
                if not -width <= label_column < width:
                    raise ParseError(f"label column {label_column} out of range", line=rowno)
            elif len(row) != width:
                raise ParseError(f"row has {len(row)} fields, expected {width}", line=rowno)
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise ParseError("non-numeric field", line=rowno) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError("non-finite field", line=rowno)
            rows.append(values)
    finally:
        if stream is not source:
            stream.close()
    if not rows:
        raise ParseError("empty CSV input")
    table = np.array(rows)
    col = label_column % table.shape[1]
    labels = table[:, col]
    X = np.delete(table, col, axis=1)
    y, classes = _map_labels(labels)
    return Dataset(X, y, classes)


def serialize_csv(data, label_column=0):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row, label in zip(data.X, data.y):
        values = [repr(float(v)) if v != 0 else "0" for v in row]
        values.insert(label_column, str(label.item()))
        writer.writerow(values)
    return buf.getvalue()


def gen_synthetic(kind, n, dim, seed, scale=1.0, flip=0.1):
    """Synthetic dataset drawn around a planted parameter vector.

    Features are ``scale`` times standard Gaussian. ``logistic_separable``
    labels are ``sign(x . theta*)``; ``logistic_noisy`` flips a ``flip``
    fraction of them at random; ``quadratic`` gives real targets
    ``x . theta* + 0.1 * noise``.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ConfigError(f"synthetic kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if n < 1 or dim < 1:
        raise ConfigError("synthetic data needs n >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    planted = rng.standard_normal(dim)
    planted /= np.linalg.norm(planted)
    X = scale * rng.standard_normal((n, dim))
    score = X @ planted
    if kind == "quadratic":
        y = score + 0.1 * rng.standard_normal(n)
        data = Dataset(X, y)
    else:
        y = np.where(score >= 0, 1, -1).astype(np.int64)
        if kind == "logistic_noisy":
            y = np.where(rng.random(n) < flip, -y, y)
        data = Dataset(X, y, (-1, 1))
    data.planted = planted
    return data


@dataclass(frozen=True)
class PartitionSpec:
    mode: str = "homogeneous"
    workers: int = 1
    seed: int = 0
    alpha: float = 0.5

    def __post_init__(self):
        if self.mode not in ("homogeneous", "heterogeneous"):
            raise ConfigError(f"partition mode must be homogeneous or heterogeneous, got {self.mode!r}")
        if self.workers < 1:
            raise ConfigError("partition needs at least one worker")
        if not self.alpha > 0:
            raise ConfigError("Dirichlet concentration alpha must be positive")


def partition_indices(data, spec, max_tries=100):
    """Disjoint, covering, nonempty index sets, one per worker."""
    n, M = len(data), spec.workers
    if M > n:
        raise ConfigError(f"cannot split {n} samples across {M} workers")
    rng = np.random.default_rng(spec.seed)
    if M == 1:
        return [np.arange(n)]
    if spec.mode == "homogeneous":
        perm = rng.permutation(n)
        return [np.sort(block) for block in np.array_split(perm, M)]

    labels = data.y
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    for _ in range(max_tries):
        shards = [[] for _ in range(M)]
        for members in by_class:
            props = rng.dirichlet(np.full(M, spec.alpha))
            cuts = (np.cumsum(props)[:-1] * len(members)).astype(np.intp)
            for m, part in enumerate(np.split(members, cuts)):
                shards[m].append(part)
        out = [np.sort(np.concatenate(parts)) for parts in shards]
        if all(len(s) for s in out):
            return out
    # small n relative to M: repair the last draw by moving one sample from
    # the largest shard into each empty one
    for m in range(M):
        if len(out[m]) == 0:
            big = max(range(M), key=lambda j: len(out[j]))
            out[m] = out[big][-1:]
            out[big] = out[big][:-1]
    return out


def partition(data, spec):
    return [data.subset(idx) for idx in partition_indices(data, spec)]
