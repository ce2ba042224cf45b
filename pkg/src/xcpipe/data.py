"""Dataset ingestion, statistics and deterministic synthesis.

Datasets use the extreme-classification repository text format:

    N V L
    l1,l2,...,lk f1:v1 f2:v2 ...

One line per point after the header.  The label list may be empty, in
which case the line starts with a single space before the first
feature pair.  Feature ids and label ids are 0-based and validated
against the header.  Internally points are held as CSR matrices
(features N x V, labels N x L with unit data).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import (
    DuplicateFeature,
    IndexOutOfRange,
    InvalidParam,
    MalformedHeader,
    NonFiniteValue,
)


@dataclass
class SparseVector:
    """Sorted sparse vector: strictly increasing ids with float values."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise InvalidParam("indices and values must be 1-d and equal length")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise InvalidParam("indices must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise InvalidParam("values must be finite")

    @property
    def nnz(self):
        return int(self.indices.size)


@dataclass
class DatasetStats:
    num_points: int
    num_features: int
    num_labels: int
    avg_labels_per_point: float
    avg_points_per_label: float
    avg_features_per_point: float

    def to_dict(self):
        return {
            "num_points": self.num_points,
            "num_features": self.num_features,
            "num_labels": self.num_labels,
            "avg_labels_per_point": self.avg_labels_per_point,
            "avg_points_per_label": self.avg_points_per_label,
            "avg_features_per_point": self.avg_features_per_point,
        }


class Dataset:
    """Multi-label dataset: sparse features plus positive-label sets.

    Immutable after construction; safe to share read-only.  `features`
    is an N x V CSR matrix, `labels` an N x L CSR matrix whose stored
    entries (all 1.0) mark the positive labels of each point.
    """

    def __init__(self, features: sp.csr_matrix, labels: sp.csr_matrix):
        if features.shape[0] != labels.shape[0]:
            raise InvalidParam("features and labels disagree on point count")
        self.features = features.tocsr()
        self.labels = labels.tocsr()
        self.features.sort_indices()
        self.labels.sort_indices()
        self.num_points = features.shape[0]
        self.num_features = features.shape[1]
        self.num_labels = labels.shape[1]

    def feature_row(self, i: int) -> SparseVector:
        row = self.features.getrow(i)
        return SparseVector(row.indices.astype(np.int64), row.data)

    def positive_labels(self, i: int) -> np.ndarray:
        """Sorted positive label ids of point i."""
        s, e = self.labels.indptr[i], self.labels.indptr[i + 1]
        return self.labels.indices[s:e].astype(np.int64)

    def label_frequencies(self) -> np.ndarray:
        """Number of positive points per label, shape (L,)."""
        return np.asarray(self.labels.sum(axis=0)).ravel().astype(np.int64)

    def subset(self, idx: np.ndarray) -> "Dataset":
        """New dataset restricted to the given point indices (shared label space)."""
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx])


def _parse_header(line: str):
    parts = line.split()
    if len(parts) != 3:
        raise MalformedHeader(f"expected 'N V L', got {line!r}")
    try:
        n, v, l = (int(p) for p in parts)
    except ValueError as exc:
        raise MalformedHeader(f"non-integer header field in {line!r}") from exc
    if n <= 0 or v <= 0 or l <= 0:
        raise MalformedHeader(f"header counts must be positive, got {line!r}")
    return n, v, l


def parse_xc_file(source) -> tuple[Dataset, int]:
    """Parse the repository text format.

    Args:
        source: bytes, str, or a text/binary file object.

    Returns:
        (dataset, dedup_warnings) where dedup_warnings counts label ids
        that appeared more than once on a line and were dropped.

    Raises:
        MalformedHeader, IndexOutOfRange, NonFiniteValue, DuplicateFeature.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedHeader("empty input")

    n, v, l = _parse_header(lines[0])
    if len(lines) - 1 != n:
        raise MalformedHeader(
            f"header announces {n} points but file has {len(lines) - 1} data lines")

    f_indptr = np.zeros(n + 1, dtype=np.int64)
    f_indices: list[int] = []
    f_data: list[float] = []
    y_indptr = np.zeros(n + 1, dtype=np.int64)
    y_indices: list[int] = []
    dedup_warnings = 0

    for i in range(n):
        line = lines[i + 1].rstrip("\r")
        lineno = i + 2
        if " " in line:
            head, rest = line.split(" ", 1)
        else:
            head, rest = line, ""

        if head:
            seen: set[int] = set()
            labels_here = []
            for tok in head.split(","):
                try:
                    lab = int(tok)
                except ValueError as exc:
                    raise MalformedHeader(
                        f"line {lineno}: bad label token {tok!r}") from exc
                if lab < 0 or lab >= l:
                    raise IndexOutOfRange(lineno, lab, kind="label")
                if lab in seen:
                    dedup_warnings += 1
                    continue
                seen.add(lab)
                labels_here.append(lab)
            labels_here.sort()
            y_indices.extend(labels_here)
        y_indptr[i + 1] = len(y_indices)

        feats_here: list[tuple[int, float]] = []
        fseen: set[int] = set()
        for pair in rest.split():
            fid_s, _, val_s = pair.partition(":")
            if not val_s:
                raise MalformedHeader(f"line {lineno}: bad feature pair {pair!r}")
            try:
                fid = int(fid_s)
                val = float(val_s)
            except ValueError as exc:
                raise MalformedHeader(
                    f"line {lineno}: bad feature pair {pair!r}") from exc
            if fid < 0 or fid >= v:
                raise IndexOutOfRange(lineno, fid, kind="feature")
            if not math.isfinite(val) or val <= 0.0:
                raise NonFiniteValue(lineno, f"{fid}:{val_s}")
            if fid in fseen:
                raise DuplicateFeature(lineno, fid)
            fseen.add(fid)
            feats_here.append((fid, val))
        feats_here.sort()
        for fid, val in feats_here:
            f_indices.append(fid)
            f_data.append(val)
        f_indptr[i + 1] = len(f_indices)

    features = sp.csr_matrix(
        (np.asarray(f_data, dtype=np.float64),
         np.asarray(f_indices, dtype=np.int64), f_indptr),
        shape=(n, v))
    labels = sp.csr_matrix(
        (np.ones(len(y_indices), dtype=np.float64),
         np.asarray(y_indices, dtype=np.int64), y_indptr),
        shape=(n, l))
    return Dataset(features, labels), dedup_warnings


def serialize_xc(d: Dataset) -> str:
    """Inverse of parse_xc_file up to float formatting and label dedup."""
    out = io.StringIO()
    out.write(f"{d.num_points} {d.num_features} {d.num_labels}\n")
    for i in range(d.num_points):
        labs = d.positive_labels(i)
        s, e = d.features.indptr[i], d.features.indptr[i + 1]
        pairs = " ".join(
            f"{fid}:{val:.12g}"
            for fid, val in zip(d.features.indices[s:e], d.features.data[s:e]))
        out.write(",".join(str(x) for x in labs))
        out.write(" ")
        out.write(pairs)
        out.write("\n")
    return out.getvalue()


def compute_stats(d: Dataset) -> DatasetStats:
    """Header counts plus the three per-point/per-label averages.

    Labels with zero positives stay in the per-label denominator.
    """
    total_pos = int(d.labels.nnz)
    return DatasetStats(
        num_points=d.num_points,
        num_features=d.num_features,
        num_labels=d.num_labels,
        avg_labels_per_point=total_pos / d.num_points,
        avg_points_per_label=total_pos / d.num_labels,
        avg_features_per_point=d.features.nnz / d.num_points,
    )


def recompute_tfidf(d: Dataset) -> Dataset:
    """Replace shipped feature weights by log-tf x smoothed-idf, l2-normalized.

    idf = ln((N + 1) / (df + 1)) + 1.  Opt-in: repository files already
    carry TF-IDF weights and are normally used as-is.
    """
    tf = d.features.copy()
    tf.data = 1.0 + np.log(tf.data)
    df = np.asarray((d.features > 0).sum(axis=0)).ravel()
    idf = np.log((d.num_points + 1.0) / (df + 1.0)) + 1.0
    weighted = tf.multiply(sp.csr_matrix(idf)).tocsr()
    norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    inv = sp.diags(1.0 / norms)
    return Dataset((inv @ weighted).tocsr(), d.labels)


def synth_dataset(num_clusters: int, docs_per_cluster: int,
                  labels_per_cluster: int, vocab_per_cluster: int,
                  noise: float, seed: int) -> Dataset:
    """Deterministic planted-cluster corpus for tests and benchmarks.

    The vocabulary and label space are split into `num_clusters`
    contiguous blocks.  Each cluster's vocabulary block is further
    divided evenly among its labels, so a document's tokens are drawn
    from the sub-blocks of its own labels (making the label assignment
    learnable), with a `noise` fraction of token occurrences drawn from
    other clusters' blocks.  Documents carry 3-10 token occurrences
    (values are occurrence counts) and 1-3 labels from the home block.

    Same arguments give a byte-identical dataset.
    """
    if min(num_clusters, docs_per_cluster, labels_per_cluster,
           vocab_per_cluster) < 1:
        raise InvalidParam("all synth counts must be >= 1")
    if not (0.0 <= noise < 1.0):
        raise InvalidParam("noise must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    n = num_clusters * docs_per_cluster
    v = num_clusters * vocab_per_cluster
    l = num_clusters * labels_per_cluster

    # token sub-block of label j within its cluster block
    bounds = np.linspace(0, vocab_per_cluster, labels_per_cluster + 1).astype(int)

    f_rows: list[dict[int, float]] = []
    y_rows: list[np.ndarray] = []
    for c in range(num_clusters):
        vocab_lo = c * vocab_per_cluster
        label_lo = c * labels_per_cluster
        for _ in range(docs_per_cluster):
            k_labels = int(rng.integers(1, 4))
            k_labels = min(k_labels, labels_per_cluster)
            local = rng.choice(labels_per_cluster, size=k_labels, replace=False)
            labs = np.sort(label_lo + local)
            y_rows.append(labs)

            # token pool = union of this document's label sub-blocks
            pool = np.concatenate([
                np.arange(vocab_lo + bounds[j], vocab_lo + bounds[j + 1])
                for j in local]) if bounds[-1] > 0 else np.array([], dtype=int)
            if pool.size == 0:
                pool = np.arange(vocab_lo, vocab_lo + vocab_per_cluster)

            n_tok = int(rng.integers(3, 11))
            counts: dict[int, float] = {}
            for _ in range(n_tok):
                if noise > 0.0 and rng.random() < noise and num_clusters > 1:
                    other = int(rng.integers(num_clusters - 1))
                    if other >= c:
                        other += 1
                    tok = other * vocab_per_cluster + int(
                        rng.integers(vocab_per_cluster))
                else:
                    tok = int(pool[rng.integers(pool.size)])
                counts[tok] = counts.get(tok, 0.0) + 1.0
            f_rows.append(counts)

    f_indptr = np.zeros(n + 1, dtype=np.int64)
    f_indices: list[int] = []
    f_data: list[float] = []
    y_indptr = np.zeros(n + 1, dtype=np.int64)
    y_indices: list[int] = []
    for i in range(n):
        for tok in sorted(f_rows[i]):
            f_indices.append(tok)
            f_data.append(f_rows[i][tok])
        f_indptr[i + 1] = len(f_indices)
        y_indices.extend(y_rows[i])
        y_indptr[i + 1] = len(y_indices)

    features = sp.csr_matrix(
        (np.asarray(f_data), np.asarray(f_indices, dtype=np.int64), f_indptr),
        shape=(n, v))
    labels = sp.csr_matrix(
        (np.ones(len(y_indices)), np.asarray(y_indices, dtype=np.int64),
         y_indptr),
        shape=(n, l))
    return Dataset(features, labels)


def synth_label_blocks(num_clusters: int, labels_per_cluster: int) -> np.ndarray:
    """Planted cluster id of each label, for purity checks."""
    return np.repeat(np.arange(num_clusters), labels_per_cluster)


def train_test_split(d: Dataset, test_fraction: float, seed: int):
    """Seeded shuffle split; returns (train, test) datasets."""
    if not (0.0 < test_fraction < 1.0):
        raise InvalidParam("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d.num_points)
    n_test = max(1, int(round(d.num_points * test_fraction)))
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return d.subset(train_idx), d.subset(test_idx)
