"""Label-space reduction: centroids, co-occurrence walks, balanced trees.

Labels are represented by the l2-normalized mean of their positive
points' feature vectors and recursively bisected with a balanced
2-means++ procedure until the requested number of leaf clusters is
reached.  Each leaf becomes one meta-label of the surrogate task.  An
optional label-correlation matrix, estimated by random walks over the
label/document bipartite graph, smooths the representations before
clustering.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import DegenerateInput, InvalidParam, UncoveredLabel

CORRELATION_ROW_CAP = 100     # kept entries per correlation row
MAX_SPLIT_ITERS = 50


def compute_centroids(d: Dataset):
    """Unit-normalized mean feature vector per label.

    Returns (centroids, zero_rows): an L x V CSR matrix whose row l is
    normalize(mean of features of the points positive for l), and the
    ids of labels with no positives (their rows are zero).
    """
    counts = d.label_frequencies().astype(np.float64)
    sums = (d.labels.T @ d.features).tocsr()
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
    mu = sp.diags(inv) @ sums
    norms = np.sqrt(np.asarray(mu.multiply(mu).sum(axis=1)).ravel())
    safe = np.where(norms > 0, norms, 1.0)
    mu = (sp.diags(1.0 / safe) @ mu).tocsr()
    zero_rows = np.flatnonzero(counts == 0)
    return mu, zero_rows


def estimate_correlation(d: Dataset, walks_per_label: int, walk_len: int,
                         seed: int) -> sp.csr_matrix:
    """Row-stochastic label correlation from random walks.

    A walk starts at a source label and alternates label -> uniform
    positive document -> uniform positive label of that document; every
    label reached after a hop is counted.  Row l holds the visit
    frequencies from source l, truncated to the most-visited
    CORRELATION_ROW_CAP entries and l1-renormalized.
    """
    if walks_per_label < 1 or walk_len < 1:
        raise InvalidParam("walks_per_label and walk_len must be >= 1")
    rng = np.random.default_rng(seed)
    ycsc = d.labels.tocsc()
    ycsr = d.labels

    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for lab in range(d.num_labels):
        docs_of_lab = ycsc.indices[ycsc.indptr[lab]:ycsc.indptr[lab + 1]]
        if docs_of_lab.size == 0:
            continue
        counts: dict[int, int] = {}
        total = 0
        for _ in range(walks_per_label):
            cur = lab
            for _ in range(walk_len):
                docs = ycsc.indices[ycsc.indptr[cur]:ycsc.indptr[cur + 1]]
                doc = docs[rng.integers(docs.size)]
                labs = ycsr.indices[ycsr.indptr[doc]:ycsr.indptr[doc + 1]]
                cur = int(labs[rng.integers(labs.size)])
                counts[cur] = counts.get(cur, 0) + 1
                total += 1
        kept = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = kept[:CORRELATION_ROW_CAP]
        mass = float(sum(c for _, c in kept))
        for p, c in kept:
            rows.append(lab)
            cols.append(p)
            vals.append(c / mass)
    return sp.csr_matrix((vals, (rows, cols)),
                         shape=(d.num_labels, d.num_labels))


def smooth_with_correlation(reps, corr: sp.csr_matrix, label_ids: np.ndarray):
    """rep'_l = normalize(rep_l + sum_p C_lp rep_p) over the given labels."""
    sub = corr[label_ids][:, label_ids]
    mixed = reps + sub @ reps
    return _normalize_rows(mixed)


def _normalize_rows(mat):
    if sp.issparse(mat):
        mat = mat.tocsr()
        norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
        safe = np.where(norms > 0, norms, 1.0)
        return sp.diags(1.0 / safe) @ mat
    norms = np.linalg.norm(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return mat / safe[:, None]


def _row(mat, i):
    if sp.issparse(mat):
        return np.asarray(mat.getrow(i).todense()).ravel()
    return mat[i]


def _similarities(reps, mean):
    out = reps @ mean
    if sp.issparse(reps):
        out = np.asarray(out).ravel()
    return out


def _mean_of(reps, idx):
    if sp.issparse(reps):
        s = np.asarray(reps[idx].sum(axis=0)).ravel()
    else:
        s = reps[idx].sum(axis=0)
    n = np.linalg.norm(s)
    return s / n if n > 0 else None


def _split_once(label_ids, reps, row_norms, seed):
    n = label_ids.size
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    mu_p = _row(reps, first)
    np_norm = np.linalg.norm(mu_p)
    if np_norm == 0:     # fall back to any nonzero row
        first = int(np.flatnonzero(row_norms > 0)[0])
        mu_p = _row(reps, first)
        np_norm = np.linalg.norm(mu_p)
    mu_p = mu_p / np_norm

    # ++ seeding: second mean drawn proportional to squared distance
    sims = _similarities(reps, mu_p)
    d2 = np.maximum(row_norms ** 2 + 1.0 - 2.0 * sims, 0.0)
    if d2.sum() <= 0:
        second = (first + 1) % n
    else:
        second = int(rng.choice(n, p=d2 / d2.sum()))
    mu_m = _row(reps, second)
    nm = np.linalg.norm(mu_m)
    mu_m = mu_m / nm if nm > 0 else -mu_p

    half = (n + 1) // 2
    prev_left = None
    for _ in range(MAX_SPLIT_ITERS):
        diff = _similarities(reps, mu_p) - _similarities(reps, mu_m)
        order = np.lexsort((label_ids, -diff))
        left_pos = np.sort(order[:half])
        if prev_left is not None and np.array_equal(left_pos, prev_left):
            break
        prev_left = left_pos
        right_pos = np.sort(order[half:])
        new_p = _mean_of(reps, left_pos)
        new_m = _mean_of(reps, right_pos)
        if new_p is not None:
            mu_p = new_p
        if new_m is not None:
            mu_m = new_m
    left_pos = prev_left
    right_pos = np.setdiff1d(np.arange(n), left_pos)
    obj = float(_similarities(reps[left_pos], mu_p).sum()
                + _similarities(reps[right_pos], mu_m).sum())
    return left_pos, right_pos, mu_p, mu_m, obj


def balanced_2means_split(label_ids, reps, corr=None, seed=0, n_init=8):
    """Split labels into two near-equal halves by constrained 2-means++.

    `reps` holds one unit row per entry of `label_ids` (dense or CSR).
    Assignment ranks labels by similarity(mu+) - similarity(mu-) and
    gives the top half (ties broken by lower label id) to the left
    side, so |left| - |right| is 0 or 1.  Mean updates renormalize the
    sum of assigned rows; alternation stops when the assignment is
    stable or after MAX_SPLIT_ITERS rounds.  The best of `n_init`
    seeded restarts (by the total-similarity objective) is kept, which
    sidesteps the poor local optima a single ++ seeding can land in.

    Returns (left_ids, right_ids, mu_left, mu_right).
    """
    label_ids = np.asarray(label_ids, dtype=np.int64)
    n = label_ids.size
    if n < 2:
        raise InvalidParam("need at least 2 labels to split")
    if corr is not None:
        reps = smooth_with_correlation(reps, corr, label_ids)

    row_norms = (np.sqrt(np.asarray(reps.multiply(reps).sum(axis=1)).ravel())
                 if sp.issparse(reps) else np.linalg.norm(reps, axis=1))
    if np.all(row_norms == 0):
        raise DegenerateInput("all label representations are zero")

    best = None
    for trial in range(max(1, n_init)):
        trial_seed = np.random.SeedSequence((seed, trial)).generate_state(1)[0]
        result = _split_once(label_ids, reps, row_norms, int(trial_seed))
        if best is None or result[4] > best[4] + 1e-12:
            best = result
    left_pos, right_pos, mu_p, mu_m, _ = best
    return (label_ids[left_pos], label_ids[right_pos], mu_p, mu_m)


def split_objective(label_ids, reps, left, mu_p, mu_m):
    """Sum of rep-to-assigned-mean similarities (higher is better)."""
    left = set(int(x) for x in left)
    total = 0.0
    for pos, lab in enumerate(label_ids):
        mean = mu_p if int(lab) in left else mu_m
        total += float(_similarities(reps[pos] if not sp.issparse(reps)
                                     else reps.getrow(pos), mean))
    return total


@dataclass
class ClusterTree:
    """Balanced recursive bisection of the label set."""

    leaves: list[np.ndarray]
    depth: int
    seed: int
    num_clusters: int
    split_means: list = field(default_factory=list, repr=False)

    def label_to_cluster(self, num_labels: int) -> np.ndarray:
        out = np.zeros(num_labels, dtype=np.int64)
        for k, leaf in enumerate(self.leaves):
            out[leaf] = k
        return out

    def to_json(self) -> str:
        return json.dumps({
            "leaves": [leaf.tolist() for leaf in self.leaves],
            "depth": self.depth,
            "seed": self.seed,
            "L_hat": self.num_clusters,
        })

    @classmethod
    def from_json(cls, text: str) -> "ClusterTree":
        obj = json.loads(text)
        return cls(
            leaves=[np.asarray(leaf, dtype=np.int64) for leaf in obj["leaves"]],
            depth=int(obj["depth"]),
            seed=int(obj["seed"]),
            num_clusters=int(obj["L_hat"]),
        )


def build_cluster_tree(centroids, num_clusters: int, seed: int,
                       corr=None, empty_labels=None) -> ClusterTree:
    """Recursively bisect the non-empty labels into `num_clusters` leaves.

    Correlation smoothing, when requested, is applied once to the full
    representation matrix before any split.  Labels listed in
    `empty_labels` (no training positives) are attached to leaf 0.
    Sibling subset sizes differ by at most one at every split, and the
    per-node leaf budget is divided as evenly as the subset allows.
    """
    num_total = centroids.shape[0]
    empty = (np.asarray(empty_labels, dtype=np.int64)
             if empty_labels is not None else np.empty(0, dtype=np.int64))
    active = np.setdiff1d(np.arange(num_total, dtype=np.int64), empty)
    if num_clusters < 1 or num_clusters > active.size:
        raise InvalidParam(
            f"need 1 <= num_clusters <= {active.size}, got {num_clusters}")

    reps = _normalize_rows(centroids[active] if sp.issparse(centroids)
                           else centroids[active])
    if corr is not None:
        reps = smooth_with_correlation(reps, corr, active)

    pos_of = {int(lab): i for i, lab in enumerate(active)}
    leaves: list[np.ndarray] = []
    split_means: list = []
    max_depth = 0

    # iterative DFS keeps the node numbering (and so the seeding)
    # deterministic regardless of recursion limits
    stack = [(active, num_clusters, 0, 0)]
    next_node = 1
    while stack:
        labs, budget, depth, _node = stack.pop()
        max_depth = max(max_depth, depth)
        if budget == 1:
            leaves.append(np.sort(labs))
            continue
        idx = np.asarray([pos_of[int(x)] for x in labs])
        node_seed = np.random.SeedSequence((seed, next_node)).generate_state(1)[0]
        left, right, mu_p, mu_m = balanced_2means_split(
            labs, reps[idx], corr=None, seed=int(node_seed))
        split_means.append((mu_p, mu_m))
        b_left = (budget + 1) // 2
        # right pushed first so the left branch is explored (and
        # numbered) first
        stack.append((right, budget - b_left, depth + 1, next_node + 1))
        stack.append((left, b_left, depth + 1, next_node))
        next_node += 2

    leaves.sort(key=lambda leaf: int(leaf[0]))
    if empty.size:
        leaves[0] = np.sort(np.concatenate([leaves[0], empty]))
    return ClusterTree(leaves=leaves, depth=max_depth, seed=seed,
                       num_clusters=num_clusters, split_means=split_means)


@dataclass
class MetaLabelMap:
    """Per-point meta-label positives induced by a cluster tree."""

    label_to_cluster: np.ndarray
    meta_positives: sp.csr_matrix      # N x L_hat, unit data
    num_clusters: int


def make_meta_labels(d: Dataset, tree: ClusterTree) -> MetaLabelMap:
    """Mark meta-label k positive for a point iff one of its labels
    lies in leaf k."""
    covered = np.concatenate(tree.leaves) if tree.leaves else np.empty(0)
    present = np.unique(d.labels.indices)
    missing = np.setdiff1d(present, covered)
    if missing.size:
        raise UncoveredLabel(f"labels not covered by tree: {missing[:10]}")
    mapping = tree.label_to_cluster(d.num_labels)

    indptr = np.zeros(d.num_points + 1, dtype=np.int64)
    indices: list[int] = []
    for i in range(d.num_points):
        s, e = d.labels.indptr[i], d.labels.indptr[i + 1]
        clusters = np.unique(mapping[d.labels.indices[s:e]])
        indices.extend(clusters)
        indptr[i + 1] = len(indices)
    meta = sp.csr_matrix(
        (np.ones(len(indices)), np.asarray(indices, dtype=np.int64), indptr),
        shape=(d.num_points, tree.num_clusters))
    return MetaLabelMap(mapping, meta, tree.num_clusters)


def select_frequent_labels(d: Dataset, count: int):
    """The `count` most frequent labels (ties to lower id) plus the
    fraction of vocabulary tokens covered by their positive points."""
    if count > d.num_labels:
        raise InvalidParam("cannot select more labels than exist")
    freq = d.label_frequencies()
    order = np.lexsort((np.arange(d.num_labels), -freq))
    chosen = np.sort(order[:count])

    mask = np.zeros(d.num_labels, dtype=bool)
    mask[chosen] = True
    covered_points = np.flatnonzero(
        np.asarray(d.labels[:, chosen].sum(axis=1)).ravel() > 0)
    toks = np.unique(d.features[covered_points].indices) if covered_points.size \
        else np.empty(0)
    coverage = toks.size / d.num_features
    return chosen, coverage
