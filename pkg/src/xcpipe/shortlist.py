"""Hard-negative shortlists from nearest-neighbor structure.

Two indices are built over the frozen embedded corpus: one over the
documents' embedding-bag vectors and one over per-label representatives
(the normalized mean embedded positive, plus extra spherical k-means
centers for the most frequent labels).  A point's shortlist unions the
negative labels of its nearest neighbor documents with its nearest
label representatives, each scored by the best contributing cosine, and
is padded with a bounded number of uniform random negatives.

Training shortlists exclude the point's own positives (and the point
itself from the document route); prediction-time shortlists reuse the
same routes without exclusions and without random padding.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import Dataset
from .errors import InvalidParam
from .hnsw import HnswIndex, build_hnsw
from .nn import embed_bag, relu

SOURCE_DOC = 0
SOURCE_CENTROID = 1
SOURCE_RANDOM = 2


@dataclass
class RouteCaps:
    doc_route: int = 300
    centroid_route: int = 300
    random: int = 50

    @property
    def total(self):
        return self.doc_route + self.centroid_route + self.random


@dataclass
class Shortlist:
    """Per-point candidate labels with similarity scores and source tags."""

    num_points: int
    num_labels: int
    labels: list = field(default_factory=list)    # per point: int64 array
    scores: list = field(default_factory=list)    # per point: float64 array
    sources: list = field(default_factory=list)   # per point: int8 array

    def append(self, labels, scores, sources):
        self.labels.append(np.asarray(labels, dtype=np.int64))
        self.scores.append(np.asarray(scores, dtype=np.float64))
        self.sources.append(np.asarray(sources, dtype=np.int8))

    def size_of(self, i):
        return int(self.labels[i].size)

    def max_size(self):
        return max((arr.size for arr in self.labels), default=0)

    def random_count(self, i):
        return int(np.count_nonzero(self.sources[i] == SOURCE_RANDOM))

    def to_wire(self) -> str:
        """Sparse wire format: header "N L", one "l:s" row per point."""
        out = io.StringIO()
        out.write(f"{self.num_points} {self.num_labels}\n")
        for i in range(self.num_points):
            out.write(" ".join(
                f"{lab}:{score:.9g}"
                for lab, score in zip(self.labels[i], self.scores[i])))
            out.write("\n")
        return out.getvalue()

    @classmethod
    def from_wire(cls, text: str) -> "Shortlist":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        n, l = (int(x) for x in lines[0].split())
        sl = cls(num_points=n, num_labels=l)
        for i in range(n):
            labs: list[int] = []
            scores: list[float] = []
            line = lines[i + 1].strip()
            if line:
                for pair in line.split():
                    lab_s, _, sc_s = pair.partition(":")
                    labs.append(int(lab_s))
                    scores.append(float(sc_s))
            sl.append(labs, scores, np.zeros(len(labs), dtype=np.int8))
        return sl


def embed_corpus(d: Dataset, embeddings: np.ndarray):
    """Embed every point; returns (raw, unit, empty_mask).

    `raw` are the post-relu bag vectors used for training; `unit` are
    their l2-normalized copies used for indexing and querying.  Points
    embedding to the zero vector are flagged and excluded from indices.
    """
    raw = relu(d.features @ embeddings)
    norms = np.linalg.norm(raw, axis=1)
    empty = norms == 0
    unit = raw / np.where(empty, 1.0, norms)[:, None]
    return raw, unit, empty


@dataclass
class LabelRepresentatives:
    """One or more unit vectors per label with >= 1 embeddable positive."""

    vectors: np.ndarray          # (R, D) unit rows
    rep_label: np.ndarray        # (R,) label id per row
    head_labels: np.ndarray      # label ids given multiple centers
    skipped_labels: np.ndarray   # labels with no nonzero embedded positive


def _spherical_kmeans(points: np.ndarray, k: int, rng, iters: int = 25):
    """k centers on the unit sphere maximizing within-cluster cosine."""
    n = points.shape[0]
    k = min(k, n)
    first = int(rng.integers(n))
    centers = [points[first]]
    for _ in range(1, k):
        sims = np.max(np.stack([points @ c for c in centers]), axis=0)
        d2 = np.maximum(2.0 - 2.0 * sims, 0.0)
        total = d2.sum()
        if total <= 0:
            centers.append(points[int(rng.integers(n))])
            continue
        centers.append(points[int(rng.choice(n, p=d2 / total))])
    centers = np.stack(centers)
    assign = None
    for _ in range(iters):
        sims = points @ centers.T
        new_assign = np.argmax(sims, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = points[assign == j]
            if members.shape[0] == 0:
                continue
            s = members.sum(axis=0)
            norm = np.linalg.norm(s)
            if norm > 0:
                centers[j] = s / norm
    return centers


def label_representatives(d: Dataset, raw_vectors: np.ndarray,
                          head_count: int, centers_per_head: int,
                          seed: int) -> LabelRepresentatives:
    """Normalized mean embedded positives per label; the `head_count`
    most frequent labels additionally get `centers_per_head` spherical
    k-means centers over their positives."""
    if head_count < 0 or centers_per_head < 1:
        raise InvalidParam("head_count >= 0 and centers_per_head >= 1 required")
    freq = d.label_frequencies()
    ycsc = d.labels.tocsc()
    rng = np.random.default_rng(seed)

    head_order = np.lexsort((np.arange(d.num_labels), -freq))
    heads = set(int(x) for x in head_order[:head_count] if freq[head_order[0]] > 0
                and freq[x] > 0) if head_count else set()

    vecs: list[np.ndarray] = []
    owners: list[int] = []
    skipped: list[int] = []
    for lab in range(d.num_labels):
        docs = ycsc.indices[ycsc.indptr[lab]:ycsc.indptr[lab + 1]]
        if docs.size == 0:
            skipped.append(lab)
            continue
        mean = raw_vectors[docs].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            skipped.append(lab)
            continue
        vecs.append(mean / norm)
        owners.append(lab)
        if lab in heads and centers_per_head > 1:
            pts = raw_vectors[docs]
            norms = np.linalg.norm(pts, axis=1)
            pts = pts[norms > 0] / norms[norms > 0][:, None]
            if pts.shape[0] >= 2:
                for c in _spherical_kmeans(pts, centers_per_head, rng):
                    vecs.append(c)
                    owners.append(lab)
    return LabelRepresentatives(
        vectors=np.stack(vecs) if vecs else np.zeros((0, raw_vectors.shape[1])),
        rep_label=np.asarray(owners, dtype=np.int64),
        head_labels=np.asarray(sorted(heads), dtype=np.int64),
        skipped_labels=np.asarray(skipped, dtype=np.int64))


def build_indices(unit_vectors: np.ndarray, empty_mask: np.ndarray,
                  reps: LabelRepresentatives, doc_params: tuple,
                  label_params: tuple, seed: int):
    """(doc index, indexed doc ids, rep index) with per-index HNSW params."""
    doc_ids = np.flatnonzero(~empty_mask)
    m_doc, efc_doc = doc_params
    m_lab, efc_lab = label_params
    idx_docs = build_hnsw(unit_vectors[doc_ids], M=m_doc,
                          ef_construction=efc_doc, seed=seed)
    idx_reps = (build_hnsw(reps.vectors, M=m_lab, ef_construction=efc_lab,
                           seed=seed + 1)
                if reps.vectors.shape[0] else None)
    return idx_docs, doc_ids, idx_reps


def _doc_route(i, q, idx_docs: HnswIndex, doc_ids, labels_csr, pos_set,
               cap, ef_search, exclude_self):
    """Labels of nearest neighbor documents, scored by best neighbor cosine."""
    if cap <= 0 or len(idx_docs) == 0:
        return {}
    k = min(cap + (1 if exclude_self else 0), len(idx_docs))
    ids, cosines = idx_docs.query(q, k, ef_search)
    best: dict[int, float] = {}
    for local, cos in zip(ids, cosines):
        doc = int(doc_ids[local])
        if exclude_self and doc == i:
            continue
        s, e = labels_csr.indptr[doc], labels_csr.indptr[doc + 1]
        for lab in labels_csr.indices[s:e]:
            lab = int(lab)
            if lab in pos_set:
                continue
            if lab not in best or cos > best[lab]:
                best[lab] = float(cos)
    return _truncate(best, cap)


def _centroid_route(q, idx_reps, reps: LabelRepresentatives, pos_set, cap,
                    ef_search):
    if cap <= 0 or idx_reps is None or len(idx_reps) == 0:
        return {}
    k = min(cap, len(idx_reps))
    ids, cosines = idx_reps.query(q, k, ef_search)
    best: dict[int, float] = {}
    for local, cos in zip(ids, cosines):
        lab = int(reps.rep_label[local])
        if lab in pos_set:
            continue
        if lab not in best or cos > best[lab]:
            best[lab] = float(cos)
    return _truncate(best, cap)


def _truncate(best: dict, cap: int) -> dict:
    if len(best) <= cap:
        return best
    items = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
    return dict(items)


def _random_negatives(rng, num_labels, excluded: set, count: int):
    if count <= 0:
        return []
    free = num_labels - len(excluded)
    want = min(count, free)
    if want <= 0:
        return []
    out: list[int] = []
    taken = set()
    attempts = 0
    max_attempts = 40 + 20 * want
    while len(out) < want and attempts < max_attempts:
        lab = int(rng.integers(num_labels))
        attempts += 1
        if lab in excluded or lab in taken:
            continue
        taken.add(lab)
        out.append(lab)
    if len(out) < want:
        pool = np.setdiff1d(np.arange(num_labels),
                            np.asarray(sorted(excluded | taken)))
        extra = rng.choice(pool.size, size=want - len(out), replace=False)
        out.extend(int(pool[j]) for j in extra)
    return out


def build_shortlists(d: Dataset, unit_vectors, empty_mask,
                     reps: LabelRepresentatives, idx_docs: HnswIndex,
                     doc_ids, idx_reps, caps: RouteCaps, seed: int,
                     ef_search: int = 200, training: bool = True,
                     labels_csr=None) -> Shortlist:
    """Union the document and centroid routes per point, keeping the
    best score when a label arrives by both, then pad with random
    negatives (training mode only) and cut to the total cap with random
    entries last in line."""
    if labels_csr is None:
        labels_csr = d.labels
    sl = Shortlist(num_points=d.num_points, num_labels=d.num_labels)
    rng = np.random.default_rng(seed)
    for i in range(d.num_points):
        if empty_mask[i]:
            sl.append([], [], [])
            continue
        q = unit_vectors[i]
        pos_set = set(int(x) for x in d.positive_labels(i)) if training else set()
        doc_best = _doc_route(i, q, idx_docs, doc_ids, labels_csr, pos_set,
                              caps.doc_route, ef_search, exclude_self=training)
        cen_best = _centroid_route(q, idx_reps, reps, pos_set,
                                   caps.centroid_route, ef_search)
        merged: dict[int, tuple[float, int]] = {
            lab: (score, SOURCE_DOC) for lab, score in doc_best.items()}
        for lab, score in cen_best.items():
            if lab not in merged or score > merged[lab][0]:
                merged[lab] = (score, SOURCE_CENTROID)

        entries = sorted(((lab, sc, src) for lab, (sc, src) in merged.items()),
                         key=lambda t: (-t[1], t[0]))
        if training and caps.random > 0:
            excluded = pos_set | set(merged)
            for lab in _random_negatives(rng, d.num_labels, excluded,
                                         caps.random):
                entries.append((lab, 0.0, SOURCE_RANDOM))
        entries = entries[:caps.total]
        sl.append([e[0] for e in entries], [e[1] for e in entries],
                  [e[2] for e in entries])
    return sl


def build_random_shortlists(d: Dataset, cap: int, seed: int,
                            weighting: str = "uniform") -> Shortlist:
    """Ablation samplers: negatives drawn uniformly or by label
    frequency (unigram), ignoring feature geometry."""
    if weighting not in ("uniform", "unigram"):
        raise InvalidParam(f"unknown weighting {weighting!r}")
    rng = np.random.default_rng(seed)
    freq = d.label_frequencies().astype(np.float64)
    probs = None
    if weighting == "unigram":
        if freq.sum() == 0:
            raise InvalidParam("unigram sampling needs nonempty labels")
        probs = freq / freq.sum()
    sl = Shortlist(num_points=d.num_points, num_labels=d.num_labels)
    all_labels = np.arange(d.num_labels)
    for i in range(d.num_points):
        pos = set(int(x) for x in d.positive_labels(i))
        want = min(cap, d.num_labels - len(pos))
        chosen: list[int] = []
        taken = set()
        attempts = 0
        while len(chosen) < want and attempts < 40 + 30 * want:
            lab = int(rng.choice(d.num_labels, p=probs)) if probs is not None \
                else int(rng.integers(d.num_labels))
            attempts += 1
            if lab in pos or lab in taken:
                continue
            taken.add(lab)
            chosen.append(lab)
        if len(chosen) < want:
            pool = np.setdiff1d(all_labels, np.asarray(sorted(pos | taken)))
            idx = rng.choice(pool.size, size=want - len(chosen), replace=False)
            chosen.extend(int(pool[j]) for j in idx)
        sl.append(chosen, np.zeros(len(chosen)),
                  np.full(len(chosen), SOURCE_RANDOM, dtype=np.int8))
    return sl


def shortlist_recall(sl: Shortlist, truth: Dataset):
    """Mean fraction of each point's true labels present in its
    shortlist (points without true labels are skipped)."""
    recalls = []
    for i in range(truth.num_points):
        pos = truth.positive_labels(i)
        if pos.size == 0:
            continue
        inter = np.intersect1d(pos, sl.labels[i], assume_unique=False)
        recalls.append(inter.size / pos.size)
    return {
        "mean_recall": float(np.mean(recalls)) if recalls else 0.0,
        "points_scored": len(recalls),
        "points_skipped": truth.num_points - len(recalls),
    }


def shortlist_overlap(a: Shortlist, b: Shortlist):
    """Mean per-point Jaccard overlap between two shortlists."""
    if a.num_points != b.num_points:
        raise InvalidParam("shortlists cover different point counts")
    vals = []
    for i in range(a.num_points):
        sa = set(a.labels[i].tolist())
        sb = set(b.labels[i].tolist())
        if not sa and not sb:
            vals.append(1.0)
            continue
        union = len(sa | sb)
        vals.append(len(sa & sb) / union if union else 1.0)
    return float(np.mean(vals)) if vals else 1.0


def embed_and_index(d: Dataset, embeddings, head_count, centers_per_head,
                    doc_params, label_params, seed):
    """Convenience wrapper: embed corpus, build representatives and
    both indices.  Returns a dict of the artifacts."""
    raw, unit, empty = embed_corpus(d, embeddings)
    reps = label_representatives(d, raw, head_count, centers_per_head, seed)
    idx_docs, doc_ids, idx_reps = build_indices(
        unit, empty, reps, doc_params, label_params, seed)
    return {
        "raw": raw, "unit": unit, "empty": empty, "reps": reps,
        "idx_docs": idx_docs, "doc_ids": doc_ids, "idx_reps": idx_reps,
    }


def embed_query(x, embeddings):
    """(raw v, unit v, empty flag) for a single sparse point."""
    v = embed_bag(x, embeddings)
    norm = np.linalg.norm(v)
    if norm == 0:
        return v, v, True
    return v, v / norm, False
