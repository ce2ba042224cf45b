"""Log-time inference: shortlist, score, fuse, rank.

Per test point: embed, shortlist candidate labels through the document
and centroid routes (no exclusions, no random padding), score the
candidates with the classifiers on the refined features, and blend with
the route similarities:

    base_l  = alpha * sigmoid(w_l . xhat) + (1 - alpha) * sigmoid(s_l)
    final_l = beta * base_l + (1 - beta) * sigmoid(w~_l . x~)

for shortlisted l (zero elsewhere); the second blend applies only when
a re-ranker is attached and trained on l.  Ties rank lower label ids
first.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, SparseVector
from .errors import ConfigError, LabelSpaceMismatch
from .nn import relu, sigmoid
from .shortlist import (
    LabelRepresentatives,
    RouteCaps,
    _centroid_route,
    _doc_route,
)


@dataclass
class PredictConfig:
    alpha: float = 0.5
    beta: float = 0.7
    top_k: int = 5
    ef_search: int = 200

    def validate(self):
        if not (0.0 <= self.alpha <= 1.0) or not (0.0 <= self.beta <= 1.0):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")


@dataclass
class Prediction:
    labels: np.ndarray       # descending score, ties to lower id
    scores: np.ndarray
    empty: bool = False      # point embedded to the zero vector

    def to_dict(self):
        return dict(zip(self.labels.tolist(), self.scores.tolist()))


@dataclass
class RerankerScorer:
    embeddings: np.ndarray
    residual_matrix: np.ndarray
    classifiers: np.ndarray
    trained_labels: np.ndarray


@dataclass
class PredictorState:
    """Frozen artifacts needed at inference time."""

    embeddings: np.ndarray
    residual_matrix: np.ndarray
    classifiers: np.ndarray
    idx_docs: object
    doc_ids: np.ndarray
    doc_labels: object                 # training label CSR for the doc route
    reps: LabelRepresentatives
    idx_reps: object
    caps: RouteCaps
    reranker: RerankerScorer | None = None
    num_labels: int = 0

    def __post_init__(self):
        if self.num_labels == 0:
            self.num_labels = self.classifiers.shape[0]


def _shortlist_point(v_unit, state: PredictorState, ef_search):
    doc_best = _doc_route(-1, v_unit, state.idx_docs, state.doc_ids,
                          state.doc_labels, set(),
                          state.caps.doc_route, ef_search, exclude_self=False)
    cen_best = _centroid_route(v_unit, state.idx_reps, state.reps, set(),
                               state.caps.centroid_route, ef_search)
    merged = dict(doc_best)
    for lab, score in cen_best.items():
        if lab not in merged or score > merged[lab]:
            merged[lab] = score
    if len(merged) > state.caps.total:
        items = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))
        merged = dict(items[:state.caps.total])
    return merged


def predict(x: SparseVector, state: PredictorState,
            cfg: PredictConfig) -> Prediction:
    """Score one point; empty documents yield an empty flagged result."""
    cfg.validate()
    v = relu(x.values @ state.embeddings[x.indices]) if x.nnz \
        else np.zeros(state.embeddings.shape[1])
    norm = np.linalg.norm(v)
    if norm == 0:
        return Prediction(labels=np.empty(0, dtype=np.int64),
                          scores=np.empty(0), empty=True)
    shortlist = _shortlist_point(v / norm, state, cfg.ef_search)
    if not shortlist:
        return Prediction(labels=np.empty(0, dtype=np.int64),
                          scores=np.empty(0), empty=False)

    labs = np.fromiter(shortlist.keys(), dtype=np.int64, count=len(shortlist))
    sims = np.fromiter(shortlist.values(), dtype=np.float64,
                       count=len(shortlist))
    xhat = v + relu(state.residual_matrix @ v)
    clf = sigmoid(state.classifiers[labs] @ xhat)
    base = cfg.alpha * clf + (1.0 - cfg.alpha) * sigmoid(sims)

    if state.reranker is not None:
        rr = state.reranker
        v2 = relu(x.values @ rr.embeddings[x.indices])
        x2 = v2 + relu(rr.residual_matrix @ v2)
        rr_scores = sigmoid(rr.classifiers[labs] @ x2)
        rr_scores = np.where(rr.trained_labels[labs], rr_scores, 0.0)
        final = cfg.beta * base + (1.0 - cfg.beta) * rr_scores
    else:
        final = base

    order = np.lexsort((labs, -final))[:cfg.top_k]
    return Prediction(labels=labs[order], scores=final[order])


def predict_batch(d: Dataset, state: PredictorState, cfg: PredictConfig):
    """Predict every point of a dataset; returns (predictions, report).

    The report carries mean and p99 per-point wall time and confirms no
    shortlist exceeded the configured cap.
    """
    preds: list[Prediction] = []
    times = np.zeros(d.num_points)
    max_shortlist = 0
    for i in range(d.num_points):
        t0 = time.perf_counter()
        p = predict(d.feature_row(i), state, cfg)
        times[i] = time.perf_counter() - t0
        preds.append(p)
        max_shortlist = max(max_shortlist, p.labels.size)
    report = {
        "points": d.num_points,
        "mean_ms": float(times.mean() * 1000.0) if d.num_points else 0.0,
        "p99_ms": float(np.percentile(times, 99) * 1000.0)
            if d.num_points else 0.0,
        "max_emitted": int(max_shortlist),
        "cap": int(state.caps.total),
        "cap_respected": bool(max_shortlist <= state.caps.total),
    }
    return preds, report


def ensemble_average(members: list[list[Prediction]], top_k: int,
                     weights=None) -> list[Prediction]:
    """Mean of member scores per label (absent labels contribute 0)."""
    if not members:
        raise ConfigError("need at least one ensemble member")
    n_points = len(members[0])
    if any(len(m) != n_points for m in members):
        raise LabelSpaceMismatch("members predict different point counts")
    if weights is None:
        weights = np.full(len(members), 1.0 / len(members))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()

    out: list[Prediction] = []
    for i in range(n_points):
        acc: dict[int, float] = {}
        for w, member in zip(weights, members):
            for lab, score in zip(member[i].labels, member[i].scores):
                acc[int(lab)] = acc.get(int(lab), 0.0) + float(w * score)
        if not acc:
            out.append(Prediction(labels=np.empty(0, dtype=np.int64),
                                  scores=np.empty(0),
                                  empty=members[0][i].empty))
            continue
        labs = np.fromiter(acc.keys(), dtype=np.int64, count=len(acc))
        scores = np.fromiter(acc.values(), dtype=np.float64, count=len(acc))
        order = np.lexsort((labs, -scores))[:top_k]
        out.append(Prediction(labels=labs[order], scores=scores[order]))
    return out


def predictions_to_wire(preds: list[Prediction], num_labels: int) -> str:
    """Same sparse wire format as shortlists: "N L" then "l:s" rows."""
    out = io.StringIO()
    out.write(f"{len(preds)} {num_labels}\n")
    for p in preds:
        out.write(" ".join(f"{lab}:{score:.9g}"
                           for lab, score in zip(p.labels, p.scores)))
        out.write("\n")
    return out.getvalue()


def predictions_from_wire(text: str) -> tuple[list[Prediction], int]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    n, num_labels = (int(x) for x in lines[0].split())
    preds = []
    for i in range(n):
        line = lines[i + 1].strip()
        labs: list[int] = []
        scores: list[float] = []
        if line:
            for pair in line.split():
                lab_s, _, sc_s = pair.partition(":")
                labs.append(int(lab_s))
                scores.append(float(sc_s))
        arr_l = np.asarray(labs, dtype=np.int64)
        arr_s = np.asarray(scores)
        order = np.lexsort((arr_l, -arr_s))
        preds.append(Prediction(labels=arr_l[order], scores=arr_s[order]))
    return preds, num_labels
