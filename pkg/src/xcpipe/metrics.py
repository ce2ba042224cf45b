"""Ranking metrics with propensity-scored variants.

Formulas follow the extreme-classification convention with natural
logarithms and rank positions r = 1..k; note the discounted-gain
variants here carry a 1/k factor inside the DCG sum, and the
propensity-scored nDCG normalizer sums over all k positions while the
vanilla one stops at min(k, number of true labels).  Both conventions
are preserved as-is (documented, not "fixed") and both the raw and the
ideal-normalized propensity-scored values are reported, since published
tables use the normalized form while the raw form is the literal
formula.

Points without any true label are excluded from every mean and counted
separately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InvalidParam, MissingPropensity


@dataclass
class PropensityModel:
    """Per-label observation propensity p_l in (0, 1].

    p_l = 1 / (1 + C * exp(-A * ln(n_l + B))) with
    C = (ln N - 1) * (B + 1)^A, where n_l is the label's training
    frequency and N the number of training points.
    """

    propensities: np.ndarray
    A: float
    B: float

    def inverse(self):
        return 1.0 / self.propensities


def propensities(d_train: Dataset, A: float = 0.55,
                 B: float = 1.5) -> PropensityModel:
    if A <= 0 or B <= 0:
        raise InvalidParam("propensity parameters A, B must be positive")
    freq = d_train.label_frequencies().astype(np.float64)
    c = (np.log(d_train.num_points) - 1.0) * (B + 1.0) ** A
    p = 1.0 / (1.0 + c * np.exp(-A * np.log(freq + B)))
    return PropensityModel(propensities=p, A=A, B=B)


def _truth_set(truth):
    if isinstance(truth, (set, frozenset)):
        return truth
    return set(int(x) for x in np.asarray(truth).ravel())


def precision_at_k(ranked_labels, truth, k: int) -> float:
    """(1/k) * number of relevant labels among the top k."""
    if k < 1:
        raise InvalidParam("k must be >= 1")
    ts = _truth_set(truth)
    hits = sum(1 for lab in np.asarray(ranked_labels)[:k] if int(lab) in ts)
    return hits / k


def recall_at_k(ranked_labels, truth, k: int) -> float:
    ts = _truth_set(truth)
    if not ts:
        return 0.0
    hits = sum(1 for lab in np.asarray(ranked_labels)[:k] if int(lab) in ts)
    return hits / len(ts)


def dcg_at_k(ranked_labels, truth, k: int) -> float:
    """(1/k) * sum over rank positions r of y_(r) / ln(r + 1)."""
    ts = _truth_set(truth)
    ranked = np.asarray(ranked_labels)[:k]
    total = 0.0
    for r, lab in enumerate(ranked, start=1):
        if int(lab) in ts:
            total += 1.0 / np.log(r + 1.0)
    return total / k


def ndcg_at_k(ranked_labels, truth, k: int) -> float:
    """DCG@k over the truncated ideal mass sum_{l=1}^{min(k, |truth|)}."""
    ts = _truth_set(truth)
    if not ts:
        return 0.0
    denom = sum(1.0 / np.log(l + 1.0) for l in range(1, min(k, len(ts)) + 1))
    return dcg_at_k(ranked_labels, ts, k) / denom


def psp_at_k(ranked_labels, truth, prop: PropensityModel, k: int,
             normalized: bool = False) -> float:
    """Propensity-scored precision: (1/k) * sum of y_l / p_l over the
    top k.  With `normalized`, divides by the same quantity for the
    best possible ranking (true labels ordered by 1 / p_l)."""
    ts = _truth_set(truth)
    p = prop.propensities
    ranked = np.asarray(ranked_labels)[:k]
    if ranked.size and int(ranked.max()) >= p.size:
        raise MissingPropensity(f"label {int(ranked.max())} beyond propensities")
    raw = sum(1.0 / p[int(lab)] for lab in ranked if int(lab) in ts) / k
    if not normalized:
        return raw
    ideal = _ideal_ranking(ts, p)
    best = sum(1.0 / p[lab] for lab in ideal[:k]) / k
    return raw / best if best > 0 else 0.0


def psdcg_at_k(ranked_labels, truth, prop: PropensityModel, k: int) -> float:
    ts = _truth_set(truth)
    p = prop.propensities
    total = 0.0
    for r, lab in enumerate(np.asarray(ranked_labels)[:k], start=1):
        if int(lab) in ts:
            total += 1.0 / (p[int(lab)] * np.log(r + 1.0))
    return total / k


def psndcg_at_k(ranked_labels, truth, prop: PropensityModel, k: int,
                normalized: bool = False) -> float:
    """PSDCG@k over sum_{l=1}^{k} 1 / ln(l + 1) (full-k normalizer)."""
    ts = _truth_set(truth)
    if not ts:
        return 0.0
    denom = sum(1.0 / np.log(l + 1.0) for l in range(1, k + 1))
    raw = psdcg_at_k(ranked_labels, ts, prop, k) / denom
    if not normalized:
        return raw
    ideal = _ideal_ranking(ts, prop.propensities)
    best = psdcg_at_k(ideal, ts, prop, k) / denom
    return raw / best if best > 0 else 0.0


def _ideal_ranking(truth_set, p):
    """True labels ordered by descending inverse propensity, ties to
    lower id."""
    labs = np.asarray(sorted(truth_set), dtype=np.int64)
    order = np.lexsort((labs, p[labs]))
    return labs[order]


def quantile_breakdown(preds, truth_d: Dataset, d_train: Dataset,
                       bins: int = 5, k: int = 5):
    """Split labels into frequency quantiles (bin 0 = rarest) and
    attribute each correct top-k prediction's 1/(k*n) mass to the bin
    of the predicted label.  Bin contributions sum to P@k."""
    if bins < 1:
        raise InvalidParam("bins must be >= 1")
    freq = d_train.label_frequencies()
    order = np.lexsort((np.arange(freq.size), freq))
    bin_of = np.zeros(freq.size, dtype=np.int64)
    for b, chunk in enumerate(np.array_split(order, bins)):
        bin_of[chunk] = b

    contributions = np.zeros(bins)
    mean_freq = np.array([
        freq[order_chunk].mean() if order_chunk.size else 0.0
        for order_chunk in np.array_split(order, bins)])
    scored = 0
    for pred, i in zip(preds, range(truth_d.num_points)):
        ts = set(int(x) for x in truth_d.positive_labels(i))
        if not ts:
            continue
        scored += 1
        for lab in pred.labels[:k]:
            if int(lab) in ts:
                contributions[bin_of[int(lab)]] += 1.0
    if scored:
        contributions /= scored * k
    return {
        "bins": bins,
        "k": k,
        "contributions": contributions.tolist(),
        "bin_mean_frequency": mean_freq.tolist(),
        "points_scored": scored,
    }


def evaluate(preds, truth_d: Dataset, d_train: Dataset,
             propensity_a: float = 0.55, propensity_b: float = 1.5,
             ks=(1, 3, 5), quantile_bins: int = 5):
    """Full metric report over a prediction list.

    `preds` are objects with .labels ranked descending (Prediction).
    Returns a flat dict: P@k, N@k, PSP@k / PSN@k (normalized),
    PSP_raw@k / PSN_raw@k (literal formulas), R@k, the frequency
    quantile breakdown at k=5, and scored/skipped point counts.
    """
    if len(preds) != truth_d.num_points:
        raise InvalidParam(
            f"{len(preds)} predictions for {truth_d.num_points} points")
    prop = propensities(d_train, propensity_a, propensity_b)

    sums = {f"{name}@{k}": 0.0
            for k in ks
            for name in ("P", "N", "PSP", "PSN", "PSP_raw", "PSN_raw", "R")}
    scored = 0
    skipped = 0
    for i, pred in enumerate(preds):
        ts = set(int(x) for x in truth_d.positive_labels(i))
        if not ts:
            skipped += 1
            continue
        scored += 1
        for k in ks:
            sums[f"P@{k}"] += precision_at_k(pred.labels, ts, k)
            sums[f"N@{k}"] += ndcg_at_k(pred.labels, ts, k)
            sums[f"PSP@{k}"] += psp_at_k(pred.labels, ts, prop, k,
                                         normalized=True)
            sums[f"PSN@{k}"] += psndcg_at_k(pred.labels, ts, prop, k,
                                            normalized=True)
            sums[f"PSP_raw@{k}"] += psp_at_k(pred.labels, ts, prop, k)
            sums[f"PSN_raw@{k}"] += psndcg_at_k(pred.labels, ts, prop, k)
            sums[f"R@{k}"] += recall_at_k(pred.labels, ts, k)

    report = {key: (val / scored if scored else 0.0)
              for key, val in sums.items()}
    report["points_scored"] = scored
    report["points_skipped"] = skipped
    report["quantile_p5"] = quantile_breakdown(
        preds, truth_d, d_train, bins=quantile_bins, k=5)
    return report
