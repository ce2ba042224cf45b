"""Empirical verification of the feature-drift guarantees.

With the residual's spectral norm held at or below `lam`, the refined
features provably stay close to the bag features:

    (a) ||xhat - v|| <= lam * ||v||                       per point
    (b) cos(v, mu0) / (1 + eps) <= cos(xhat, mu)
                                 <= cos(v, mu0) + eps     per point/label

where mu0 / mu are a label's mean bag / refined features and
eps = (1 + lam * sqrt(n_pos))^2 - 1.  The derivation also yields
intermediate inequalities (bounds on ||xhat||, ||mu - mu0|| and ||mu||)
that are checked independently for sharper diagnostics.  Everything
here relies on the bag features being nonnegative (they are post-relu),
which is asserted, and any violation beyond a 1e-9 slack is raised as
an implementation bug, because these are theorems.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .errors import BoundViolated, InvalidParam
from .extreme import ExtremeConfig, train_extreme
from .nn import relu
from .shortlist import (
    RouteCaps,
    build_indices,
    build_shortlists,
    embed_corpus,
    label_representatives,
    shortlist_overlap,
)

SLACK = 1e-9


def cosine_slack(lam: float, n_pos: int) -> float:
    """(1 + lam * sqrt(n_pos))^2 - 1, the two-sided cosine tolerance."""
    return (1.0 + lam * np.sqrt(n_pos)) ** 2 - 1.0


def spectral_norm_oracle(matrix: np.ndarray) -> float:
    """Exact largest singular value by dense SVD (the reference the
    power-iteration path is tested against)."""
    return float(np.linalg.svd(matrix, compute_uv=False)[0])


def make_equality_residual(v: np.ndarray, lam: float) -> np.ndarray:
    """Rank-1 matrix with spectral norm exactly lam whose correction
    survives the relu and attains ||xhat - v|| = lam * ||v||."""
    norm = np.linalg.norm(v)
    if norm == 0:
        raise InvalidParam("witness direction must be nonzero")
    direction = np.full(v.shape, 1.0 / np.sqrt(v.size))
    return lam * np.outer(direction, v / norm)


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; zero rows give 0 (callers exclude them)."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    dots = np.sum(a * b, axis=-1)
    return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)


def check_feature_bound(block_matrix: np.ndarray, lam: float,
                        points: np.ndarray, slack: float = SLACK):
    """Margin lam*||v|| - ||xhat - v|| per point; raises on negatives."""
    sigma = spectral_norm_oracle(block_matrix)
    if sigma > lam * (1.0 + 1e-3):
        raise BoundViolated("spectral_budget", sigma - lam,
                            f"sigma={sigma} lam={lam}")
    v = np.atleast_2d(points)
    xhat = v + relu(v @ block_matrix.T)
    drift = np.linalg.norm(xhat - v, axis=1)
    vnorm = np.linalg.norm(v, axis=1)
    margins = lam * vnorm - drift
    worst = float(margins.min()) if margins.size else 0.0
    if worst < -slack:
        raise BoundViolated("feature_drift", -worst)
    return {"points": int(v.shape[0]), "min_margin": worst,
            "lam": lam, "violations": 0}


def _label_stats(v, xhat, pos_idx):
    mu0 = v[pos_idx].mean(axis=0)
    mu = xhat[pos_idx].mean(axis=0)
    return mu0, mu


def check_cosine_bounds(block_matrix: np.ndarray, lam: float, v: np.ndarray,
                        label_positives: list, slack: float = SLACK):
    """Two-sided cosine bound over every (point, label) pair given.

    `label_positives` is a list of index arrays into the rows of v, one
    per checked label.  Pairs whose point or label mean embeds to zero
    are excluded (cosine undefined).
    """
    if np.any(v < 0):
        raise InvalidParam("bag features must be nonnegative (post-relu)")
    xhat = v + relu(v @ block_matrix.T)
    rows = []
    worst_low = np.inf
    worst_high = np.inf
    checked = 0
    for pos_idx in label_positives:
        pos_idx = np.asarray(pos_idx)
        if pos_idx.size == 0:
            continue
        mu0, mu = _label_stats(v, xhat, pos_idx)
        if np.linalg.norm(mu0) == 0:
            continue
        eps = cosine_slack(lam, pos_idx.size)
        vnorms = np.linalg.norm(v[pos_idx], axis=1)
        keep = vnorms > 0
        if not keep.any():
            continue
        cv = _cos_rows(v[pos_idx][keep], mu0)
        cx = _cos_rows(xhat[pos_idx][keep], mu)
        low_margin = cx - cv / (1.0 + eps)
        high_margin = (cv + eps) - cx
        checked += int(keep.sum())
        worst_low = min(worst_low, float(low_margin.min()))
        worst_high = min(worst_high, float(high_margin.min()))
        rows.append({
            "n_pos": int(pos_idx.size), "eps": float(eps),
            "min_lower_margin": float(low_margin.min()),
            "min_upper_margin": float(high_margin.min()),
        })
    if checked and (worst_low < -slack or worst_high < -slack):
        raise BoundViolated("cosine_similarity",
                            -min(worst_low, worst_high))
    return {"pairs": checked, "rows": rows, "lam": lam,
            "min_lower_margin": worst_low if checked else 0.0,
            "min_upper_margin": worst_high if checked else 0.0,
            "violations": 0}


def check_intermediate_bounds(block_matrix: np.ndarray, lam: float,
                              v: np.ndarray, label_positives: list,
                              slack: float = SLACK):
    """The lemma-level inequalities from the drift derivation:
    ||xhat|| <= (1+lam)||v||, ||mu - mu0|| <= lam*sqrt(n)*||mu0||,
    ||mu|| <= (1+lam*sqrt(n))*||mu0|| (unnormalized means)."""
    if np.any(v < 0):
        raise InvalidParam("bag features must be nonnegative (post-relu)")
    xhat = v + relu(v @ block_matrix.T)
    norm_margin = (1.0 + lam) * np.linalg.norm(v, axis=1) \
        - np.linalg.norm(xhat, axis=1)
    worst = float(norm_margin.min()) if norm_margin.size else 0.0
    mu_drift_worst = np.inf
    mu_norm_worst = np.inf
    labels_checked = 0
    for pos_idx in label_positives:
        pos_idx = np.asarray(pos_idx)
        if pos_idx.size == 0:
            continue
        mu0, mu = _label_stats(v, xhat, pos_idx)
        n0 = np.linalg.norm(mu0)
        root = lam * np.sqrt(pos_idx.size)
        labels_checked += 1
        mu_drift_worst = min(mu_drift_worst,
                             root * n0 - float(np.linalg.norm(mu - mu0)))
        mu_norm_worst = min(mu_norm_worst,
                            (1.0 + root) * n0 - float(np.linalg.norm(mu)))
    worst_all = min(worst,
                    mu_drift_worst if labels_checked else 0.0,
                    mu_norm_worst if labels_checked else 0.0)
    if worst_all < -slack:
        raise BoundViolated("intermediate", -worst_all)
    return {
        "points": int(v.shape[0]),
        "labels": labels_checked,
        "min_feature_norm_margin": worst,
        "min_mean_drift_margin": mu_drift_worst if labels_checked else 0.0,
        "min_mean_norm_margin": mu_norm_worst if labels_checked else 0.0,
        "violations": 0,
    }


def random_constrained_matrix(dim, lam, rng, at_budget=False):
    """Random matrix scaled so its top singular value is <= lam
    (== lam when at_budget)."""
    r = rng.standard_normal((dim, dim))
    sigma = spectral_norm_oracle(r)
    scale = 1.0 if at_budget else rng.uniform(0.2, 1.0)
    return r * (lam * scale / sigma)


def run_randomized_suite(num_instances: int, lambdas=(0.1, 0.3, 0.5, 1.0),
                         dim: int = 8, max_pos: int = 8, seed: int = 0,
                         slack: float = SLACK):
    """Draw (residual, nonnegative points, positive-set) instances and
    check every inequality; returns an aggregate report.

    One instance = one synthetic label: n_pos nonnegative feature
    vectors plus a spectrally constrained matrix at a lambda cycled
    from `lambdas`.  Every tenth instance uses the rank-1
    equality-achieving construction of the drift bound.
    """
    rng = np.random.default_rng(seed)
    report_rows = []
    worst = {"feature": np.inf, "cos_low": np.inf, "cos_high": np.inf,
             "norm": np.inf, "mu_drift": np.inf, "mu_norm": np.inf}
    tight_hits = 0
    for t in range(num_instances):
        lam = lambdas[t % len(lambdas)]
        n_pos = int(rng.integers(1, max_pos + 1))
        v = rng.uniform(0.0, 1.0, size=(n_pos, dim))
        witness = (t % 10) == 9
        if witness:
            r = make_equality_residual(v[0], lam)
        else:
            r = random_constrained_matrix(dim, lam, rng,
                                          at_budget=(t % 3 == 0))
        xhat = v + relu(v @ r.T)

        vnorm = np.linalg.norm(v, axis=1)
        drift = np.linalg.norm(xhat - v, axis=1)
        f_margin = lam * vnorm - drift
        worst["feature"] = min(worst["feature"], float(f_margin.min()))
        if witness and abs(lam * vnorm[0] - drift[0]) <= 1e-9 * max(vnorm[0], 1):
            tight_hits += 1

        norm_margin = (1.0 + lam) * vnorm - np.linalg.norm(xhat, axis=1)
        worst["norm"] = min(worst["norm"], float(norm_margin.min()))

        mu0 = v.mean(axis=0)
        mu = xhat.mean(axis=0)
        n0 = np.linalg.norm(mu0)
        if n0 > 0:
            root = lam * np.sqrt(n_pos)
            worst["mu_drift"] = min(
                worst["mu_drift"],
                root * n0 - float(np.linalg.norm(mu - mu0)))
            worst["mu_norm"] = min(
                worst["mu_norm"],
                (1.0 + root) * n0 - float(np.linalg.norm(mu)))
            eps = cosine_slack(lam, n_pos)
            keep = vnorm > 0
            cv = _cos_rows(v[keep], mu0)
            cx = _cos_rows(xhat[keep], mu)
            worst["cos_low"] = min(worst["cos_low"],
                                   float((cx - cv / (1.0 + eps)).min()))
            worst["cos_high"] = min(worst["cos_high"],
                                    float(((cv + eps) - cx).min()))
        if t < 1000:
            report_rows.append({
                "lam": lam, "n_pos": n_pos,
                "eps": float(cosine_slack(lam, n_pos)),
                "feature_margin": float(f_margin.min()),
                "witness": witness,
            })

    names = {"feature": "feature_drift", "cos_low": "cosine_lower",
             "cos_high": "cosine_upper", "norm": "feature_norm",
             "mu_drift": "mean_drift", "mu_norm": "mean_norm"}
    for key, margin in worst.items():
        if margin < -slack:
            raise BoundViolated(names[key], -margin)
    return {
        "instances": num_instances,
        "lambdas": list(lambdas),
        "violations": 0,
        "min_margins": {names[k]: (None if not np.isfinite(m) else float(m))
                        for k, m in worst.items()},
        "equality_witnesses_tight": tight_hits,
        "rows": report_rows,
    }


def check_model_bounds(embeddings: np.ndarray, block_matrix: np.ndarray,
                       lam: float, d: Dataset, label_ids=None,
                       slack: float = SLACK):
    """Run all three checks on a trained model over a dataset."""
    raw, _, _ = embed_corpus(d, embeddings)
    ycsc = d.labels.tocsc()
    if label_ids is None:
        label_ids = np.arange(d.num_labels)
    pos_lists = [ycsc.indices[ycsc.indptr[l]:ycsc.indptr[l + 1]]
                 for l in label_ids]
    feature = check_feature_bound(block_matrix, lam, raw, slack)
    cosine = check_cosine_bounds(block_matrix, lam, raw, pos_lists, slack)
    inter = check_intermediate_bounds(block_matrix, lam, raw, pos_lists, slack)
    return {"feature": feature, "cosine": cosine, "intermediate": inter}


def shortlist_overlap_vs_lambda(d: Dataset, embeddings: np.ndarray,
                                lambdas, caps: RouteCaps,
                                anns_params=(16, 100, 100),
                                train_epochs: int = 3, seed: int = 0):
    """Overlap between bag-feature and refined-feature shortlists as the
    spectral budget grows.  At budget 0 the features coincide, so the
    overlap is exactly 1."""
    m, efc, efs = anns_params
    raw, unit, empty = embed_corpus(d, embeddings)
    reps_v = label_representatives(d, raw, head_count=0, centers_per_head=1,
                                   seed=seed)
    idx_docs_v, doc_ids_v, idx_reps_v = build_indices(
        unit, empty, reps_v, (m, efc), (m, efc), seed)
    sl_v = build_shortlists(d, unit, empty, reps_v, idx_docs_v, doc_ids_v,
                            idx_reps_v, caps, seed, ef_search=efs)

    curve = []
    for lam in lambdas:
        if lam == 0.0:
            matrix = np.zeros((embeddings.shape[1], embeddings.shape[1]))
        else:
            cfg = ExtremeConfig(spectral_budget=lam, epochs=train_epochs,
                                dropout=0.0, heldout_fraction=0.0, seed=seed)
            model, _ = train_extreme(d, embeddings, sl_v, cfg)
            matrix = model.residual.matrix
        xhat = raw + relu(raw @ matrix.T)
        norms = np.linalg.norm(xhat, axis=1)
        empty_x = norms == 0
        unit_x = xhat / np.where(empty_x, 1.0, norms)[:, None]
        reps_x = label_representatives(d, xhat, head_count=0,
                                       centers_per_head=1, seed=seed)
        idx_docs_x, doc_ids_x, idx_reps_x = build_indices(
            unit_x, empty_x, reps_x, (m, efc), (m, efc), seed)
        sl_x = build_shortlists(d, unit_x, empty_x, reps_x, idx_docs_x,
                                doc_ids_x, idx_reps_x, caps, seed,
                                ef_search=efs)
        curve.append({"lam": float(lam),
                      "mean_jaccard": shortlist_overlap(sl_v, sl_x)})
    return curve
