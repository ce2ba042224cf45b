"""Second-stage model trained on the base model's own confusions.

The base predictor is run over the training points; whatever it ranks
into the top k, minus the true positives, becomes each point's mined
negative set.  An independent model (its own embeddings, residual and
classifiers, warm-started from the stage-one embeddings) is then
trained on exactly those sets and fused in at prediction time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError
from .extreme import ExtremeConfig, ExtremeModel, train_extreme
from .predictor import PredictConfig, PredictorState, predict
from .shortlist import SOURCE_DOC, Shortlist


@dataclass
class RerankerTrainSet:
    """Per point: mined negatives (base-model top-k minus positives)."""

    mined: Shortlist
    mean_mined_per_point: float
    top_k: int


def mine_mispredictions(d: Dataset, state: PredictorState, top_k: int,
                        ef_search: int = 200) -> RerankerTrainSet:
    """Run the base predictor over training points and collect, per
    point, the top-k predicted labels that are not true positives."""
    if top_k < 0:
        raise ConfigError("top_k must be >= 0")
    cfg = PredictConfig(alpha=0.5, beta=1.0, top_k=max(top_k, 1),
                        ef_search=ef_search)
    mined = Shortlist(num_points=d.num_points, num_labels=d.num_labels)
    total = 0
    for i in range(d.num_points):
        if top_k == 0:
            mined.append([], [], [])
            continue
        pred = predict(d.feature_row(i), state, cfg)
        pos = set(int(x) for x in d.positive_labels(i))
        negs = [(int(lab), float(sc))
                for lab, sc in zip(pred.labels[:top_k], pred.scores[:top_k])
                if int(lab) not in pos]
        mined.append([lab for lab, _ in negs], [sc for _, sc in negs],
                     np.full(len(negs), SOURCE_DOC, dtype=np.int8))
        total += len(negs)
    return RerankerTrainSet(mined=mined,
                            mean_mined_per_point=total / d.num_points,
                            top_k=top_k)


def train_reranker(d: Dataset, ts: RerankerTrainSet, embeddings: np.ndarray,
                   cfg: ExtremeConfig) -> tuple[ExtremeModel, list[dict]]:
    """Same machinery as the extreme stage, over positives plus mined
    negatives, with the embedding copy trained rather than frozen."""
    rr_cfg = ExtremeConfig(
        spectral_budget=cfg.spectral_budget,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        dropout=cfg.dropout,
        fine_tune_embeddings=True,
        train_residual=cfg.train_residual,
        heldout_fraction=cfg.heldout_fraction,
        seed=cfg.seed,
    )
    return train_extreme(d, embeddings, ts.mined, rr_cfg)
