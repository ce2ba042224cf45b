"""Stages three and four: residual transfer plus per-label classifiers.

Training touches, per point, only its positive labels and its
shortlisted negatives, so the per-step work stays proportional to the
shortlist cap rather than the label count.  Classifier moments follow
lazy-Adam semantics: rows untouched by a batch are neither decayed nor
updated.  The residual matrix is re-projected onto its spectral budget
after every optimizer step.

RNG discipline mirrors the surrogate trainer: one generator seeded
`cfg.seed` draws classifier init, residual power vectors, the held-out
permutation and the per-epoch shuffles, in that order; dropout masks
come from a second generator seeded `cfg.seed + 1`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, MissingShortlist, NonFiniteLoss
from .nn import (
    AdamState,
    ResidualBlock,
    batch_backward,
    batch_forward,
    logistic_loss,
    sigmoid,
    xavier_init,
)
from .shortlist import Shortlist


@dataclass
class ExtremeConfig:
    spectral_budget: float = 0.5
    learning_rate: float = 0.02
    batch_size: int = 256
    epochs: int = 30
    dropout: float = 0.5
    fine_tune_embeddings: bool = False
    train_residual: bool = True
    heldout_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if not (0.0 < self.spectral_budget <= 1.0):
            raise ConfigError("spectral_budget must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if not (0.0 <= self.heldout_fraction < 0.5):
            raise ConfigError("heldout_fraction must lie in [0, 0.5)")


@dataclass
class ExtremeModel:
    embeddings: np.ndarray            # (V, D); copy of the input if frozen
    residual: ResidualBlock
    classifiers: np.ndarray           # (L, D)
    trained_labels: np.ndarray        # bool (L,): rows a gradient ever touched
    audit: list = field(default_factory=list, repr=False)


def _point_sets(d: Dataset, sl: Shortlist):
    """Per point: (positives, shortlisted negatives) as id arrays."""
    sets = []
    for i in range(d.num_points):
        pos = d.positive_labels(i)
        if i >= len(sl.labels):
            raise MissingShortlist(i)
        neg = np.setdiff1d(sl.labels[i], pos)
        sets.append((pos, neg))
    return sets


def _heldout_p1(d, held_idx, point_sets, embeddings, block, classifiers):
    """Top-1 accuracy on held-out points, candidates restricted to each
    point's training shortlist union its positives."""
    if held_idx.size == 0:
        return None
    cache = batch_forward(d.features[held_idx], embeddings, block,
                          training=False)
    hits = 0
    scored = 0
    for r, i in enumerate(held_idx):
        pos, neg = point_sets[i]
        if pos.size == 0:
            continue
        cands = np.concatenate([pos, neg]).astype(np.int64)
        if cands.size == 0:
            continue
        scores = classifiers[cands] @ cache.xhat[r]
        order = np.lexsort((cands, -scores))
        scored += 1
        hits += int(cands[order[0]] in set(pos.tolist()))
    return hits / scored if scored else None


def train_extreme(d: Dataset, embeddings: np.ndarray, sl: Shortlist,
                  cfg: ExtremeConfig):
    """Shortlist-restricted one-vs-all training; returns (model, log).

    The log carries per-epoch mean loss, held-out top-1 and wall time,
    plus per-batch touched-label statistics for the cost audit.
    """
    cfg.validate()
    if sl.num_points < d.num_points:
        raise MissingShortlist(sl.num_points)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)

    bank = embeddings.copy()
    classifiers = xavier_init(d.num_labels, bank.shape[1], rng)
    block = ResidualBlock(bank.shape[1], cfg.spectral_budget,
                          seed=int(rng.integers(2 ** 31)))
    point_sets = _point_sets(d, sl)

    perm = rng.permutation(d.num_points)
    n_held = int(round(d.num_points * cfg.heldout_fraction))
    held_idx = np.sort(perm[:n_held])
    train_idx = np.sort(perm[n_held:])

    adam_w = AdamState(classifiers.shape, cfg.learning_rate)
    adam_r = AdamState(block.matrix.shape, cfg.learning_rate)
    adam_e = AdamState(bank.shape, cfg.learning_rate) \
        if cfg.fine_tune_embeddings else None

    trained = np.zeros(d.num_labels, dtype=bool)
    log: list[dict] = []
    audit: list[dict] = []

    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = d.features[batch]
            b = batch.size
            cache = batch_forward(xb, bank, block, cfg.dropout, drop_rng,
                                  training=True)

            grad_xhat = np.zeros((b, bank.shape[1]))
            lab_chunks: list[np.ndarray] = []
            grad_chunks: list[np.ndarray] = []
            batch_loss = 0.0
            max_touched = 0
            batch_terms = 0
            for r, i in enumerate(batch):
                pos, neg = point_sets[i]
                cands = np.concatenate([pos, neg]).astype(np.int64)
                if cands.size == 0:
                    continue
                max_touched = max(max_touched, cands.size)
                y = np.concatenate(
                    [np.ones(pos.size), -np.ones(neg.size)])
                w = classifiers[cands]
                z = w @ cache.xhat[r]
                margins = y * z
                batch_loss += float(np.sum(logistic_loss(margins)))
                g = (-y * sigmoid(-margins)) / b
                grad_xhat[r] = g @ w
                lab_chunks.append(cands)
                grad_chunks.append(g[:, None] * cache.xhat[r][None, :])
                batch_terms += cands.size

            if not np.isfinite(batch_loss):
                raise NonFiniteLoss("extreme", epoch, start // cfg.batch_size,
                                    batch_loss)
            loss_sum += batch_loss

            touched_tok, grad_rows, grad_r = batch_backward(
                cache, grad_xhat, xb, block,
                want_embedding_grads=cfg.fine_tune_embeddings)

            if lab_chunks:
                all_labs = np.concatenate(lab_chunks)
                all_grads = np.concatenate(grad_chunks, axis=0)
                uniq, inverse = np.unique(all_labs, return_inverse=True)
                acc = np.zeros((uniq.size, bank.shape[1]))
                np.add.at(acc, inverse, all_grads)
                adam_w.step_rows(classifiers, uniq, acc)
                trained[uniq] = True
            if cfg.train_residual:
                adam_r.step(block.matrix, grad_r)
                block.project()
            if cfg.fine_tune_embeddings and touched_tok is not None \
                    and touched_tok.size:
                adam_e.step_rows(bank, touched_tok, grad_rows)

            audit.append({
                "epoch": epoch,
                "batch_points": int(b),
                "max_touched_labels": int(max_touched),
                "mean_touched_labels":
                    batch_terms / len(lab_chunks) if lab_chunks else 0.0,
            })

        log.append({
            "epoch": epoch,
            "mean_loss": loss_sum / order.size,
            "heldout_p1": _heldout_p1(d, held_idx, point_sets, bank, block,
                                      classifiers),
            "wall_ms": (time.time() - t0) * 1000.0,
        })

    model = ExtremeModel(embeddings=bank, residual=block,
                         classifiers=classifiers, trained_labels=trained,
                         audit=audit)
    return model, log


def per_step_cost_audit(model: ExtremeModel, shortlist_cap: int,
                        max_positives: int, dim: int):
    """Structural check of the per-point gradient cost.

    Confirms no batch ever touched more labels per point than the
    shortlist cap plus the largest positive set, and reports the
    implied per-point work D * |S| + D^2.
    """
    observed = max((rec["max_touched_labels"] for rec in model.audit),
                   default=0)
    bound = shortlist_cap + max_positives
    return {
        "max_touched_labels": int(observed),
        "bound": int(bound),
        "within_bound": bool(observed <= bound),
        "per_point_work_flops": int(dim * observed + dim * dim),
        "batches_audited": len(model.audit),
    }
