"""Stage one: learn token embeddings on the meta-label task.

Embeddings, a residual block and one linear classifier per meta-label
are trained jointly with the full (non-shortlisted) logistic objective
over all meta-labels, subject to the residual spectral budget.  Only
the embeddings survive; the stage classifiers and residual are
discarded once training ends.

RNG discipline (relevant for exact reproduction): a single generator
seeded with `cfg.seed` draws, in order, the embedding init (unless one
is supplied), the classifier init, the residual power vectors, the
held-out split permutation, then per-epoch shuffles; a second
generator seeded `cfg.seed + 1` serves dropout masks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .clustering import MetaLabelMap
from .data import Dataset
from .errors import ConfigError, DimMismatch, NonFiniteLoss
from .nn import (
    AdamState,
    ResidualBlock,
    batch_backward,
    batch_forward,
    logistic_loss,
    sigmoid,
    xavier_init,
)


@dataclass
class SurrogateConfig:
    dim: int = 64
    spectral_budget: float = 0.5
    learning_rate: float = 0.02
    batch_size: int = 256
    epochs: int = 30
    dropout: float = 0.5
    heldout_fraction: float = 0.05
    seed: int = 0

    def validate(self):
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if not (0.0 < self.spectral_budget <= 1.0):
            raise ConfigError("spectral_budget must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must lie in [0, 1)")
        if not (0.0 <= self.heldout_fraction < 0.5):
            raise ConfigError("heldout_fraction must lie in [0, 0.5)")


@dataclass
class IntermediateModel:
    """What stage one hands to the rest of the pipeline: embeddings only."""

    embeddings: np.ndarray      # (V, D), rows are token embeddings


def init_embeddings(num_tokens: int, dim: int, pretrained: dict | None,
                    seed_or_rng) -> np.ndarray:
    """Uniform(-1/sqrt(D), 1/sqrt(D)) rows; rows present in `pretrained`
    (token id -> vector) are copied verbatim."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    scale = 1.0 / np.sqrt(dim)
    bank = rng.uniform(-scale, scale, size=(num_tokens, dim))
    if pretrained:
        for tok, vec in pretrained.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise DimMismatch(
                    f"pretrained vector for token {tok} has shape {vec.shape}, "
                    f"expected ({dim},)")
            bank[tok] = vec
    return bank


def _meta_sign_matrix(meta_rows, batch_idx, num_meta):
    signs = -np.ones((batch_idx.size, num_meta))
    block = meta_rows[batch_idx]
    for r in range(batch_idx.size):
        s, e = block.indptr[r], block.indptr[r + 1]
        signs[r, block.indices[s:e]] = 1.0
    return signs


def _heldout_meta_p1(x_held, meta_held, embeddings, block, classifiers):
    if x_held.shape[0] == 0:
        return None
    cache = batch_forward(x_held, embeddings, block, training=False)
    scores = cache.xhat @ classifiers.T
    top = np.argmax(scores, axis=1)
    hits = 0
    scored = 0
    for r in range(x_held.shape[0]):
        s, e = meta_held.indptr[r], meta_held.indptr[r + 1]
        pos = meta_held.indices[s:e]
        if pos.size == 0:
            continue
        scored += 1
        hits += int(top[r] in set(pos.tolist()))
    return hits / scored if scored else None


def train_surrogate(d: Dataset, meta: MetaLabelMap, cfg: SurrogateConfig,
                    init_bank: np.ndarray | None = None):
    """Mini-batch Adam on the full meta-label logistic objective.

    Returns (IntermediateModel, log) where log is one dict per epoch
    with keys epoch, mean_loss, heldout_meta_p1, wall_ms.  Spectral
    projection of the residual runs after every optimizer step.
    """
    cfg.validate()
    if meta.meta_positives.shape[0] != d.num_points:
        raise ConfigError("meta labels and dataset disagree on point count")
    num_meta = meta.num_clusters
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)

    if init_bank is not None:
        if init_bank.shape != (d.num_features, cfg.dim):
            raise DimMismatch(
                f"init bank shape {init_bank.shape} != "
                f"({d.num_features}, {cfg.dim})")
        embeddings = init_bank.copy()
    else:
        embeddings = init_embeddings(d.num_features, cfg.dim, None, rng)
    classifiers = xavier_init(num_meta, cfg.dim, rng)
    block = ResidualBlock(cfg.dim, cfg.spectral_budget,
                          seed=int(rng.integers(2 ** 31)))

    perm = rng.permutation(d.num_points)
    n_held = int(round(d.num_points * cfg.heldout_fraction))
    held_idx = np.sort(perm[:n_held])
    train_idx = np.sort(perm[n_held:])
    x_held = d.features[held_idx]
    meta_held = meta.meta_positives[held_idx]

    adam_e = AdamState(embeddings.shape, cfg.learning_rate)
    adam_w = AdamState(classifiers.shape, cfg.learning_rate)
    adam_r = AdamState(block.matrix.shape, cfg.learning_rate)

    log: list[dict] = []

    def eval_mean_loss():
        cache = batch_forward(d.features[train_idx], embeddings, block,
                              training=False)
        scores = cache.xhat @ classifiers.T
        signs = _meta_sign_matrix(meta.meta_positives, train_idx, num_meta)
        return float(np.sum(logistic_loss(signs * scores)) / train_idx.size)

    if cfg.epochs == 0:
        t0 = time.time()
        log.append({
            "epoch": 0,
            "mean_loss": eval_mean_loss(),
            "heldout_meta_p1": _heldout_meta_p1(
                x_held, meta_held, embeddings, block, classifiers),
            "wall_ms": (time.time() - t0) * 1000.0,
        })
        return IntermediateModel(embeddings=embeddings), log

    for epoch in range(cfg.epochs):
        t0 = time.time()
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            xb = d.features[batch]
            b = batch.size
            cache = batch_forward(xb, embeddings, block, cfg.dropout,
                                  drop_rng, training=True)
            scores = cache.xhat @ classifiers.T
            signs = _meta_sign_matrix(meta.meta_positives, batch, num_meta)
            margins = signs * scores
            batch_loss = float(np.sum(logistic_loss(margins)))
            if not np.isfinite(batch_loss):
                raise NonFiniteLoss("surrogate", epoch, start // cfg.batch_size,
                                    batch_loss)
            loss_sum += batch_loss

            grad_scores = (-signs * sigmoid(-margins)) / b
            grad_w = grad_scores.T @ cache.xhat
            grad_xhat = grad_scores @ classifiers
            touched, grad_rows, grad_r = batch_backward(
                cache, grad_xhat, xb, block)

            adam_w.step(classifiers, grad_w)
            adam_r.step(block.matrix, grad_r)
            block.project()
            if touched.size:
                adam_e.step_rows(embeddings, touched, grad_rows)

        log.append({
            "epoch": epoch,
            "mean_loss": loss_sum / order.size,
            "heldout_meta_p1": _heldout_meta_p1(
                x_held, meta_held, embeddings, block, classifiers),
            "wall_ms": (time.time() - t0) * 1000.0,
        })

    return IntermediateModel(embeddings=embeddings), log
