"""Dense numerical core: feature architecture, gradients, optimizer.

The feature map used everywhere is

    v    = relu(sum_t x_t * e_t)          (embedding bag over tokens)
    xhat = v + relu(R @ v)                (residual refinement)

with the spectral norm of R kept within a budget `lam` by power
iteration.  All gradients are derived analytically (relu subgradient at
0 is taken as 0) and checked against finite differences in the tests.

Token embeddings are stored row-per-token as a (V, D) array; classifier
banks row-per-label as (K, D).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .data import SparseVector
from .errors import DegenerateInput, InvalidParam, ShapeMismatch


def relu(x):
    return np.maximum(x, 0.0)


def _unit(v):
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def sigmoid(x):
    return expit(x)


def logistic_loss(margins):
    """softplus(-margins) = log(1 + exp(-margins)), numerically stable."""
    return np.logaddexp(0.0, -np.asarray(margins))


def embed_bag(x: SparseVector, embeddings: np.ndarray) -> np.ndarray:
    """relu of the weighted sum of the token embedding rows of x.

    Accumulates in float64 regardless of the bank's storage dtype.
    """
    vocab, dim = embeddings.shape
    if x.nnz and int(x.indices[-1]) >= vocab:
        raise ShapeMismatch(
            f"token id {int(x.indices[-1])} out of range for bank with V={vocab}")
    if x.nnz == 0:
        return np.zeros(dim)
    pre = x.values.astype(np.float64) @ embeddings[x.indices].astype(np.float64)
    return relu(pre)


class ResidualBlock:
    """D x D residual map with a spectral-norm budget.

    Keeps persistent power-iteration vectors so that re-estimating the
    top singular value after a small parameter update is cheap.
    """

    def __init__(self, dim: int, lam: float, seed: int = 0):
        if not (0.0 <= lam <= 1.0):
            raise InvalidParam(f"spectral budget must lie in [0, 1], got {lam}")
        self.dim = dim
        self.lam = float(lam)
        self.matrix = np.zeros((dim, dim))
        rng = np.random.default_rng(seed)
        self.left = _unit(rng.standard_normal(dim))
        self.right = _unit(rng.standard_normal(dim))

    def estimate_spectral_norm(self, min_iters=1, max_iters=200, tol=1e-10):
        """Power iteration from the cached vectors; refreshes them."""
        r = self.matrix
        sigma = 0.0
        for it in range(max_iters):
            prev = sigma
            u = r @ self.right
            nu = np.linalg.norm(u)
            if nu <= 1e-300:
                return 0.0
            self.left = u / nu
            w = r.T @ self.left
            sigma = float(np.linalg.norm(w))
            if sigma <= 1e-300:
                return 0.0
            self.right = w / sigma
            if it + 1 >= min_iters and abs(sigma - prev) <= tol * max(sigma, 1.0):
                break
        return sigma

    def project(self):
        """Scale the matrix down if its estimated top singular value
        exceeds the budget.  Returns the (final) estimate."""
        sigma = self.estimate_spectral_norm()
        # rescaling keeps the singular vectors, so one extra pass is a
        # cheap guard against a not-yet-converged estimate
        for _ in range(3):
            if sigma <= self.lam or sigma == 0.0:
                break
            self.matrix *= self.lam / sigma
            sigma = self.estimate_spectral_norm()
        return sigma

    def copy(self):
        out = ResidualBlock(self.dim, self.lam)
        out.matrix = self.matrix.copy()
        out.left = self.left.copy()
        out.right = self.right.copy()
        return out


def residual_forward(v: np.ndarray, block: ResidualBlock) -> np.ndarray:
    """v + relu(R v); elementwise >= v since the correction is nonnegative."""
    return v + relu(block.matrix @ v)


def apply_dropout(v: np.ndarray, p: float, rng, training: bool = True):
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not (0.0 <= p < 1.0):
        raise InvalidParam(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return v
    mask = rng.random(v.shape) >= p
    return v * mask / (1.0 - p)


def logistic_loss_and_grads(v, x: SparseVector, block: ResidualBlock,
                            classifiers: np.ndarray, pos, neg):
    """Loss and exact gradients of the shortlist-restricted logistic
    objective at a single point.

    Args:
        v: the point's embedded features, post-relu, shape (D,).
        x: the raw sparse features that produced v (token ids + weights);
           needed to route gradients back to embedding rows.
        block: residual block (its matrix receives a gradient).
        classifiers: (K, D) bank, one row per label.
        pos / neg: disjoint arrays of label ids with y = +1 / -1.

    Returns:
        (loss, (token_ids, grad_embedding_rows), grad_residual,
         (label_ids, grad_classifier_rows))
    """
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    if np.intersect1d(pos, neg).size:
        raise InvalidParam("pos and neg label sets overlap")
    labels = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(pos.size), -np.ones(neg.size)])

    r = block.matrix
    u = r @ v
    xhat = v + relu(u)

    w = classifiers[labels]
    z = w @ xhat
    loss = float(np.sum(logistic_loss(y * z)))

    g = -y * expit(-y * z)                       # dloss/dz per label
    grad_w_rows = g[:, None] * xhat[None, :]
    grad_xhat = g @ w
    h = grad_xhat * (u > 0)
    grad_r = np.outer(h, v)
    grad_v = grad_xhat + r.T @ h
    grad_pre = grad_v * (v > 0)
    grad_e_rows = x.values[:, None] * grad_pre[None, :]

    return loss, (x.indices, grad_e_rows), grad_r, (labels, grad_w_rows)


class AdamState:
    """Bias-corrected Adam with optional lazy (row-sparse) updates.

    `step_rows` touches only the given rows: moments of untouched rows
    are neither decayed nor applied, which keeps per-step cost
    proportional to the touched set.
    """

    def __init__(self, shape, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = float(learning_rate)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if param.shape != self.m.shape or grad.shape != self.m.shape:
            raise ShapeMismatch(
                f"adam shapes disagree: {param.shape} vs {self.m.shape}")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return param

    def step_rows(self, param, rows, grad_rows):
        if param.shape != self.m.shape:
            raise ShapeMismatch(
                f"adam shapes disagree: {param.shape} vs {self.m.shape}")
        self.t += 1
        m = self.beta1 * self.m[rows] + (1.0 - self.beta1) * grad_rows
        v = self.beta2 * self.v[rows] + (1.0 - self.beta2) * grad_rows * grad_rows
        self.m[rows] = m
        self.v[rows] = v
        mhat = m / (1.0 - self.beta1 ** self.t)
        vhat = v / (1.0 - self.beta2 ** self.t)
        param[rows] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return param


def adam_step(param, grad, state: AdamState):
    """Functional wrapper over AdamState.step."""
    return state.step(param, grad), state


def xavier_init(num_rows: int, dim: int, rng) -> np.ndarray:
    """Per-row Xavier-uniform init for a (num_rows, dim) classifier bank."""
    limit = np.sqrt(6.0 / (dim + 1.0))
    return rng.uniform(-limit, limit, size=(num_rows, dim))


# ---------------------------------------------------------------------
# Batched kernels shared by the trainers.
# ---------------------------------------------------------------------

class ForwardCache:
    """Activations of a mini-batch forward pass, kept for backprop."""

    __slots__ = ("v", "v_dropped", "u", "mask_v", "mask_u", "xhat", "inv_keep")

    def __init__(self, v, v_dropped, u, mask_v, mask_u, xhat, inv_keep):
        self.v = v
        self.v_dropped = v_dropped
        self.u = u
        self.mask_v = mask_v
        self.mask_u = mask_u
        self.xhat = xhat
        self.inv_keep = inv_keep


def batch_forward(x_batch, embeddings, block: ResidualBlock,
                  dropout_p=0.0, rng=None, training=False) -> ForwardCache:
    """Forward pass for a CSR batch: dropout after each relu when training."""
    pre = x_batch @ embeddings
    v = relu(pre)
    inv_keep = 1.0
    mask_v = mask_u = None
    if training and dropout_p > 0.0:
        inv_keep = 1.0 / (1.0 - dropout_p)
        mask_v = rng.random(v.shape) >= dropout_p
        v_dropped = v * mask_v * inv_keep
    else:
        v_dropped = v
    u = v_dropped @ block.matrix.T
    delta = relu(u)
    if training and dropout_p > 0.0:
        mask_u = rng.random(u.shape) >= dropout_p
        delta = delta * mask_u * inv_keep
    xhat = v_dropped + delta
    return ForwardCache(v, v_dropped, u, mask_v, mask_u, xhat, inv_keep)


def batch_backward(cache: ForwardCache, grad_xhat, x_batch, block: ResidualBlock,
                   want_embedding_grads=True):
    """Backprop grad wrt xhat through the shared feature map.

    Returns (touched_token_ids, grad_embedding_rows, grad_residual);
    the first two are None when embedding grads are not requested.
    """
    grad_delta = grad_xhat
    if cache.mask_u is not None:
        grad_delta = grad_delta * cache.mask_u * cache.inv_keep
    grad_u = grad_delta * (cache.u > 0)
    grad_r = grad_u.T @ cache.v_dropped
    grad_vd = grad_xhat + grad_u @ block.matrix
    if cache.mask_v is not None:
        grad_vd = grad_vd * cache.mask_v * cache.inv_keep
    grad_pre = grad_vd * (cache.v > 0)
    if not want_embedding_grads:
        return None, None, grad_r
    touched = np.unique(x_batch.indices)
    if touched.size == 0:
        return touched, np.zeros((0, grad_pre.shape[1])), grad_r
    sub = x_batch[:, touched]
    grad_rows = sub.T @ grad_pre
    return touched, np.asarray(grad_rows), grad_r


def l2_normalize_rows(mat: np.ndarray, handle_zero="zero"):
    """Row-normalize; zero rows stay zero ('zero') or raise ('raise')."""
    norms = np.linalg.norm(mat, axis=1)
    zero = norms == 0
    if handle_zero == "raise" and np.any(zero):
        raise DegenerateInput("zero rows cannot be normalized")
    safe = np.where(zero, 1.0, norms)
    return mat / safe[:, None], zero
