"""Large Margin Cosine Loss classifier over place labels.

For unit features f and unit class rows w_j, with target y::

    loss = -log( e^{g(cos_y - m)} / (e^{g(cos_y - m)} + sum_{j != y} e^{g cos_j}) )

averaged over the batch, where g is the scale (``gamma``) and m the margin.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from . import diffcore as dc
from .errors import ContractError, ParameterError

DEFAULT_GAMMA = 30.0
DEFAULT_MARGIN = 0.4
NORM_TOL = 1e-4


def _check_unit(name, a):
    n = np.linalg.norm(a, axis=-1)
    if np.any(np.abs(n - 1.0) > NORM_TOL):
        raise ContractError(f"lmcl: {name} rows must be unit-norm (max deviation {np.abs(n - 1.0).max():.2e})")


def _logits(features, targets, W, gamma, margin):
    features = np.asarray(features, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    targets = np.asarray(targets, dtype=int)
    _check_unit("feature", features)
    _check_unit("weight", W)
    if features.shape[1] != W.shape[1]:
        raise ContractError(f"lmcl: feature dim {features.shape[1]} != weight dim {W.shape[1]}")
    if targets.shape != (len(features),) or targets.min(initial=0) < 0 or targets.max(initial=0) >= len(W):
        raise ContractError("lmcl: targets must index weight rows, one per feature")
    cos = features @ W.T
    rows = np.arange(len(features))
    logits = gamma * cos
    logits[rows, targets] -= gamma * margin
    return features, W, targets, logits, rows


def lmcl_loss(features, targets, W, gamma: float = DEFAULT_GAMMA, margin: float = DEFAULT_MARGIN) -> float:
    _, _, targets, logits, rows = _logits(features, targets, W, gamma, margin)
    top = logits.max(axis=1)
    ly = logits[rows, targets]
    e = np.exp(logits - top[:, None])
    ey = e[rows, targets]
    e[rows, targets] = 0.0
    other = e.sum(axis=1)  # summed without the target, so e^-48 terms survive
    # log1p keeps tiny losses exact when the target logit is the largest
    per = np.where(ly >= top, np.log1p(other), top - ly + np.log(ey + other))
    return float(per.mean())


def lmcl_backward(features, targets, W, gamma: float = DEFAULT_GAMMA, margin: float = DEFAULT_MARGIN):
    """Gradients of ``lmcl_loss`` w.r.t. features and weight rows (unconstrained)."""
    features, W, targets, logits, rows = _logits(features, targets, W, gamma, margin)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[rows, targets] -= 1.0
    dcos = p * (gamma / len(features))
    return dcos @ W, dcos.T @ features


class LMCL(dc.Primitive):
    """Loss as a primitive of ``features`` with parameter ``W`` (for fd_check)."""

    name = "lmcl"
    param_names = ("W",)

    def __init__(self, targets, gamma=DEFAULT_GAMMA, margin=DEFAULT_MARGIN):
        self.targets = np.asarray(targets, dtype=int)
        self.gamma, self.margin = gamma, margin

    def forward(self, x, params):
        self._cache = (x, params["W"])
        return np.asarray(lmcl_loss(x, self.targets, params["W"], self.gamma, self.margin))

    def backward(self, dy):
        x, W = self._cache
        df, dW = lmcl_backward(x, self.targets, W, self.gamma, self.margin)
        return float(dy) * df, {"W": float(dy) * dW}


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class ClassifierWeights:
    """One unit row per active place label.

    Each row keeps its own Adam moments and step count, so rows of classes
    outside the current training group stay frozen until their group returns.
    """

    def __init__(self, labels, W, gamma: float = DEFAULT_GAMMA, margin: float = DEFAULT_MARGIN,
                 m=None, v=None, t=None):
        self.labels = list(labels)
        self.index = {lab: i for i, lab in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ContractError("duplicate class labels")
        self.W = np.array(W, dtype=np.float64).reshape(len(self.labels), -1)
        self.gamma, self.margin = gamma, margin
        self.m = np.zeros_like(self.W) if m is None else np.array(m, dtype=np.float64)
        self.v = np.zeros_like(self.W) if v is None else np.array(v, dtype=np.float64)
        self.t = np.zeros(len(self.labels), dtype=np.int64) if t is None else np.array(t, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def rows(self, labels) -> np.ndarray:
        return np.array([self.index[lab] for lab in labels], dtype=np.int64)

    def renormalize(self, rows=None) -> None:
        sel = slice(None) if rows is None else rows
        self.W[sel] /= np.linalg.norm(self.W[sel], axis=1, keepdims=True)

    def adam_update(self, rows, grad, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
        """Bias-corrected Adam on the given rows only, then renormalize them."""
        if not lr > 0:
            raise ParameterError(f"learning rate must be positive, got {lr}")
        self.t[rows] += 1
        t = self.t[rows][:, None]
        self.m[rows] = beta1 * self.m[rows] + (1 - beta1) * grad
        self.v[rows] = beta2 * self.v[rows] + (1 - beta2) * grad * grad
        mhat = self.m[rows] / (1 - beta1**t)
        vhat = self.v[rows] / (1 - beta2**t)
        self.W[rows] -= lr * mhat / (np.sqrt(vhat) + eps)
        self.renormalize(rows)

    @classmethod
    def from_centroids(cls, labels, descriptors, gamma=DEFAULT_GAMMA, margin=DEFAULT_MARGIN):
        """Rows = normalized mean descriptor of every label's members."""
        rows = _centroids(labels, descriptors)
        order = sorted(rows)
        W = np.stack([rows[lab] for lab in order]) if order else np.zeros((0, 0))
        return cls(order, W, gamma, margin)


def _centroids(labels, descriptors):
    acc = defaultdict(list)
    for iid, lab in labels.items():
        acc[lab].append(descriptors[iid])
    return {lab: _unit(np.mean(np.stack(v), axis=0)) for lab, v in acc.items()}


def remap_after_recluster(weights: ClassifierWeights, old_labels, new_labels, descriptors) -> ClassifierWeights:
    """Replace the rows of every re-clustered cell by its new normalized centroids.

    ``new_labels`` covers exactly the images of the re-clustered cells. Rows of
    other cells, and their optimizer state, are carried over unchanged; fresh
    rows start with zero moments.
    """
    cells = {lab.cell for lab in new_labels.values()}
    if not cells:
        return weights
    stale = {lab for lab in old_labels.values() if lab.cell in cells}
    fresh = _centroids(new_labels, descriptors)
    kept = [lab for lab in weights.labels if lab.cell not in cells and lab not in stale]
    order = sorted(kept + list(fresh))
    d = weights.W.shape[1]
    n = len(order)
    W, m, v, t = np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d)), np.zeros(n, dtype=np.int64)
    for i, lab in enumerate(order):
        if lab in fresh:
            W[i] = fresh[lab]
        else:
            j = weights.index[lab]
            W[i], m[i], v[i], t[i] = weights.W[j], weights.m[j], weights.v[j], weights.t[j]
    return ClassifierWeights(order, W, weights.gamma, weights.margin, m, v, t)
