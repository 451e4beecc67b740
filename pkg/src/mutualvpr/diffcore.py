"""Minimal differentiable layer with hand-written backward passes.

Every primitive follows the same protocol::

    y = prim.forward(x, params)        # caches what backward needs
    dx, dparams = prim.backward(dy)    # exact analytic gradients

``params`` is a mapping from the primitive's ``param_names`` to arrays. All
primitives accept arbitrary leading batch dimensions. ``fd_check`` compares
``backward`` against central finite differences and works for any object
implementing the protocol, including composite blocks.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterable, Mapping

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
GEM_CLAMP = 1e-6


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class Primitive:
    name = "primitive"
    param_names: tuple[str, ...] = ()

    def forward(self, x, params):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _require(self, cond, msg):
        if not cond:
            raise ContractError(f"{self.name}: {msg}")


class Linear(Primitive):
    name = "linear"
    param_names = ("W", "b")

    def forward(self, x, params):
        W, b = params["W"], params["b"]
        self._require(x.shape[-1] == W.shape[0], f"input width {x.shape[-1]} != W rows {W.shape[0]}")
        self._require(b.shape == (W.shape[1],), f"bias shape {b.shape} != ({W.shape[1]},)")
        self._cache = (x, W)
        return x @ W + b

    def backward(self, dy):
        x, W = self._cache
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        return dy @ W.T, {"W": x2.T @ dy2, "b": dy2.sum(axis=0)}


class LayerNorm(Primitive):
    """Normalize over the last axis, then apply a per-feature affine."""

    name = "layer_norm"
    param_names = ("gamma", "beta")

    def __init__(self, eps: float = 1e-5):
        if not eps > 0:
            raise ParameterError(f"layer_norm epsilon must be positive, got {eps}")
        self.eps = eps

    def forward(self, x, params):
        gamma, beta = params["gamma"], params["beta"]
        self._require(gamma.shape == (x.shape[-1],), f"gamma shape {gamma.shape} vs width {x.shape[-1]}")
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv, gamma)
        return xhat * gamma + beta

    def backward(self, dy):
        xhat, inv, gamma = self._cache
        n = xhat.shape[-1]
        dxhat = dy * gamma
        dx = inv / n * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dy2 = dy.reshape(-1, n)
        return dx, {
            "gamma": (dy2 * xhat.reshape(-1, n)).sum(axis=0),
            "beta": dy2.sum(axis=0),
        }


class SingleHeadAttention(Primitive):
    """Scaled dot-product self-attention over the token axis (-2)."""

    name = "single_head_attention"
    param_names = ("Wq", "Wk", "Wv", "Wo")

    def forward(self, x, params):
        Wq, Wk, Wv, Wo = (params[k] for k in self.param_names)
        self._require(x.ndim >= 2, "expects (..., T, D) input")
        self._require(x.shape[-1] == Wq.shape[0], f"input width {x.shape[-1]} != Wq rows {Wq.shape[0]}")
        q, k, v = x @ Wq, x @ Wk, x @ Wv
        scale = 1.0 / np.sqrt(Wq.shape[1])
        s = (q @ np.swapaxes(k, -1, -2)) * scale
        s = s - s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        h = p @ v
        self._cache = (x, q, k, v, p, h, scale, Wq, Wk, Wv, Wo)
        return h @ Wo

    def backward(self, dy):
        x, q, k, v, p, h, scale, Wq, Wk, Wv, Wo = self._cache
        flat = lambda a: a.reshape(-1, a.shape[-1])
        dWo = flat(h).T @ flat(dy)
        dh = dy @ Wo.T
        dp = dh @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(p, -1, -2) @ dh
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        dx = dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
        xf = flat(x)
        return dx, {"Wq": xf.T @ flat(dq), "Wk": xf.T @ flat(dk), "Wv": xf.T @ flat(dv), "Wo": dWo}


class MLP2(Primitive):
    """Two linear layers with a GELU in between."""

    name = "mlp_2layer"
    param_names = ("W1", "b1", "W2", "b2")

    def forward(self, x, params):
        W1, b1, W2, b2 = (params[k] for k in self.param_names)
        self._require(x.shape[-1] == W1.shape[0], f"input width {x.shape[-1]} != W1 rows {W1.shape[0]}")
        self._require(W1.shape[1] == W2.shape[0], "hidden widths of W1 and W2 differ")
        hpre = x @ W1 + b1
        a = gelu(hpre)
        self._cache = (x, hpre, a, W1, W2)
        return a @ W2 + b2

    def backward(self, dy):
        x, hpre, a, W1, W2 = self._cache
        flat = lambda t: t.reshape(-1, t.shape[-1])
        dyf = flat(dy)
        dW2 = flat(a).T @ dyf
        dh = (dy @ W2.T) * gelu_grad(hpre)
        dhf = flat(dh)
        return dh @ W1.T, {"W1": flat(x).T @ dhf, "b1": dhf.sum(axis=0), "W2": dW2, "b2": dyf.sum(axis=0)}


class L2Normalize(Primitive):
    name = "l2_normalize"

    def forward(self, x, params=None):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        self._require(np.all(norm > 0), "cannot normalize a zero vector")
        y = x / norm
        self._cache = (y, norm)
        return y

    def backward(self, dy):
        y, norm = self._cache
        return (dy - y * (y * dy).sum(axis=-1, keepdims=True)) / norm, {}


class GeM(Primitive):
    """Generalized-mean pooling over the token axis (-2) with exponent ``p``.

    Inputs are clamped to ``GEM_CLAMP`` first; clamped entries get zero
    gradient.
    """

    name = "gem_pool"
    param_names = ("p",)

    def forward(self, x, params):
        p = float(params["p"])
        if p < 1.0:
            raise ParameterError(f"GeM exponent must be >= 1, got {p}")
        self._require(x.ndim >= 2, "expects (..., T, D) input")
        mask = x > GEM_CLAMP
        xc = np.where(mask, x, GEM_CLAMP)
        xp = xc ** p
        mp = xp.mean(axis=-2)
        y = mp ** (1.0 / p)
        self._cache = (mask, xc, xp, mp, y, p)
        return y

    def backward(self, dy):
        mask, xc, xp, mp, y, p = self._cache
        t = xc.shape[-2]
        coef = (dy * y / mp)[..., None, :]
        dx = np.where(mask, coef * xp / xc / t, 0.0)
        mlog = (xp * np.log(xc)).mean(axis=-2)
        dp = (dy * y * (-np.log(mp) / p**2 + mlog / (p * mp))).sum()
        return dx, {"p": np.asarray(dp)}


class ScaleBy(Primitive):
    name = "scale_by"
    param_names = ("s",)

    def forward(self, x, params):
        s = params["s"]
        self._require(np.ndim(s) == 0, "scale must be a scalar")
        self._cache = (x, s)
        return s * x

    def backward(self, dy):
        x, s = self._cache
        return s * dy, {"s": np.asarray((dy * x).sum())}


def gem_pool(x, p: float):
    """Functional GeM over axis -2 (no gradient bookkeeping)."""
    return GeM().forward(np.asarray(x, dtype=float), {"p": np.asarray(float(p))})


def fd_check(primitive, params: Mapping[str, np.ndarray], x, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(g * forward(x))`` for a fixed random ``g``.
    Relative error per coordinate is ``|a - f| / max(|a|, |f|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ParameterError(f"step h={h} outside [1e-7, 1e-3]")
    x = np.array(x, dtype=np.float64)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    g = np.random.default_rng([seed, 0xFD]).standard_normal(np.shape(primitive.forward(x, params)))

    def objective():
        return float((g * primitive.forward(x, params)).sum())

    primitive.forward(x, params)
    dx, dparams = primitive.backward(g)
    worst = 0.0
    targets = [(x, dx)] + [(params[k], dparams[k]) for k in params if k in dparams]
    for arr, analytic in targets:
        analytic = np.asarray(analytic)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = objective()
            flat[i] = orig - h
            down = objective()
            flat[i] = orig
            f = (up - down) / (2 * h)
            a = float(analytic.reshape(-1)[i])
            worst = max(worst, abs(a - f) / max(abs(a), abs(f), 1e-8))
    return worst


class ParamStore:
    """Named parameters with gradient accumulators and Adam moment state."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None, trainable: Iterable[str] | None = None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        for k, v in (params or {}).items():
            self.add(k, v)
        self.trainable = set(self.params) if trainable is None else set(trainable)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if g.shape != self.params[k].shape:
                raise ContractError(f"gradient shape {g.shape} != parameter {k!r} shape {self.params[k].shape}")
            self.grads[k] += g

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update on the trainable parameters, in place."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    store.t += 1
    c1 = 1.0 - beta1**store.t
    c2 = 1.0 - beta2**store.t
    for name in store.params:
        if name not in store.trainable:
            continue
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()
    return store
