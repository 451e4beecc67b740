"""Descriptor network: input embedding, one adapter-augmented transformer
block, GeM pooling over tokens, linear projection and L2 normalization."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import diffcore as dc
from .errors import ContractError, NumericError

BLOCK_PARAMS = (
    "ln1.gamma", "ln1.beta",
    "attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo",
    "ln2.gamma", "ln2.beta",
    "mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2",
)
ADAPTER_PARAMS = ("adapter.W1", "adapter.b1", "adapter.W2", "adapter.b2", "adapter.s")
HEAD_PARAMS = ("embed.W", "embed.b", "gem.p", "proj.W")


@dataclass(frozen=True)
class EncoderConfig:
    d_in: int = 32
    dim: int = 32
    out_dim: int = 64
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    gem_p: float = 3.0
    adapter_scale: float = 0.5
    train_block: bool = False

    @property
    def adapter_hidden(self) -> int:
        return max(1, self.dim // 4)


class EncoderParams(dc.ParamStore):
    """All encoder weights plus the config they were built from.

    Only the adapter, its scale, the GeM exponent, the projection and the
    input embedding are trainable unless ``config.train_block`` is set.
    """

    def __init__(self, config: EncoderConfig, params):
        trainable = set(ADAPTER_PARAMS) | set(HEAD_PARAMS)
        if config.train_block:
            trainable |= set(BLOCK_PARAMS)
        super().__init__(params, trainable=trainable)
        self.config = config


def _sub(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def init_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderParams:
    rng = np.random.default_rng(seed)
    D, H, A = config.dim, config.dim * config.mlp_ratio, config.adapter_hidden

    def glorot(n_in, n_out):
        return rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))

    p = {
        "embed.W": glorot(config.d_in, D) * np.sqrt(config.d_in / 2.0),
        "embed.b": np.zeros(D),
        "ln1.gamma": np.ones(D), "ln1.beta": np.zeros(D),
        "attn.Wq": glorot(D, D), "attn.Wk": glorot(D, D),
        "attn.Wv": glorot(D, D), "attn.Wo": glorot(D, D),
        "ln2.gamma": np.ones(D), "ln2.beta": np.zeros(D),
        "mlp.W1": glorot(D, H), "mlp.b1": np.zeros(H),
        "mlp.W2": glorot(H, D), "mlp.b2": np.zeros(D),
        "adapter.W1": glorot(D, A), "adapter.b1": np.zeros(A),
        "adapter.W2": np.zeros((A, D)), "adapter.b2": np.zeros(D),
        "adapter.s": np.asarray(config.adapter_scale),
        "gem.p": np.asarray(config.gem_p),
        "proj.W": glorot(D, config.out_dim),
    }
    return EncoderParams(config, p)


class AdapterBlock(dc.Primitive):
    """z' = MHA(LN1(z)) + z;  out = MLP(LN2(z')) + s * Adapter(LN2(z')) + z'.

    With ``adapter=False`` the adapter branch is skipped entirely, giving the
    plain transformer block.
    """

    name = "adapter_block"
    param_names = BLOCK_PARAMS + ADAPTER_PARAMS

    def __init__(self, ln_eps: float = 1e-5, adapter: bool = True):
        self.ln1 = dc.LayerNorm(ln_eps)
        self.ln2 = dc.LayerNorm(ln_eps)
        self.attn = dc.SingleHeadAttention()
        self.mlp = dc.MLP2()
        self.adapter = dc.MLP2() if adapter else None
        self.scale = dc.ScaleBy()

    def forward(self, z, params):
        if z.ndim < 2 or z.shape[-1] != params["ln1.gamma"].shape[0]:
            raise ContractError(f"{self.name}: input shape {z.shape} does not match block width")
        z1 = self.attn.forward(self.ln1.forward(z, _sub(params, "ln1")), _sub(params, "attn")) + z
        u = self.ln2.forward(z1, _sub(params, "ln2"))
        out = self.mlp.forward(u, _sub(params, "mlp"))
        if self.adapter is not None:
            a = self.adapter.forward(u, {k: params["adapter." + k] for k in ("W1", "b1", "W2", "b2")})
            out = out + self.scale.forward(a, {"s": params["adapter.s"]})
        return out + z1

    def backward(self, dy):
        grads = {}

        def put(prefix, g):
            grads.update({f"{prefix}.{k}": v for k, v in g.items()})

        du, g = self.mlp.backward(dy)
        put("mlp", g)
        if self.adapter is not None:
            da, g = self.scale.backward(dy)
            put("adapter", g)
            du_a, g = self.adapter.backward(da)
            put("adapter", g)
            du = du + du_a
        dz1, g = self.ln2.backward(du)
        put("ln2", g)
        dz1 = dz1 + dy
        dln1, g = self.attn.backward(dz1)
        put("attn", g)
        dz, g = self.ln1.backward(dln1)
        put("ln1", g)
        return dz + dz1, grads


class Encoder(dc.Primitive):
    """Token matrix (..., T, d_in) -> unit descriptor (..., out_dim)."""

    name = "encoder"
    param_names = HEAD_PARAMS + BLOCK_PARAMS + ADAPTER_PARAMS

    def __init__(self, ln_eps: float = 1e-5, adapter: bool = True):
        self.embed = dc.Linear()
        self.block = AdapterBlock(ln_eps, adapter=adapter)
        self.gem = dc.GeM()
        self.proj = dc.Linear()
        self.norm = dc.L2Normalize()

    def forward(self, x, params):
        z = self.embed.forward(x, {"W": params["embed.W"], "b": params["embed.b"]})
        z = self.block.forward(z, params)
        if not np.all(np.isfinite(z)):
            # GeM's clamp would silently absorb NaN, so check before pooling
            raise NumericError("non-finite activations in encoder block")
        pooled = self.gem.forward(z, {"p": params["gem.p"]})
        W = params["proj.W"]
        proj = self.proj.forward(pooled, {"W": W, "b": np.zeros(W.shape[1])})
        if not np.all(np.isfinite(proj)):
            raise NumericError("non-finite activations in encoder")
        return self.norm.forward(proj)

    def backward(self, dy):
        dproj, _ = self.norm.backward(dy)
        dpooled, g = self.proj.backward(dproj)
        grads = {"proj.W": g["W"]}
        dz, g = self.gem.backward(dpooled)
        grads["gem.p"] = g["p"]
        dz, g = self.block.backward(dz)
        grads.update(g)
        dx, g = self.embed.backward(dz)
        grads["embed.W"], grads["embed.b"] = g["W"], g["b"]
        return dx, grads


def _tokens(img):
    return img.tokens if hasattr(img, "tokens") else np.asarray(img, dtype=np.float64)


def encode_batch(imgs, params: EncoderParams) -> np.ndarray:
    """Descriptors for a sequence of images (or token matrices), as rows.

    Images are encoded one at a time: batched BLAS calls may round
    differently with batch size, and a descriptor should not depend on the
    batch it was computed in.
    """
    if len(imgs) == 0:
        return np.zeros((0, params.config.out_dim))
    enc = Encoder(params.config.ln_eps)
    out = np.empty((len(imgs), params.config.out_dim))
    for i, im in enumerate(imgs):
        x = np.asarray(_tokens(im), dtype=np.float64)
        if x.shape[-1] != params.config.d_in:
            raise ContractError(f"encode: image {i} token width {x.shape[-1]} != d_in {params.config.d_in}")
        try:
            out[i] = enc.forward(x, params.params)
        except NumericError as e:
            raise NumericError(f"{e} (image index {i})") from e
    return out


def encode(img, params: EncoderParams) -> np.ndarray:
    return encode_batch([img], params)[0]


def config_dict(config: EncoderConfig) -> dict:
    return asdict(config)
