"""Small learnable building blocks shared by the encoder, memory and decoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


def param(rng, shape, scale=None, dtype=np.float32):
    """Gaussian-initialized trainable tensor; fan-in scaling by default."""
    if scale is None:
        fan_in = shape[0] if len(shape) == 1 else int(np.prod(shape[:-1]))
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor((rng.standard_normal(shape) * scale).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, zero_init=False):
        if zero_init:
            self.w = zeros_param((d_in, d_out))
        else:
            self.w = param(rng, (d_in, d_out))
        self.b = zeros_param((d_out,))

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b

    def named_params(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, d):
        self.gain = ones_param((d,))
        self.bias = zeros_param((d,))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias)

    def named_params(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class Mlp:
    """Two-layer perceptron with GELU."""

    def __init__(self, rng, d_in, d_hidden, d_out):
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x):
        return self.fc2(ad.gelu(self.fc1(x)))

    def named_params(self, prefix):
        return {**self.fc1.named_params(f"{prefix}.fc1"),
                **self.fc2.named_params(f"{prefix}.fc2")}


def attention(q, k, v, causal=False):
    """Single-head scaled dot-product attention.

    q: (..., Lq, d), k/v: (..., Lk, d). With causal=True, position i attends
    to j <= i (requires Lq == Lk).
    """
    d = q.shape[-1]
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(d))
    if causal:
        lq, lk = scores.shape[-2], scores.shape[-1]
        mask = np.triu(np.full((lq, lk), NEG_INF, dtype=scores.data.dtype), k=1)
        scores = scores + Tensor(mask)
    return ad.matmul(ad.softmax_rows(scores), v)


class TransformerLayer:
    """Post-LN transformer encoder layer, single head.

    h = LN1(x + proj(attn(x))); out = LN2(h + mlp(h)).
    """

    def __init__(self, rng, d, causal=False, mlp_hidden=None):
        self.causal = causal
        self.wq = param(rng, (d, d))
        self.wk = param(rng, (d, d))
        self.wv = param(rng, (d, d))
        self.wo = param(rng, (d, d))
        self.ln1 = LayerNorm(d)
        self.ln2 = LayerNorm(d)
        self.mlp = Mlp(rng, d, mlp_hidden or 2 * d, d)

    def __call__(self, x):
        q = ad.matmul(x, self.wq)
        k = ad.matmul(x, self.wk)
        v = ad.matmul(x, self.wv)
        att = ad.matmul(attention(q, k, v, causal=self.causal), self.wo)
        h = self.ln1(x + att)
        return self.ln2(h + self.mlp(h))

    def named_params(self, prefix):
        out = {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
               f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo}
        out.update(self.ln1.named_params(f"{prefix}.ln1"))
        out.update(self.ln2.named_params(f"{prefix}.ln2"))
        out.update(self.mlp.named_params(f"{prefix}.mlp"))
        return out


def sinusoidal_embedding(k, dim):
    """Standard sin/cos timestep embedding for integer step k (numpy array)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(k, dtype=np.float64).reshape(-1, 1) * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    return emb.astype(np.float32)


def collect_params(named):
    """Deterministically ordered parameter list from a name->Tensor dict."""
    return [named[k] for k in sorted(named)]
