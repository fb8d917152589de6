"""Sensory distillation: frozen patch encoder, learnable readout, state MLP,
and the single-token attention fusion producing the sensory token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .layers import LayerNorm, Linear, Mlp, TransformerLayer, param

C = 64            # token width
P = 4             # patches per side
PATCH_PX = 8      # pixels per patch side
IMG_HW = P * PATCH_PX
D_S = 6           # proprioception dims
PATCH_DIM = PATCH_PX * PATCH_PX * 3


@dataclass
class ObservationFrame:
    """One policy input: 32x32 RGB image + normalized proprioception."""

    image: np.ndarray       # (32, 32, 3) uint8
    proprio: np.ndarray     # (6,) float32 in [-1, 1]
    step_index: int = 0

    def __post_init__(self):
        if self.image.shape != (IMG_HW, IMG_HW, 3) or self.image.dtype != np.uint8:
            raise ContractError(f"image must be {IMG_HW}x{IMG_HW}x3 uint8, got "
                                f"{self.image.shape} {self.image.dtype}")
        self.proprio = np.asarray(self.proprio, dtype=np.float32)
        if self.proprio.shape != (D_S,):
            raise ContractError(f"proprio must have length {D_S}")
        if np.any(np.abs(self.proprio) > 1.0 + 1e-6):
            raise ContractError("proprio entries must lie in [-1, 1]")


class PatchEncoderParams:
    """Frozen random linear patch projection (stand-in for a pretrained backbone).

    Never touched by the optimizer; the projection is fully determined by the
    seed, so its bytes are identical before and after any training run.
    """

    def __init__(self, seed=7):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.proj = (rng.standard_normal((PATCH_DIM, C)) / np.sqrt(PATCH_DIM)).astype(np.float32)

    def checksum(self):
        return int(np.frombuffer(self.proj.tobytes(), dtype=np.uint32).sum())


def _patchify(images):
    """(B, 32, 32, 3) uint8 -> (B, 16, 192) float32 scaled to [0, 1]."""
    b = images.shape[0]
    x = images.astype(np.float32) / 255.0
    x = x.reshape(b, P, PATCH_PX, P, PATCH_PX, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, P * P, PATCH_DIM)


def encode_patches(frame, p):
    """Project one frame into P^2 patch tokens. Output carries no gradient."""
    feats = _patchify(frame.image[None])[0] @ p.proj
    return Tensor(feats)


def encode_patches_batch(images, p):
    """(B, 32, 32, 3) uint8 -> constant Tensor (B, 16, C)."""
    return Tensor(_patchify(images) @ p.proj)


class ReadoutParams:
    """Learnable readout token + one transformer layer querying the patches."""

    def __init__(self, rng):
        # Small init: with fan-in scale the token starts at norm ~8 and drowns
        # the ~0.2-norm attention output in the LN1(token + att) residual, so
        # the scene-dependent signal is <2% of the readout feature.
        self.token = param(rng, (1, C), scale=0.02)
        self.wq = param(rng, (C, C))
        self.wk = param(rng, (C, C))
        self.wv = param(rng, (C, C))
        self.wo = param(rng, (C, C))
        self.ln1 = LayerNorm(C)
        self.ln2 = LayerNorm(C)
        self.mlp = Mlp(rng, C, 2 * C, C)

    def named_params(self, prefix="readout"):
        out = {f"{prefix}.token": self.token, f"{prefix}.wq": self.wq,
               f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv,
               f"{prefix}.wo": self.wo}
        out.update(self.ln1.named_params(f"{prefix}.ln1"))
        out.update(self.ln2.named_params(f"{prefix}.ln2"))
        out.update(self.mlp.named_params(f"{prefix}.mlp"))
        return out


def distill(patches, r):
    """Readout token cross-attends over patch tokens through one layer.

    patches: (P^2, C) or batched (B, P^2, C); returns (1, C) / (B, 1, C).
    """
    batched = patches.ndim == 3
    tok = r.token
    if batched:
        b = patches.shape[0]
        tok = ad.reshape(tok, (1, 1, C)) + Tensor(np.zeros((b, 1, C), dtype=np.float32))
    q = ad.matmul(tok, r.wq)
    k = ad.matmul(patches, r.wk)
    v = ad.matmul(patches, r.wv)
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(C))
    att = ad.matmul(ad.matmul(ad.softmax_rows(scores), v), r.wo)
    h = r.ln1(tok + att)
    return r.ln2(h + r.mlp(h))


class StateMLPParams:
    """Proprioception embedding: D_s -> C -> C with GELU."""

    def __init__(self, rng):
        self.mlp = Mlp(rng, D_S, C, C)

    def named_params(self, prefix="state_mlp"):
        return self.mlp.named_params(prefix)


def embed_state(proprio, s):
    """proprio: (D_s,) or (B, D_s) -> Tensor (1, C) / (B, 1, C)."""
    arr = np.asarray(proprio, dtype=np.float32)
    if arr.ndim == 1:
        if arr.shape != (D_S,):
            raise ContractError(f"proprio must have length {D_S}")
        x = Tensor(arr[None, :])
        return s.mlp(x)
    x = Tensor(arr[:, None, :])
    return s.mlp(x)


class FusionParams:
    """Query/key/value projections plus the output layer norm."""

    def __init__(self, rng):
        self.wq = param(rng, (C, C))
        self.wk = param(rng, (C, C))
        # Larger value-path init: at fan-in scale the state token contributes
        # ~1.4 norm against the readout's 8.0 in LN(f_s@Wv + f_r), leaving the
        # policy too insensitive to exact agent position for turn/tap timing.
        self.wv = param(rng, (C, C), scale=0.5)
        self.ln = LayerNorm(C)

    def named_params(self, prefix="fusion"):
        out = {f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}
        out.update(self.ln.named_params(f"{prefix}.ln"))
        return out


def fuse(f_r, f_s, f):
    """Attention fusion of the visual readout (query) with the state token
    (key and value), residual into the readout, then layer norm.

    Written literally: with a single key the softmax over one logit is
    identically 1, so this equals LN(f_s @ Wv + f_r).
    """
    q = ad.matmul(f_r, f.wq)
    k = ad.matmul(f_s, f.wk)
    v = ad.matmul(f_s, f.wv)
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(C))
    att = ad.matmul(ad.softmax_rows(scores), v)
    return f.ln(att + f_r)


def fuse_simplified(f_r, f_s, f):
    """Algebraically reduced form of fuse(); oracle for the degeneracy test."""
    return f.ln(ad.matmul(f_s, f.wv) + f_r)


class SensoryModule:
    """Bundles the full observation -> sensory-token pipeline."""

    def __init__(self, rng, frozen_seed=7):
        self.patch = PatchEncoderParams(seed=frozen_seed)
        self.readout = ReadoutParams(rng)
        self.state_mlp = StateMLPParams(rng)
        self.fusion = FusionParams(rng)

    def forward(self, frame):
        patches = encode_patches(frame, self.patch)
        f_r = distill(patches, self.readout)
        f_s = embed_state(frame.proprio, self.state_mlp)
        return fuse(f_r, f_s, self.fusion)

    def forward_batch(self, images, proprios, patch_feats=None):
        """images (B,32,32,3) uint8, proprios (B,6) -> (B, 1, C).

        patch_feats: optional precomputed (B, 16, C) features (the frozen
        projection is input-independent of training, so callers may cache it
        or inject features from an external backbone).
        """
        if patch_feats is None:
            patches = encode_patches_batch(images, self.patch)
        else:
            patches = Tensor(np.asarray(patch_feats, dtype=np.float32))
        f_r = distill(patches, self.readout)
        f_s = embed_state(proprios, self.state_mlp)
        return fuse(f_r, f_s, self.fusion)

    def named_params(self, prefix="sensory"):
        out = {}
        out.update(self.readout.named_params(f"{prefix}.readout"))
        out.update(self.state_mlp.named_params(f"{prefix}.state_mlp"))
        out.update(self.fusion.named_params(f"{prefix}.fusion"))
        return out
