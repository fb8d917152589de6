"""Sensory distillation: frozen backbone, locality, fusion degeneracy."""

import numpy as np
import pytest

from tieredmem import autodiff as ad
from tieredmem.autodiff import ContractError, Tensor
from tieredmem.encoder import (C, D_S, FusionParams, ObservationFrame,
                               PatchEncoderParams, SensoryModule, _patchify,
                               encode_patches, fuse, fuse_simplified)


def _frame(rng):
    return ObservationFrame(
        image=rng.integers(0, 256, (32, 32, 3), dtype=np.uint8),
        proprio=rng.uniform(-1, 1, D_S).astype(np.float32))


def test_frozen_projection_is_seed_deterministic():
    # [TRIVIAL] same seed -> identical weights; different seed -> different
    a, b, c = PatchEncoderParams(seed=7), PatchEncoderParams(seed=7), PatchEncoderParams(seed=8)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert np.array_equal(a.proj, b.proj)


def test_patchify_locality_oracle(rng):
    # [DERIVED] one changed pixel perturbs exactly one of the 16 patch rows
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    base = _patchify(img[None])[0]
    img2 = img.copy()
    img2[9, 20] = img2[9, 20] ^ 255  # row 9 -> patch row 1, col 20 -> patch col 2
    delta = _patchify(img2[None])[0] - base
    changed = np.nonzero(np.abs(delta).sum(axis=1))[0]
    assert list(changed) == [1 * 4 + 2]


def test_encode_patches_shape_and_scale(rng):
    frame = _frame(rng)
    out = encode_patches(frame, PatchEncoderParams())
    assert out.data.shape == (16, C)
    assert not out.requires_grad
    # inputs are /255-scaled: an all-black and all-white image differ boundedly
    black = ObservationFrame(np.zeros((32, 32, 3), np.uint8), frame.proprio)
    assert np.isfinite(encode_patches(black, PatchEncoderParams()).data).all()


def test_observation_frame_validation(rng):
    with pytest.raises(ContractError):
        ObservationFrame(np.zeros((16, 16, 3), np.uint8), np.zeros(D_S, np.float32))
    with pytest.raises(ContractError):
        ObservationFrame(np.zeros((32, 32, 3), np.float32), np.zeros(D_S, np.float32))
    with pytest.raises(ContractError):
        ObservationFrame(np.zeros((32, 32, 3), np.uint8), np.zeros(D_S + 1, np.float32))


def test_fuse_equals_simplified_oracle(rng):
    # [DERIVED] softmax over a single logit is identically 1, so the literal
    # attention path must equal LN(f_s @ Wv + f_r)
    f = FusionParams(rng)
    for _ in range(50):
        f_r = Tensor(rng.standard_normal((1, C)).astype(np.float32))
        f_s = Tensor(rng.standard_normal((1, C)).astype(np.float32))
        a = fuse(f_r, f_s, f).data
        b = fuse_simplified(f_r, f_s, f).data
        assert np.allclose(a, b, atol=1e-5)


def test_fuse_query_key_grads_vanish(rng):
    # [DERIVED] the constant softmax kills all gradient through W_Q and W_K
    f = FusionParams(rng)
    f_r = Tensor(rng.standard_normal((1, C)).astype(np.float32), requires_grad=True)
    f_s = Tensor(rng.standard_normal((1, C)).astype(np.float32), requires_grad=True)
    loss = ad.sum_all(fuse(f_r, f_s, f))
    loss.backward()
    assert np.allclose(f.wq.grad, 0.0)
    assert np.allclose(f.wk.grad, 0.0)
    assert not np.allclose(f.wv.grad, 0.0)


def test_forward_batch_matches_single(rng):
    mod = SensoryModule(np.random.default_rng(3))
    frames = [_frame(rng) for _ in range(4)]
    singles = np.concatenate([mod.forward(fr).data for fr in frames])
    batch = mod.forward_batch(np.stack([fr.image for fr in frames]),
                              np.stack([fr.proprio for fr in frames])).data
    assert batch.shape == (4, 1, C)
    assert np.allclose(batch, singles[:, None, :] if singles.ndim == 2 else singles,
                       atol=1e-5)


def test_forward_batch_feature_injection(rng):
    # cached frozen features must reproduce the raw-pixel path exactly
    mod = SensoryModule(np.random.default_rng(3))
    images = rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8)
    proprios = rng.uniform(-1, 1, (3, D_S)).astype(np.float32)
    feats = (_patchify(images) @ mod.patch.proj).astype(np.float32)
    a = mod.forward_batch(images, proprios).data
    b = mod.forward_batch(images, proprios, patch_feats=feats).data
    assert np.allclose(a, b, atol=1e-6)


def test_sensory_output_is_single_token(rng):
    mod = SensoryModule(np.random.default_rng(1))
    out = mod.forward(_frame(rng))
    assert out.data.shape == (1, C)
    assert out.requires_grad
