"""Conditional DDPM action head.

Linear beta schedule, forward noising, a small FiLM-conditioned 1-D
convolutional encoder-decoder as the noise predictor, the reverse update, and
the noise-prediction MSE training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import C
from .layers import Linear, Mlp, param, sinusoidal_embedding

CHUNK_LEN = 8      # actions predicted per policy invocation
ACTION_DIM = 3
K_STEPS = 25
TIME_EMB_DIM = 32
COND_DIM = C + TIME_EMB_DIM
COND_HIDDEN = 128


@dataclass
class DiffusionSchedule:
    """Linear beta schedule with the derived per-step reverse coefficients.

    Arrays are indexed by k-1 for k in 1..K. sigma at k=1 is exactly 0, so
    the final reverse step is deterministic.
    """

    k_steps: int = K_STEPS
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    # Eq. (2)'s sigma is a free hyperparameter of the reverse update.  The
    # demonstrations are deterministic given the condition, so the injected
    # reverse noise only jitters the executed action across the +-0.5
    # discretization boundary; 0 selects the deterministic update.  sigmas
    # below still records the standard DDPM posterior std for reference.
    noise_scale: float = 0.0
    betas: np.ndarray = field(init=False)
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    recip_sqrt_alpha: np.ndarray = field(init=False)   # posterior scale
    gammas: np.ndarray = field(init=False)             # noise-prediction coefficient
    sigmas: np.ndarray = field(init=False)             # posterior std

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.k_steps)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        ab_prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        self.recip_sqrt_alpha = 1.0 / np.sqrt(self.alphas)
        self.gammas = self.betas / np.sqrt(1.0 - self.alpha_bars)
        self.sigmas = np.sqrt(self.betas * (1.0 - ab_prev) / (1.0 - self.alpha_bars))

    def _check_k(self, k):
        if not 1 <= k <= self.k_steps:
            raise ContractError(f"denoise step k={k} outside 1..{self.k_steps}")


def add_noise(a0, k, eps, sched, alpha_bar_override=None):
    """Forward process: sqrt(ab_k) * A0 + sqrt(1 - ab_k) * eps.

    alpha_bar_override is a test hook for the k -> 0 limit.
    """
    if alpha_bar_override is None:
        sched._check_k(k)
        ab = sched.alpha_bars[k - 1]
    else:
        ab = alpha_bar_override
    return np.sqrt(ab) * np.asarray(a0) + np.sqrt(1.0 - ab) * np.asarray(eps)


class DenoiserParams:
    """FiLM-conditioned 1-D conv encoder-decoder over the chunk axis.

    Two resolution levels (widths 32 / 64, kernel 3), a residual skip at the
    bottom level and a concat skip at the top. The final projection is
    zero-initialized so the untrained prediction is identically zero.
    """

    WIDTHS = (32, 64)
    KERNEL = 3

    def __init__(self, rng):
        w1, w2 = self.WIDTHS
        k = self.KERNEL
        self.conv_in = (param(rng, (k, ACTION_DIM, w1)), Tensor(np.zeros(w1, np.float32), requires_grad=True))
        self.conv_down = (param(rng, (k, w1, w2)), Tensor(np.zeros(w2, np.float32), requires_grad=True))
        self.conv_mid = (param(rng, (k, w2, w2)), Tensor(np.zeros(w2, np.float32), requires_grad=True))
        self.conv_up = (param(rng, (k, w2, w1)), Tensor(np.zeros(w1, np.float32), requires_grad=True))
        self.conv_dec = (param(rng, (k, 2 * w1, w1)), Tensor(np.zeros(w1, np.float32), requires_grad=True))
        self.conv_out = (Tensor(np.zeros((k, w1, ACTION_DIM), np.float32), requires_grad=True),
                         Tensor(np.zeros(ACTION_DIM, np.float32), requires_grad=True))
        # nonlinear condition projection: a linear FiLM head straight off the
        # raw condition cannot express the piecewise structure of the
        # behavior (e.g. direction-to-target); project once, share the trunk
        self.cond_proj = Mlp(rng, COND_DIM, COND_HIDDEN, COND_HIDDEN)
        # per-level FiLM generators from the projected condition
        self.film = [Linear(rng, COND_HIDDEN, 2 * w) for w in (w1, w2, w2, w1, w1)]

    def named_params(self, prefix="denoiser"):
        out = {}
        for name, (w, b) in [("conv_in", self.conv_in), ("conv_down", self.conv_down),
                             ("conv_mid", self.conv_mid), ("conv_up", self.conv_up),
                             ("conv_dec", self.conv_dec), ("conv_out", self.conv_out)]:
            out[f"{prefix}.{name}.w"] = w
            out[f"{prefix}.{name}.b"] = b
        out.update(self.cond_proj.named_params(f"{prefix}.cond_proj"))
        for i, lin in enumerate(self.film):
            out.update(lin.named_params(f"{prefix}.film{i}"))
        return out


def _film(x, cond, lin):
    """Scale/shift modulation; cond (..., COND_DIM), x (..., L, width)."""
    w = x.shape[-1]
    ss = lin(cond)
    scale = ss[..., :w]
    shift = ss[..., w:]
    if x.ndim == 3:
        scale = ad.reshape(scale, (scale.shape[0], 1, w))
        shift = ad.reshape(shift, (shift.shape[0], 1, w))
    return x * (1.0 + scale) + shift


def predict_noise(f_c, a_k, k, d):
    """Noise prediction.

    f_c: condition Tensor (1, C) or (B, 1, C); a_k: noisy chunk array or
    Tensor (m, A) / (B, m, A); k: int or (B,) ints. Returns a Tensor of the
    chunk shape.
    """
    x = a_k if isinstance(a_k, Tensor) else Tensor(np.asarray(a_k, dtype=np.float32))
    batched = x.ndim == 3
    t_emb = np.atleast_2d(sinusoidal_embedding(k, TIME_EMB_DIM))
    cond_vec = ad.reshape(f_c, (f_c.shape[0], C)) if batched else ad.reshape(f_c, (1, C))
    if t_emb.shape[0] == 1 and cond_vec.shape[0] > 1:
        t_emb = np.broadcast_to(t_emb, (cond_vec.shape[0], TIME_EMB_DIM))
    cond = d.cond_proj(ad.concat([cond_vec, Tensor(t_emb.copy())], axis=-1))

    h1 = ad.gelu(_film(ad.conv1d(x, *d.conv_in), cond, d.film[0]))
    h = ad.avg_pool_pairs(h1)
    h2 = ad.gelu(_film(ad.conv1d(h, *d.conv_down), cond, d.film[1]))
    h = ad.gelu(_film(ad.conv1d(h2, *d.conv_mid), cond, d.film[2])) + h2
    h = ad.gelu(_film(ad.conv1d(h, *d.conv_up), cond, d.film[3]))
    h = ad.upsample_pairs(h)
    h = ad.concat([h, h1], axis=-1)
    h = ad.gelu(_film(ad.conv1d(h, *d.conv_dec), cond, d.film[4]))
    return ad.conv1d(h, *d.conv_out)


def denoise_step(a_k, k, f_c, d, sched, rng, eps_model=None):
    """One reverse update. At k=1 the injected noise is zero by schedule."""
    sched._check_k(k)
    if eps_model is None:
        with ad.no_grad():
            eps_hat = predict_noise(f_c, a_k, k, d).data
    else:
        eps_hat = np.asarray(eps_model(a_k, k))
    mean = sched.recip_sqrt_alpha[k - 1] * (np.asarray(a_k) - sched.gammas[k - 1] * eps_hat)
    sigma = sched.sigmas[k - 1] * sched.noise_scale
    if sigma > 0.0:
        mean = mean + sigma * rng.standard_normal(mean.shape)
    return mean.astype(np.float32)


def sample(f_c, d, sched, rng):
    """Draw A_K ~ N(0, I), run the full reverse chain, clip to [-1, 1].

    Batched when f_c is (B, 1, C): returns (B, m, A).
    """
    batched = f_c.ndim == 3
    shape = ((f_c.shape[0], CHUNK_LEN, ACTION_DIM) if batched
             else (CHUNK_LEN, ACTION_DIM))
    a = rng.standard_normal(shape).astype(np.float32)
    for k in range(sched.k_steps, 0, -1):
        a = denoise_step(a, k, f_c, d, sched, rng)
    return np.clip(a, -1.0, 1.0)


def diffusion_loss(f_c, a0, d, sched, rng, ks=None):
    """Sample k ~ U[1, K] and eps ~ N(0, I); MSE between predicted and true
    noise. a0 may be (m, A) or batched (B, m, A) with per-sample k.
    ks overrides the uniform draw (used for stratified replicates; the
    caller is responsible for keeping the marginal distribution uniform)."""
    a0 = np.asarray(a0, dtype=np.float32)
    batched = a0.ndim == 3
    if batched:
        if ks is None:
            ks = rng.integers(1, sched.k_steps + 1, size=a0.shape[0])
        ab = sched.alpha_bars[ks - 1][:, None, None]
    else:
        ks = int(rng.integers(1, sched.k_steps + 1))
        ab = sched.alpha_bars[ks - 1]
    eps = rng.standard_normal(a0.shape).astype(np.float32)
    noisy = np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps
    pred = predict_noise(f_c, noisy.astype(np.float32), ks, d)
    return ad.mse(pred, eps)
