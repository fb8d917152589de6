"""Policy assembly: sensory encoder + memory path + diffusion head, with the
baseline/ablation variant roster.

Variant ids:
  full        tiered banks, consolidation, retrieval, gating
  markov      no memory path; the condition token is the sensory token
  fifo        single sliding-window bank, retrieval without gating
  simmerge    single similarity-merged bank, retrieval with gating
  no_tpe      full, temporal positional embeddings removed
  consol_add  full, consolidation encoder replaced by additive pooling
  gate_add    full, gate replaced by an elementwise mean

All variants share identical encoder/decoder parameters counts; only the
memory path differs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import memory as mem
from .autodiff import Tensor, no_grad
from .checkpoint import load_arrays, save_arrays
from .decoder import DenoiserParams, DiffusionSchedule, diffusion_loss, sample
from .encoder import C, SensoryModule
from .layers import collect_params

VARIANTS = ("full", "markov", "fifo", "simmerge", "no_tpe", "consol_add", "gate_add")


class ConfigError(ValueError):
    pass


@dataclass
class VariantSpec:
    variant_id: str
    t_s: int = mem.T_S_DEFAULT
    t_k: int = mem.T_K_DEFAULT
    n_sc: int = mem.N_SC_DEFAULT

    def __post_init__(self):
        if self.variant_id not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant_id!r}")

    @property
    def memory_mode(self):
        return {"markov": "none", "fifo": "fifo", "simmerge": "simmerge"}.get(
            self.variant_id, "full")

    @property
    def window_capacity(self):
        # baseline token budget matches the full model's combined capacity
        return self.t_s + self.t_k


class Policy:
    def __init__(self, spec, seed, frozen_seed=7):
        self.spec = spec
        rng = np.random.default_rng(seed)
        # fixed construction order keeps encoder/decoder draws identical
        # across variants for a given seed
        self.sensory = SensoryModule(rng, frozen_seed=frozen_seed)
        self.denoiser = DenoiserParams(rng)
        self.schedule = DiffusionSchedule()
        mode = self.spec.memory_mode
        self.consol = None
        self.retrieval = None
        self.gate = None
        if mode == "full":
            self.consol = mem.ConsolidationParams(
                rng, n_sc=spec.n_sc,
                use_tpe=spec.variant_id != "no_tpe",
                additive=spec.variant_id == "consol_add")
            self.retrieval = mem.RetrievalParams(rng, n_slots=spec.t_s + spec.t_k)
            self.gate = mem.GateParams(rng, additive=spec.variant_id == "gate_add")
        elif mode == "fifo":
            self.retrieval = mem.RetrievalParams(rng, n_slots=spec.window_capacity)
        elif mode == "simmerge":
            self.retrieval = mem.RetrievalParams(rng, n_slots=spec.window_capacity)
            self.gate = mem.GateParams(rng)

    # -- memory plumbing ---------------------------------------------------

    def new_bank(self):
        mode = self.spec.memory_mode
        if mode == "none":
            return None
        if mode == "full":
            return mem.MemoryBankState(t_s=self.spec.t_s, t_k=self.spec.t_k,
                                       n_sc=self.spec.n_sc, mode="tiered")
        return mem.MemoryBankState(t_s=self.spec.window_capacity, t_k=0,
                                   mode=mode)

    def condition(self, bank, f_o):
        """Condition token from the pre-append bank state."""
        mode = self.spec.memory_mode
        if mode == "none":
            return f_o
        f_or = mem.retrieve(bank, f_o, self.retrieval)
        if mode == "fifo":
            return f_or
        return mem.gate_fuse(f_o, f_or, self.gate)

    def append(self, bank, f_o_detached, step):
        if bank is not None:
            mem.append_sensory(bank, f_o_detached, step, self.consol)

    # -- action head -------------------------------------------------------

    NOISE_DRAWS = 8

    def loss(self, f_c, a0, rng):
        """Noise-prediction loss, averaged over NOISE_DRAWS (k, eps) draws
        per sample with stratified noise levels: replicate j draws its k
        from the j-th of NOISE_DRAWS equal slices of [1, K], so the
        marginal distribution over a window stays uniform while the
        variance of the gradient estimate drops sharply. One optimizer step
        still consumes exactly one window."""
        a0 = np.asarray(a0, dtype=np.float32)
        if a0.ndim == 3 and self.NOISE_DRAWS > 1:
            r = self.NOISE_DRAWS
            b = a0.shape[0]
            f_c = ad.concat([f_c] * r, axis=0)
            a0 = np.concatenate([a0] * r, axis=0)
            k_total = self.schedule.k_steps
            edges = np.linspace(1, k_total + 1, r + 1)
            ks = np.concatenate([
                rng.integers(int(edges[j]), max(int(edges[j + 1]), int(edges[j]) + 1), size=b)
                for j in range(r)])
            return diffusion_loss(f_c, a0, self.denoiser, self.schedule, rng, ks=ks)
        return diffusion_loss(f_c, a0, self.denoiser, self.schedule, rng)

    def sample_chunk(self, f_c, rng):
        with no_grad():
            return sample(f_c, self.denoiser, self.schedule, rng)

    # -- parameters and persistence ---------------------------------------

    def named_params(self):
        out = self.sensory.named_params("sensory")
        out.update(self.denoiser.named_params("denoiser"))
        if self.consol is not None:
            out.update(self.consol.named_params("consol"))
        if self.retrieval is not None:
            out.update(self.retrieval.named_params("retrieval"))
        if self.gate is not None:
            out.update(self.gate.named_params("gate"))
        return out

    def params(self):
        return collect_params(self.named_params())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_params().items()}

    def load_state_dict(self, arrays):
        named = self.named_params()
        missing = set(named) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint missing arrays: {sorted(missing)[:4]}...")
        for name, t in named.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != t.data.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()

    def save(self, path):
        save_arrays(self.state_dict(), path)

    def load(self, path):
        self.load_state_dict(load_arrays(path))


def build_variant(spec, seed, frozen_seed=7):
    return Policy(spec, seed, frozen_seed=frozen_seed)


# -- bank snapshot <-> checkpoint arrays -----------------------------------

_MODE_CODES = {"tiered": 0, "fifo": 1, "simmerge": 2}


def bank_to_arrays(bank):
    """Serialize a bank snapshot in the checkpoint array convention."""
    out = {"bank.meta": np.array([bank.t_s, bank.t_k, bank.n_sc,
                                  bank.total_appends, bank.consolidations,
                                  _MODE_CODES[bank.mode]], dtype=np.float32)}
    for tier_name, toks in (("stmb", bank.stmb), ("ltmb", bank.ltmb)):
        vecs = (np.concatenate([t.vector.data for t in toks], axis=0)
                if toks else np.zeros((0, C), np.float32))
        out[f"bank.{tier_name}.vectors"] = vecs
        out[f"bank.{tier_name}.birth_step"] = np.array([t.birth_step for t in toks], np.float32)
        out[f"bank.{tier_name}.latest_step"] = np.array([t.latest_step for t in toks], np.float32)
        out[f"bank.{tier_name}.merge_count"] = np.array([t.merge_count for t in toks], np.float32)
    return out


def bank_from_arrays(arrays):
    meta = arrays["bank.meta"]
    mode = {v: k for k, v in _MODE_CODES.items()}[int(meta[5])]
    bank = mem.MemoryBankState(t_s=int(meta[0]), t_k=int(meta[1]),
                               n_sc=int(meta[2]), mode=mode)
    bank.total_appends = int(meta[3])
    bank.consolidations = int(meta[4])
    for tier_name, tier in (("stmb", "short"), ("ltmb", "long")):
        vecs = arrays[f"bank.{tier_name}.vectors"]
        births = arrays[f"bank.{tier_name}.birth_step"]
        lasts = arrays[f"bank.{tier_name}.latest_step"]
        counts = arrays[f"bank.{tier_name}.merge_count"]
        toks = [mem.MemoryToken(Tensor(vecs[i:i + 1].copy()), int(births[i]),
                                int(lasts[i]), int(counts[i]), tier)
                for i in range(vecs.shape[0])]
        setattr(bank, tier_name, toks)
    return bank
