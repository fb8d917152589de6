"""Tiered memory: short/long-term token banks, consolidation, similarity
merging, temporal-encoder retrieval and gate fusion.

The bank is single-owner mutable state (one per rollout or training stream).
Baseline behaviors (plain FIFO window, similarity-merge-only) live behind the
``mode`` switch so every policy variant shares this implementation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .encoder import C
from .layers import TransformerLayer, param

T_S_DEFAULT = 6
T_K_DEFAULT = 8
N_SC_DEFAULT = 3


@dataclass
class MemoryToken:
    vector: Tensor            # (1, C)
    birth_step: int
    latest_step: int
    merge_count: int = 1
    tier: str = "short"


@dataclass
class MemoryBankState:
    """STMB + LTMB with capacity bookkeeping.

    mode "tiered": consolidation + merging (the full mechanism).
    mode "fifo": single sliding window of size t_s, oldest evicted.
    mode "simmerge": single bank of size t_s, overflow resolved by merging
    the most similar adjacent pair.
    """

    t_s: int = T_S_DEFAULT
    t_k: int = T_K_DEFAULT
    n_sc: int = N_SC_DEFAULT
    mode: str = "tiered"
    stmb: list = field(default_factory=list)
    ltmb: list = field(default_factory=list)
    total_appends: int = 0
    consolidations: int = 0

    def clear(self):
        self.stmb = []
        self.ltmb = []
        self.total_appends = 0
        self.consolidations = 0

    def all_tokens(self):
        """LTMB then STMB, each oldest first."""
        return self.ltmb + self.stmb

    def detach_tokens(self):
        """Cut graph linkage of every stored token (batch boundary)."""
        for tok in self.stmb + self.ltmb:
            tok.vector = tok.vector.detach()

    def snapshot(self):
        """Opaque bit-exact copy (token values are detached numpy data)."""
        def pack(toks):
            return [(t.vector.data.copy(), t.birth_step, t.latest_step,
                     t.merge_count, t.tier) for t in toks]
        return {
            "t_s": self.t_s, "t_k": self.t_k, "n_sc": self.n_sc, "mode": self.mode,
            "stmb": pack(self.stmb), "ltmb": pack(self.ltmb),
            "total_appends": self.total_appends, "consolidations": self.consolidations,
        }

    def restore(self, snap):
        def unpack(rows):
            return [MemoryToken(Tensor(v.copy()), b, l, m, tier)
                    for v, b, l, m, tier in rows]
        self.t_s, self.t_k, self.n_sc = snap["t_s"], snap["t_k"], snap["n_sc"]
        self.mode = snap["mode"]
        self.stmb = unpack(snap["stmb"])
        self.ltmb = unpack(snap["ltmb"])
        self.total_appends = snap["total_appends"]
        self.consolidations = snap["consolidations"]


class ConsolidationParams:
    """Temporal positional embeddings, summary token and one causal layer."""

    def __init__(self, rng, n_sc=N_SC_DEFAULT, use_tpe=True, additive=False):
        self.n_sc = n_sc
        self.use_tpe = use_tpe
        self.additive = additive   # ablation: mean-pool instead of the causal layer
        self.tpe = param(rng, (n_sc + 1, C), scale=0.02)
        self.summary = param(rng, (1, C), scale=0.02)
        self.layer = TransformerLayer(rng, C, causal=True)

    def named_params(self, prefix="consol"):
        out = {f"{prefix}.tpe": self.tpe, f"{prefix}.summary": self.summary}
        out.update(self.layer.named_params(f"{prefix}.layer"))
        return out


class RetrievalParams:
    """Slot positional embeddings, 2-layer causal temporal encoder, and a
    cross-attention block whose query is the current sensory token."""

    def __init__(self, rng, n_slots=T_S_DEFAULT + T_K_DEFAULT, depth=2):
        self.n_slots = n_slots
        self.pos = param(rng, (n_slots, C), scale=0.02)
        self.encoder = [TransformerLayer(rng, C, causal=True) for _ in range(depth)]
        self.wq = param(rng, (C, C))
        self.wk = param(rng, (C, C))
        self.wv = param(rng, (C, C))

    def named_params(self, prefix="retrieval"):
        out = {f"{prefix}.pos": self.pos, f"{prefix}.wq": self.wq,
               f"{prefix}.wk": self.wk, f"{prefix}.wv": self.wv}
        for i, layer in enumerate(self.encoder):
            out.update(layer.named_params(f"{prefix}.enc{i}"))
        return out


class GateParams:
    """sigmoid(Linear([F_O ; F_OR])) -> elementwise gate in (0, 1)^C."""

    def __init__(self, rng, additive=False):
        self.additive = additive   # ablation: plain elementwise mean
        self.w = param(rng, (2 * C, C))
        self.b = Tensor(np.zeros((C,), dtype=np.float32), requires_grad=True)

    def named_params(self, prefix="gate"):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


# -- bank operations -------------------------------------------------------


def _cosine(u, v):
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v / (nu * nv))


def append_sensory(bank, token, step, c):
    """Append a detached sensory token to the short-term bank, consolidating
    (or evicting/merging, per mode) on overflow."""
    if token.requires_grad or token._parents:
        raise ContractError("append_sensory requires a detached token")
    bank.stmb.append(MemoryToken(token, birth_step=step, latest_step=step, tier="short"))
    bank.total_appends += 1
    if bank.mode == "tiered":
        if len(bank.stmb) > bank.t_s:
            consolidate(bank, c)
    elif bank.mode == "fifo":
        if len(bank.stmb) > bank.t_s:
            bank.stmb.pop(0)
    elif bank.mode == "simmerge":
        if len(bank.stmb) > bank.t_s:
            _merge_adjacent(bank.stmb)
    else:
        raise ContractError(f"unknown bank mode {bank.mode!r}")


def consolidate(bank, c, layer_hook=None):
    """Compress the oldest N_sc short tokens into one long-tier token.

    The sources plus a learnable summary token (appended last, so the causal
    mask lets it see all of them) run through the causal layer; the summary
    position's output migrates to the LTMB. layer_hook replaces the causal
    layer in tests (e.g. identity pass-through).
    """
    if len(bank.stmb) <= bank.t_s:
        raise ContractError("consolidate requires an overflowing short-term bank")
    n = c.n_sc
    sources = bank.stmb[:n]
    seq = ad.concat([t.vector for t in sources] + [c.summary], axis=0)
    if c.use_tpe:
        seq = seq + c.tpe[: n + 1]
    if c.additive:
        out = ad.mean_axis(seq[:n], axis=0, keepdims=True) + seq[n:n + 1]
    else:
        layer = layer_hook if layer_hook is not None else c.layer
        out = layer(seq)[n:n + 1]
    new_tok = MemoryToken(out, birth_step=sources[0].birth_step,
                          latest_step=sources[-1].latest_step, tier="long")
    bank.stmb = bank.stmb[n:]
    bank.consolidations += 1
    if bank.t_k > 0:
        bank.ltmb.append(new_tok)
        if len(bank.ltmb) > bank.t_k:
            merge_ltmb(bank)
    # t_k == 0: no long-term store, the summary is dropped


def _merge_adjacent(tokens):
    """Merge the most cosine-similar adjacent pair in-place (ties: lowest i)."""
    vecs = [t.vector.data.reshape(-1) for t in tokens]
    sims = [_cosine(vecs[i], vecs[i + 1]) for i in range(len(tokens) - 1)]
    i = int(np.argmax(sims))   # argmax takes the first of tied maxima
    a, b = tokens[i], tokens[i + 1]
    total = a.merge_count + b.merge_count
    merged_vec = (a.vector * (a.merge_count / total)) + (b.vector * (b.merge_count / total))
    tokens[i] = MemoryToken(merged_vec,
                            birth_step=min(a.birth_step, b.birth_step),
                            latest_step=max(a.latest_step, b.latest_step),
                            merge_count=total, tier=a.tier)
    del tokens[i + 1]
    return i


def merge_ltmb(bank):
    """Shrink the long-term bank by one via adjacent-similarity merging."""
    if len(bank.ltmb) <= bank.t_k:
        raise ContractError("merge_ltmb requires an overflowing long-term bank")
    return _merge_adjacent(bank.ltmb)


def retrieve(bank, f_o, r):
    """Encode the current memory contents and cross-attend with the sensory
    token as query. Empty bank -> zero vector."""
    tokens = bank.all_tokens()
    if not tokens:
        return Tensor(np.zeros((1, C), dtype=np.float32))
    seq = ad.concat([t.vector for t in tokens], axis=0)
    n = seq.shape[0]
    if n > r.n_slots:
        raise ContractError(f"bank holds {n} tokens but only {r.n_slots} slots exist")
    seq = seq + r.pos[:n]
    for layer in r.encoder:
        seq = layer(seq)
    q = ad.matmul(f_o, r.wq)
    k = ad.matmul(seq, r.wk)
    v = ad.matmul(seq, r.wv)
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(C))
    return ad.matmul(ad.softmax_rows(scores), v)


def gate_fuse(f_o, f_or, g):
    """F_C = gate * F_O + (1 - gate) * F_OR with a learned sigmoid gate."""
    if g.additive:
        return (f_o + f_or) * 0.5
    z = ad.concat([f_o, f_or], axis=-1)
    gate = ad.sigmoid(ad.matmul(z, g.w) + g.b)
    return gate * f_o + (1.0 - gate) * f_or
