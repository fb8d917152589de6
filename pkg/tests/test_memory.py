"""Tiered memory bank: capacity, consolidation, merging, retrieval, gating."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tieredmem import autodiff as ad
from tieredmem import memory as mem
from tieredmem.autodiff import ContractError, Tensor
from tieredmem.encoder import C
from tieredmem.verify import verify_memory


def _tok(rng, scale=1.0):
    return Tensor((scale * rng.standard_normal((1, C))).astype(np.float32))


def _consol(seed=0, **kw):
    return mem.ConsolidationParams(np.random.default_rng(seed), **kw)


def test_memory_oracle_suite():
    # [DERIVED] capacity over 10k appends, consolidation arithmetic,
    # brute-force merge argmax over 1000 banks, FIFO reference queue
    failures = [(name, detail) for name, ok, detail in verify_memory() if not ok]
    assert not failures, failures


def test_consolidation_counts_and_provenance(rng):
    bank = mem.MemoryBankState()
    c = _consol()
    for t in range(7):
        mem.append_sensory(bank, _tok(rng), t, c)
    # [DERIVED] 7th append overflows T_s=6; oldest N_sc=3 become one summary
    assert len(bank.stmb) == 4 and len(bank.ltmb) == 1
    assert bank.consolidations == 1
    summary = bank.ltmb[0]
    assert summary.tier == "long"
    assert (summary.birth_step, summary.latest_step) == (0, 2)
    assert bank.stmb[0].birth_step == 3


def test_consolidate_requires_overflow(rng):
    bank = mem.MemoryBankState()
    c = _consol()
    for t in range(3):
        mem.append_sensory(bank, _tok(rng), t, c)
    with pytest.raises(ContractError):
        mem.consolidate(bank, c)


def test_append_rejects_graph_carrying_token(rng):
    bank = mem.MemoryBankState()
    live = Tensor(rng.standard_normal((1, C)).astype(np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        mem.append_sensory(bank, live, 0, _consol())
    derived = live * 2.0   # graph-carrying intermediate
    with pytest.raises(ContractError):
        mem.append_sensory(bank, derived, 0, _consol())


def test_consolidation_identity_hook(rng):
    # [DERIVED] with an identity layer and TPE off, the migrated token equals
    # the raw summary parameter
    c = _consol(use_tpe=False)
    bank = mem.MemoryBankState()
    bank.stmb = [mem.MemoryToken(_tok(rng), t, t) for t in range(7)]
    mem.consolidate(bank, c, layer_hook=lambda seq: seq)
    assert np.allclose(bank.ltmb[0].vector.data, c.summary.data, atol=1e-6)


def test_tpe_shifts_consolidation_input(rng):
    # paired run: identical sources, TPE on vs off must differ
    srcs = [_tok(rng) for _ in range(7)]
    outs = {}
    for use_tpe in (True, False):
        bank = mem.MemoryBankState()
        c = _consol(seed=5, use_tpe=use_tpe)
        for t, s in enumerate(srcs):
            mem.append_sensory(bank, Tensor(s.data.copy()), t, c)
        outs[use_tpe] = bank.ltmb[0].vector.data
    assert not np.allclose(outs[True], outs[False])


def test_additive_consolidation_oracle(rng):
    # [DERIVED] additive ablation = mean(sources+tpe) + summary+tpe
    srcs = [_tok(rng) for _ in range(7)]
    c = _consol(seed=9, additive=True)
    bank = mem.MemoryBankState()
    for t, s in enumerate(srcs):
        mem.append_sensory(bank, Tensor(s.data.copy()), t, c)
    seq = np.concatenate([s.data for s in srcs[:3]] + [c.summary.data]) + c.tpe.data[:4]
    expected = seq[:3].mean(axis=0, keepdims=True) + seq[3:4]
    assert np.allclose(bank.ltmb[0].vector.data, expected, atol=1e-5)


def test_t_k_zero_discards_summaries(rng):
    bank = mem.MemoryBankState(t_k=0)
    c = _consol()
    for t in range(100):
        mem.append_sensory(bank, _tok(rng), t, c)
    assert bank.ltmb == []
    assert len(bank.stmb) <= bank.t_s
    assert bank.consolidations > 0


def test_merge_tie_breaks_to_lowest_index():
    # [DERIVED] duplicate vectors give cosine 1.0 everywhere; argmax -> i=0
    v = np.ones((1, C), dtype=np.float32)
    tokens = [mem.MemoryToken(Tensor(v.copy()), t, t) for t in range(5)]
    i = mem._merge_adjacent(tokens)
    assert i == 0 and len(tokens) == 4
    assert tokens[0].merge_count == 2


def test_merge_weighted_mean():
    a = np.full((1, C), 2.0, dtype=np.float32)
    b = np.full((1, C), 8.0, dtype=np.float32)
    tokens = [mem.MemoryToken(Tensor(a), 0, 0, merge_count=3),
              mem.MemoryToken(Tensor(b), 1, 1, merge_count=1)]
    mem._merge_adjacent(tokens)
    # [DERIVED] (3*2 + 1*8) / 4 = 3.5
    assert np.allclose(tokens[0].vector.data, 3.5)
    assert tokens[0].merge_count == 4


def test_retrieve_empty_bank_returns_zero(rng):
    r = mem.RetrievalParams(np.random.default_rng(2))
    f_o = Tensor(rng.standard_normal((1, C)).astype(np.float32))
    out = mem.retrieve(mem.MemoryBankState(), f_o, r)
    assert np.array_equal(out.data, np.zeros((1, C), dtype=np.float32))


def test_retrieve_slot_overflow_raises(rng):
    r = mem.RetrievalParams(np.random.default_rng(2), n_slots=3)
    bank = mem.MemoryBankState()
    bank.stmb = [mem.MemoryToken(_tok(rng), t, t) for t in range(4)]
    with pytest.raises(ContractError):
        mem.retrieve(bank, _tok(rng), r)


def test_retrieve_orders_ltmb_before_stmb(rng):
    # retrieval consumes LTMB (older) then STMB; swapping tiers changes output
    r = mem.RetrievalParams(np.random.default_rng(2))
    f_o = _tok(rng)
    a_tok, b_tok = _tok(rng), _tok(rng)
    bank = mem.MemoryBankState()
    bank.ltmb = [mem.MemoryToken(a_tok, 0, 0, tier="long")]
    bank.stmb = [mem.MemoryToken(b_tok, 1, 1)]
    out1 = mem.retrieve(bank, f_o, r).data
    bank.ltmb = [mem.MemoryToken(b_tok, 0, 0, tier="long")]
    bank.stmb = [mem.MemoryToken(a_tok, 1, 1)]
    out2 = mem.retrieve(bank, f_o, r).data
    assert not np.allclose(out1, out2)


def test_gate_fuse_learned_and_additive(rng):
    f_o = _tok(rng)
    f_or = _tok(rng)
    g = mem.GateParams(np.random.default_rng(4))
    out = mem.gate_fuse(f_o, f_or, g).data
    lo = np.minimum(f_o.data, f_or.data) - 1e-6
    hi = np.maximum(f_o.data, f_or.data) + 1e-6
    # [DERIVED] convex combination stays inside the elementwise envelope
    assert np.all(out >= lo) and np.all(out <= hi)
    g_add = mem.GateParams(np.random.default_rng(4), additive=True)
    assert np.allclose(mem.gate_fuse(f_o, f_or, g_add).data,
                       0.5 * (f_o.data + f_or.data), atol=1e-6)


def test_snapshot_restore_round_trip(rng):
    bank = mem.MemoryBankState()
    c = _consol()
    for t in range(23):
        mem.append_sensory(bank, _tok(rng), t, c)
    snap = bank.snapshot()
    before = [(t.vector.data.copy(), t.birth_step, t.latest_step, t.merge_count, t.tier)
              for t in bank.all_tokens()]
    for t in range(23, 30):
        mem.append_sensory(bank, _tok(rng), t, c)
    bank.restore(snap)
    after = [(t.vector.data, t.birth_step, t.latest_step, t.merge_count, t.tier)
             for t in bank.all_tokens()]
    assert len(before) == len(after)
    for (va, *ra), (vb, *rb) in zip(before, after):
        assert np.array_equal(va, vb) and ra == rb


def test_detach_tokens_cuts_graphs(rng):
    bank = mem.MemoryBankState()
    c = _consol()
    for t in range(10):
        mem.append_sensory(bank, _tok(rng), t, c)
    assert any(tok.vector._parents for tok in bank.ltmb)  # consolidation graph
    bank.detach_tokens()
    assert all(not tok.vector._parents and not tok.vector.requires_grad
               for tok in bank.all_tokens())


@given(st.integers(0, 100_000), st.integers(1, 120))
def test_capacity_invariants_random_streams(seed, n_steps):
    rng = np.random.default_rng(seed)
    mode = ["tiered", "fifo", "simmerge"][seed % 3]
    bank = mem.MemoryBankState(mode=mode, t_s=6 if mode == "tiered" else 14,
                               t_k=8 if mode == "tiered" else 0)
    c = _consol() if mode == "tiered" else None
    for t in range(n_steps):
        mem.append_sensory(bank, _tok(rng), t, c)
    assert len(bank.stmb) <= bank.t_s
    assert len(bank.ltmb) <= max(bank.t_k, 0)
    assert bank.total_appends == n_steps
    births = [t.birth_step for t in bank.all_tokens()]
    assert births == sorted(births)
