"""Streaming trainer: window layout, memory semantics, determinism, caching."""

import json

import numpy as np
import pytest

from tieredmem.data import generate_dataset
from tieredmem.envs import make_task
from tieredmem.policy import Policy, VariantSpec, build_variant
from tieredmem.trainer import (TrainConfig, eval_rollout, run_cell,
                               streaming_train)


@pytest.fixture(scope="module")
def small_dataset():
    eps, _ = generate_dataset(make_task("seqtap"), 3, seed=77)
    return eps


def test_window_layout_covers_episode(small_dataset, monkeypatch):
    # [DERIVED] an episode of length n is split into consecutive windows of
    # B=16 with a short tail window; every step appears exactly once
    seen = []
    orig = Policy.loss

    def spy(self, f_c, a0, rng):
        seen.append(np.asarray(a0).shape[0])
        return orig(self, f_c, a0, rng)

    monkeypatch.setattr(Policy, "loss", spy)
    streaming_train(small_dataset[:1], TrainConfig(epochs=1))
    n = len(small_dataset[0])
    expect = [min(16, n - s) for s in range(0, n, 16)]
    assert seen == expect
    assert sum(seen) == n


def test_retrieval_precedes_append(small_dataset, monkeypatch):
    # at the time the condition for step t is computed, the bank must hold
    # exactly the tokens of steps 0..t-1
    records = []
    orig = Policy.condition

    def spy(self, bank, f_o):
        records.append(None if bank is None else bank.total_appends)
        return orig(self, bank, f_o)

    monkeypatch.setattr(Policy, "condition", spy)
    streaming_train(small_dataset[:1], TrainConfig(epochs=1))
    n = len(small_dataset[0])
    assert records == list(range(n))


def test_bank_reset_between_episodes(small_dataset, monkeypatch):
    counts = []
    orig = Policy.condition

    def spy(self, bank, f_o):
        counts.append(bank.total_appends)
        return orig(self, bank, f_o)

    monkeypatch.setattr(Policy, "condition", spy)
    streaming_train(small_dataset[:2], TrainConfig(epochs=1))
    # the first condition of each episode sees an empty bank (episode order
    # within the epoch is shuffled, so locate the boundary by length)
    assert counts[0] == 0 and counts.count(0) == 2
    lens = {len(small_dataset[0]), len(small_dataset[1])}
    assert counts.index(0, 1) in lens


def test_training_is_deterministic(small_dataset):
    outs = []
    for _ in range(2):
        policy, rows = streaming_train(small_dataset, TrainConfig(epochs=2, seed=3))
        outs.append((
            [p.data.tobytes() for p in policy.params()],
            [(r.epoch, r.loss_mean) for r in rows],
        ))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_loss_decreases_from_untrained(small_dataset):
    _, rows = streaming_train(small_dataset, TrainConfig(epochs=6, seed=0))
    assert rows[0].loss_mean > 0.8      # starts near the untrained value 1.0
    assert rows[-1].loss_mean < rows[0].loss_mean


def test_variants_share_encoder_decoder_init():
    # paired-seed construction: ablations differ only in the memory pathway
    a = build_variant(VariantSpec("full"), seed=4)
    b = build_variant(VariantSpec("markov"), seed=4)
    na, nb = a.sensory.named_params(), b.sensory.named_params()
    assert sorted(na) == sorted(nb)
    for k in na:
        assert np.array_equal(na[k].data, nb[k].data), k
    da = {k: v for k, v in a.named_params().items() if k.startswith("denoiser")}
    db = {k: v for k, v in b.named_params().items() if k.startswith("denoiser")}
    assert sorted(da) == sorted(db)
    for k in da:
        assert np.array_equal(da[k].data, db[k].data), k


def test_encoder_gradients_flow_but_tokens_detach(small_dataset, monkeypatch):
    # the encoder trains through the current-step condition path only; stored
    # bank tokens never carry the encoder graph
    policy = build_variant(VariantSpec("full"), seed=1)
    banks = []
    orig = Policy.append

    def spy(self, bank, tok, t):
        assert not tok.requires_grad and not tok._parents
        banks.append(bank)
        return orig(self, bank, tok, t)

    monkeypatch.setattr(Policy, "append", spy)
    streaming_train(small_dataset[:1], TrainConfig(epochs=1), policy=policy)
    grads = [np.abs(p.grad).sum() for p in policy.sensory.named_params().values()
             if p.grad is not None]
    assert any(g > 0 for g in grads)


def test_eval_rollout_is_deterministic(small_dataset):
    policy, _ = streaming_train(small_dataset, TrainConfig(epochs=1, seed=2))
    task = make_task("seqtap")
    a = eval_rollout(policy, task, 3, seed=123)
    b = eval_rollout(policy, task, 3, seed=123)
    assert a == b


def test_run_cell_caches_results(tmp_path):
    kw = dict(n_episodes=2, epochs=1, n_trials=2)
    r1 = run_cell("seqtap", "markov", 0, tmp_path, **kw)
    marker = tmp_path / r1["key"] / "result.json"
    stamp = marker.stat().st_mtime_ns
    r2 = run_cell("seqtap", "markov", 0, tmp_path, **kw)
    assert r2 == r1
    assert marker.stat().st_mtime_ns == stamp   # untouched: served from cache
    assert json.loads(marker.read_text())["success_rate"] == r1["success_rate"]
