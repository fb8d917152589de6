"""Streaming training, closed-loop evaluation, and the experiment grid.

Training follows the chronological single-episode regime: each batch is a
consecutive window of one episode, the memory bank is populated in step
order (retrieval before the step's token is appended), consolidation runs on
detached tokens, and one optimizer step is taken per window on the mean
window loss. The bank is cleared between episodes.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, no_grad
from .data import generate_dataset
from .decoder import CHUNK_LEN
from .encoder import _patchify
from .envs import check_success, make_task, proprio_of, render, step
from .policy import Policy, VariantSpec, build_variant


@dataclass
class TrainConfig:
    batch_size: int = 16
    chunk: int = CHUNK_LEN
    epochs: int = 30
    lr: float = 1e-4
    seed: int = 0
    variant: str = "full"
    t_s: int = 6
    t_k: int = 8
    n_sc: int = 3
    eval_cadence: int = 0    # epochs between mid-training evals; 0 = final only
    m_exec: int = 4          # re-planning horizon during rollout

    def variant_spec(self):
        return VariantSpec(self.variant, t_s=self.t_s, t_k=self.t_k, n_sc=self.n_sc)


@dataclass
class MetricsRow:
    epoch: int
    variant: str
    task: str
    loss_mean: float
    success_rate: float = -1.0
    subtask_rates: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_json(self):
        return json.dumps(asdict(self))


def _episode_features(episodes, patch_params):
    """Frozen patch features per episode (training-invariant, cached)."""
    return [(_patchify(ep.images) @ patch_params.proj).astype(np.float32)
            for ep in episodes]


def streaming_train(episodes, config, policy=None, metrics_path=None,
                    task_id=None, on_epoch=None):
    """Train per the streaming regime; returns (policy, metrics rows)."""
    if not episodes:
        raise ValueError("streaming_train needs a nonempty dataset")
    if policy is None:
        policy = build_variant(config.variant_spec(), config.seed)
    task_id = task_id or episodes[0].task_id
    opt = Adam(policy.params(), lr=config.lr, beta2=0.99)
    rng = np.random.default_rng(config.seed + 101)
    feats = _episode_features(episodes, policy.sensory.patch)
    b = config.batch_size
    rows = []
    t0 = time.time()
    mf = open(metrics_path, "a") if metrics_path else None
    try:
        for epoch in range(config.epochs):
            losses = []
            # visit episodes in a fresh order each epoch (windows stay
            # chronological inside an episode): consecutive windows from one
            # episode are highly correlated, and a fixed episode order makes
            # the gradient stream needlessly non-stationary
            order = rng.permutation(len(episodes))
            for idx in order:
                ep, ep_feats = episodes[idx], feats[idx]
                n = len(ep)
                if n < 1:
                    continue
                bank = policy.new_bank()
                for start in range(0, n, b):
                    end = min(start + b, n)
                    f_o = policy.sensory.forward_batch(
                        ep.images[start:end], ep.proprios[start:end],
                        patch_feats=ep_feats[start:end])
                    conds = []
                    for i, t in enumerate(range(start, end)):
                        f_o_t = f_o[i]
                        conds.append(ad.reshape(policy.condition(bank, f_o_t),
                                                (1, 1, -1)))
                        policy.append(bank, f_o_t.detach(), t)
                    f_c = ad.concat(conds, axis=0)
                    a0 = np.stack([ep.chunk_target(t, config.chunk)
                                   for t in range(start, end)])
                    loss = policy.loss(f_c, a0, rng)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    if bank is not None:
                        bank.detach_tokens()
                    losses.append(loss.item())
            row = MetricsRow(epoch=epoch, variant=config.variant, task=task_id,
                             loss_mean=float(np.mean(losses)),
                             wall_clock=time.time() - t0)
            if config.eval_cadence and (epoch + 1) % config.eval_cadence == 0:
                stats = eval_rollout(policy, make_task(task_id), 20,
                                     seed=config.seed + 900)
                row.success_rate = stats["success_rate"]
                row.subtask_rates = stats["subtask_rates"]
            rows.append(row)
            if mf:
                mf.write(row.to_json() + "\n")
                mf.flush()
            if on_epoch:
                on_epoch(row)
    finally:
        if mf:
            mf.close()
    return policy, rows


def eval_rollout(policy, task, n_trials, seed, m_exec=4):
    """Closed-loop evaluation over n_trials seeds (lockstep-batched).

    Each trial owns a fresh bank and environment; the sensory token is
    appended every step, a new chunk is sampled every m_exec steps, and the
    first m_exec actions of each chunk are executed.
    """
    rng = np.random.default_rng(seed)
    trial_seeds = [seed * 1000 + i for i in range(n_trials)]
    states = [task.reset(s) for s in trial_seeds]
    banks = [policy.new_bank() for _ in range(n_trials)]
    queues = [None] * n_trials
    with no_grad():
        for t in range(task.max_len):
            images = np.stack([render(st) for st in states])
            proprios = np.stack([proprio_of(st) for st in states])
            f_o = policy.sensory.forward_batch(images, proprios)
            if t % m_exec == 0:
                conds = [ad.reshape(policy.condition(banks[i], f_o[i]), (1, 1, -1))
                         for i in range(n_trials)]
                f_c = ad.concat(conds, axis=0)
                chunks = policy.sample_chunk(f_c, rng)
                queues = [chunks[i] for i in range(n_trials)]
            for i in range(n_trials):
                policy.append(banks[i], f_o[i].detach(), t)
                states[i] = step(task, states[i], queues[i][t % m_exec])
    succ, bitmaps = [], []
    for st in states:
        ok, bitmap = check_success(st, task)
        succ.append(ok)
        bitmaps.append(bitmap)
    return {
        "task": task.task_id,
        "n_trials": n_trials,
        "success_rate": float(np.mean(succ)),
        "subtask_rates": np.mean(np.asarray(bitmaps, dtype=float), axis=0).tolist(),
        "trial_success": [bool(s) for s in succ],
    }


# -- experiment grid -------------------------------------------------------


def cell_key(task_id, variant, seed, t_s, t_k):
    return f"{task_id}__{variant}__s{seed}__ts{t_s}_tk{t_k}"


def run_cell(task_id, variant, seed, out_dir, n_episodes=200, epochs=30,
             t_s=6, t_k=8, n_sc=3, n_trials=50, data_seed=1234,
             force=False, log=print):
    """Train + evaluate one grid cell; idempotent via a per-cell result file."""
    out_dir = Path(out_dir)
    key = cell_key(task_id, variant, seed, t_s, t_k)
    cell_dir = out_dir / key
    result_file = cell_dir / "result.json"
    if result_file.exists() and not force:
        return json.loads(result_file.read_text())
    cell_dir.mkdir(parents=True, exist_ok=True)
    task = make_task(task_id)
    episodes, _ = generate_dataset(task, n_episodes, seed=data_seed)
    cfg = TrainConfig(epochs=epochs, seed=seed, variant=variant,
                      t_s=t_s, t_k=t_k, n_sc=n_sc)
    t0 = time.time()
    policy, rows = streaming_train(episodes, cfg,
                                   metrics_path=cell_dir / "metrics.jsonl",
                                   task_id=task_id)
    train_time = time.time() - t0
    policy.save(cell_dir / "checkpoint.memo")
    stats = eval_rollout(policy, task, n_trials, seed=seed + 5000,
                         m_exec=cfg.m_exec)
    result = {
        "key": key, "task": task_id, "variant": variant, "seed": seed,
        "t_s": t_s, "t_k": t_k, "n_sc": n_sc,
        "epochs": epochs, "n_episodes": n_episodes,
        "final_loss": rows[-1].loss_mean if rows else None,
        "train_seconds": train_time,
        "success_rate": stats["success_rate"],
        "subtask_rates": stats["subtask_rates"],
        "n_trials": n_trials,
    }
    result_file.write_text(json.dumps(result, indent=1))
    if log:
        log(f"[cell] {key}: success={stats['success_rate']:.2f} "
            f"loss={result['final_loss']:.4f} train={train_time:.0f}s")
    return result


def capacity_sweep(task_id, out_dir, t_k_list=(0, 8, 12), t_s_list=(2, 6),
                   seeds=(0, 1, 2), **kw):
    """Train/evaluate the full variant across memory capacities."""
    rows = []
    for t_k in t_k_list:
        for t_s in t_s_list:
            for seed in seeds:
                rows.append(run_cell(task_id, "full", seed, out_dir,
                                     t_s=t_s, t_k=t_k, **kw))
    return rows
