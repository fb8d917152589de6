"""Self-contained oracle and invariant suites.

Each ``verify_*`` function returns a list of (check name, passed, detail)
tuples. The CLI ``verify`` command and the acceptance tests both run these.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import memory as mem
from .autodiff import Adam, Tensor
from .decoder import (ACTION_DIM, CHUNK_LEN, DenoiserParams, DiffusionSchedule,
                      add_noise, denoise_step, diffusion_loss, predict_noise)
from .encoder import C
from .envs import TASKS, expert_rollout, make_task, render, verify_aliasing


# -- finite differences ----------------------------------------------------


def gradcheck(fn, inputs, h=1e-5, rtol=1e-4, seed=None):
    """Central-difference check of d(fn)/d(input) for every input tensor.

    Inputs must be float64 tensors with requires_grad. Returns the worst
    relative error across all coordinates.
    """
    for t in inputs:
        t.zero_grad()
    out = fn()
    out.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        num = num.reshape(t.data.shape)
        denom = max(np.abs(analytic).max(), np.abs(num).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - num).max() / denom))
    return worst


def _p64(rng, shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def verify_numerics(n_seeds=20):
    checks = []
    worst = {"matmul": 0.0, "softmax": 0.0, "layer_norm": 0.0, "gelu": 0.0,
             "sigmoid": 0.0, "conv1d": 0.0, "attention": 0.0}
    for s in range(n_seeds):
        rng = np.random.default_rng(1000 + s)
        a, b = _p64(rng, (3, 4)), _p64(rng, (4, 2))
        worst["matmul"] = max(worst["matmul"], gradcheck(
            lambda: ad.sum_all(ad.matmul(a, b)), [a, b]))
        x = _p64(rng, (3, 5))
        w = Tensor(rng.standard_normal((3, 5)))
        worst["softmax"] = max(worst["softmax"], gradcheck(
            lambda: ad.sum_all(ad.softmax_rows(x) * w), [x]))
        g, bb = _p64(rng, (5,)), _p64(rng, (5,))
        worst["layer_norm"] = max(worst["layer_norm"], gradcheck(
            lambda: ad.sum_all(ad.layer_norm(x, g, bb) * w), [x, g, bb]))
        worst["gelu"] = max(worst["gelu"], gradcheck(
            lambda: ad.sum_all(ad.gelu(x) * w), [x]))
        worst["sigmoid"] = max(worst["sigmoid"], gradcheck(
            lambda: ad.sum_all(ad.sigmoid(x) * w), [x]))
        cx = _p64(rng, (6, 3))
        cw = _p64(rng, (3, 3, 4))
        cb = _p64(rng, (4,))
        cm = Tensor(rng.standard_normal((6, 4)))
        worst["conv1d"] = max(worst["conv1d"], gradcheck(
            lambda: ad.sum_all(ad.conv1d(cx, cw, cb) * cm), [cx, cw, cb]))
        q, k, v = _p64(rng, (2, 4)), _p64(rng, (3, 4)), _p64(rng, (3, 4))
        from .layers import attention
        worst["attention"] = max(worst["attention"], gradcheck(
            lambda: ad.sum_all(attention(q, k, v)), [q, k, v]))
    for name, err in worst.items():
        checks.append((f"gradcheck.{name}", err < 1e-4, f"rel err {err:.2e}"))

    # softmax structural properties
    rng = np.random.default_rng(12)
    x = rng.standard_normal((50, 7))
    y = ad.softmax_rows(Tensor(x)).data
    ok = np.all(y >= 0) and np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    checks.append(("softmax.rows_sum_to_one", bool(ok), ""))
    y2 = ad.softmax_rows(Tensor(x + 123.0)).data
    checks.append(("softmax.shift_invariant", bool(np.allclose(y, y2, atol=1e-6)), ""))

    # Adam on a 2-var quadratic: f(w) = (w0-3)^2 + 2 (w1+1)^2
    w = Tensor(np.zeros(2, dtype=np.float64), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        loss = ad.sum_all((w - Tensor(np.array([3.0, -1.0]))) ** 2
                          * Tensor(np.array([1.0, 2.0])))
        opt.zero_grad()
        loss.backward()
        opt.step()
    err = float(np.abs(w.data - np.array([3.0, -1.0])).max())
    checks.append(("adam.quadratic_convergence", err < 1e-3, f"dist {err:.2e}"))
    return checks


# -- memory oracles --------------------------------------------------------


def _rand_token(rng):
    return Tensor(rng.standard_normal((1, C)).astype(np.float32))


def verify_memory(n_stream=10_000, n_merge_banks=1000):
    checks = []
    rng = np.random.default_rng(5)
    consol = mem.ConsolidationParams(np.random.default_rng(6))
    bank = mem.MemoryBankState()
    cap_ok = True
    for t in range(n_stream):
        mem.append_sensory(bank, _rand_token(rng), t, consol)
        if len(bank.stmb) > bank.t_s or len(bank.ltmb) > bank.t_k:
            cap_ok = False
            break
    checks.append(("bank.capacity_safety_10k", cap_ok,
                   f"stmb={len(bank.stmb)} ltmb={len(bank.ltmb)}"))

    # consolidation arithmetic: the 7th append fires one consolidation
    bank = mem.MemoryBankState()
    for t in range(7):
        mem.append_sensory(bank, _rand_token(rng), t, consol)
    ok = (len(bank.stmb) == 4 and len(bank.ltmb) == 1
          and bank.ltmb[0].birth_step == 0 and bank.ltmb[0].latest_step == 2
          and bank.stmb[0].birth_step == 3)
    checks.append(("bank.consolidation_arithmetic", ok,
                   f"stmb={len(bank.stmb)} ltmb={len(bank.ltmb)}"))

    # merge argmax vs brute force
    merge_ok = True
    for i in range(n_merge_banks):
        r = np.random.default_rng(10_000 + i)
        bank = mem.MemoryBankState()
        bank.ltmb = [mem.MemoryToken(Tensor(r.standard_normal((1, C)).astype(np.float32)),
                                     t, t, 1, "long") for t in range(9)]
        vecs = [tok.vector.data[0].copy() for tok in bank.ltmb]
        sims = [float(vecs[j] @ vecs[j + 1]
                      / (np.linalg.norm(vecs[j]) * np.linalg.norm(vecs[j + 1])))
                for j in range(8)]
        expected = int(np.argmax(sims))
        got = mem.merge_ltmb(bank)
        if got != expected or len(bank.ltmb) != 8:
            merge_ok = False
            break
    checks.append(("bank.merge_brute_force_1000", merge_ok, ""))

    # FIFO mode reproduces a reference queue
    bank = mem.MemoryBankState(t_s=14, t_k=0, mode="fifo")
    ref = []
    fifo_ok = True
    for t in range(200):
        v = _rand_token(rng)
        ref.append(v.data.copy())
        ref = ref[-14:]
        mem.append_sensory(bank, v, t, None)
        got = [tok.vector.data for tok in bank.stmb]
        if len(got) != len(ref) or any(not np.array_equal(a, b)
                                       for a, b in zip(got, ref)):
            fifo_ok = False
            break
    checks.append(("bank.fifo_reference_queue", fifo_ok, ""))
    return checks


# -- diffusion oracles -----------------------------------------------------


def verify_diffusion():
    checks = []
    sched = DiffusionSchedule()

    ab = np.cumprod(1.0 - sched.betas)
    ok = (np.allclose(ab, sched.alpha_bars, atol=1e-7)
          and np.all(np.diff(sched.alpha_bars) < 0)
          and sched.sigmas[0] == 0.0
          and np.allclose(sched.gammas, sched.betas / np.sqrt(1 - ab))
          and np.allclose(sched.recip_sqrt_alpha, 1 / np.sqrt(1 - sched.betas)))
    checks.append(("schedule.identities", bool(ok), ""))

    # closed-loop recovery with the conditional-noise oracle
    rng = np.random.default_rng(77)
    worst = 0.0
    f_c = Tensor(np.zeros((1, C), np.float32))
    d = DenoiserParams(np.random.default_rng(3))
    for _ in range(50):
        a0 = rng.uniform(-1, 1, (CHUNK_LEN, ACTION_DIM))
        eps = rng.standard_normal((CHUNK_LEN, ACTION_DIM))
        x = add_noise(a0, sched.k_steps, eps, sched)
        for k in range(sched.k_steps, 0, -1):
            oracle = lambda a_k, kk: ((np.asarray(a_k) - np.sqrt(sched.alpha_bars[kk - 1]) * a0)
                                      / np.sqrt(1 - sched.alpha_bars[kk - 1]))
            x = denoise_step(x, k, f_c, d, sched, rng, eps_model=oracle)
        worst = max(worst, float(np.abs(x - a0).max()))
    checks.append(("ddpm.closed_loop_recovery", worst < 1e-3, f"max err {worst:.2e}"))

    # untrained zero-init head: loss concentrates at 1
    rng = np.random.default_rng(8)
    losses = [diffusion_loss(f_c, rng.uniform(-1, 1, (CHUNK_LEN, ACTION_DIM)),
                             d, sched, rng).item() for _ in range(1000)]
    m = float(np.mean(losses))
    checks.append(("ddpm.untrained_loss_unit", abs(m - 1.0) < 0.05, f"mean {m:.3f}"))

    # forward-noise variance
    k = 12
    rng = np.random.default_rng(9)
    a0 = np.zeros((CHUNK_LEN, ACTION_DIM))
    draws = np.stack([add_noise(a0, k, rng.standard_normal(a0.shape), sched)
                      for _ in range(4000)])
    var = float(draws.var())
    target = 1 - sched.alpha_bars[k - 1]
    checks.append(("ddpm.forward_variance", abs(var - target) / target < 0.02,
                   f"{var:.4f} vs {target:.4f}"))
    return checks


# -- environment integrity -------------------------------------------------


def verify_envs(n_alias_seeds=20, n_expert_seeds=200):
    checks = []
    for task_id in TASKS:
        task = make_task(task_id)
        try:
            rep = verify_aliasing(task, n_seeds=n_alias_seeds)
            checks.append((f"alias.{task_id}", True,
                           f"{rep['pairs_checked']} pairs bit-identical"))
        except Exception as e:  # noqa: BLE001 - report, don't crash the suite
            checks.append((f"alias.{task_id}", False, str(e)))

    for task_id in TASKS:
        task = make_task(task_id)
        fails = sum(1 for s in range(n_expert_seeds)
                    if not expert_rollout(task, 5_000_000 + s)[3])
        checks.append((f"expert.{task_id}", fails == 0, f"{fails} failures"))

    # putback origin-slot invisibility after step 10
    from .envs import _putback_variant_seed
    task = make_task("putback")
    rollouts = [expert_rollout(task, _putback_variant_seed(3, v)) for v in range(4)]
    invisible = True
    for t in range(12, task.PATROL_END):
        imgs = {r[0][t].image.tobytes() for r in rollouts}
        if len(imgs) != 1:
            invisible = False
            break
    checks.append(("putback.slot_invisible_after_step10", invisible, ""))
    return checks


SUITES = {
    "numerics": verify_numerics,
    "memory": verify_memory,
    "diffusion": verify_diffusion,
    "envs": verify_envs,
}


def run_suite(name):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; options: {sorted(SUITES)}")
    return SUITES[name]()
