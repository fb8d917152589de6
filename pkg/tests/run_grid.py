"""Populate the acceptance experiment grid (resumable; run before pytest if
you want criteria 5-7 to read cached results instead of training inline).

Usage: python -m tests.run_grid [--seeds 3]
"""

import argparse
import pathlib
import sys

from tieredmem.trainer import run_cell

GRID_DIR = pathlib.Path(__file__).resolve().parent.parent / "runs" / "acceptance"


def cells(seeds):
    for seed in seeds:
        # criterion 5: ordering analogue
        yield ("seqtap", "markov", seed, {})
        yield ("seqtap", "full", seed, {})
        yield ("putback", "fifo", seed, {})
        yield ("putback", "full", seed, {})
        yield ("swaptrack", "simmerge", seed, {})
        yield ("swaptrack", "full", seed, {})
        # criterion 6: capacity directionality
        yield ("putback", "full", seed, {"t_k": 0})
        yield ("seqtap", "full", seed, {"t_s": 2})
        # criterion 7: ablation directionality
        yield ("seqtap", "no_tpe", seed, {})
        yield ("seqtap", "consol_add", seed, {})
        yield ("seqtap", "gate_add", seed, {})


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args(argv)
    todo = list(cells(range(args.seeds)))
    for i, (task, variant, seed, kw) in enumerate(todo):
        r = run_cell(task, variant, seed, GRID_DIR, **kw)
        print(f"[{i + 1}/{len(todo)}] {r['key']}: success={r['success_rate']:.2f}",
              flush=True)


if __name__ == "__main__":
    sys.exit(main())
