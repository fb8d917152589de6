"""Episode records, dataset generation, and the on-disk episode format.

Episode files: magic ``MRTB``, version, task id, seed, length; then one
record per step: raw 32x32x3 image bytes, 6 little-endian float32 proprio
values, 3 float32 action values. A line-delimited JSON manifest indexes a
dataset directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import ACTION_DIM, CHUNK_LEN
from .encoder import D_S, IMG_HW
from .envs import expert_rollout

MAGIC = b"MRTB"
VERSION = 1
_IMG_BYTES = IMG_HW * IMG_HW * 3


class DatasetError(RuntimeError):
    pass


@dataclass
class EpisodeRecord:
    images: np.ndarray    # (T, 32, 32, 3) uint8
    proprios: np.ndarray  # (T, 6) float32
    actions: np.ndarray   # (T, 3) float32
    task_id: str
    seed: int
    success: bool = True

    def __len__(self):
        return self.images.shape[0]

    def chunk_target(self, t, m=CHUNK_LEN):
        """Future action window A_{t:t+m-1} with terminal-step replication."""
        T = len(self)
        idx = np.minimum(np.arange(t, t + m), T - 1)
        return self.actions[idx]


def generate_dataset(task, n, seed):
    """Roll n successful expert episodes; failures are rejected and re-seeded
    (rate above 5% raises: the task is misconfigured)."""
    if n < 1:
        raise DatasetError("need n >= 1 episodes")
    episodes, failures, attempt = [], 0, 0
    while len(episodes) < n:
        ep_seed = seed * 100003 + attempt
        attempt += 1
        frames, actions, _, ok, _ = expert_rollout(task, ep_seed)
        if not ok:
            failures += 1
            if failures > 1 + 0.05 * (n + failures):
                raise DatasetError(
                    f"expert failure rate exceeded 5% on task {task.task_id}")
            continue
        episodes.append(EpisodeRecord(
            images=np.stack([f.image for f in frames]),
            proprios=np.stack([f.proprio for f in frames]),
            actions=np.stack(actions),
            task_id=task.task_id, seed=ep_seed, success=True))
    return episodes, failures


# -- binary episode files --------------------------------------------------


def save_episode(rec, path):
    path = Path(path)
    tid = rec.task_id.encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, len(tid), rec.seed & 0xFFFFFFFF))
        f.write(tid)
        f.write(struct.pack("<I", len(rec)))
        for i in range(len(rec)):
            f.write(rec.images[i].tobytes())
            f.write(rec.proprios[i].astype("<f4").tobytes())
            f.write(rec.actions[i].astype("<f4").tobytes())


def load_episode(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise DatasetError(f"{path}: bad magic")
        version, tid_len, seed = struct.unpack("<III", f.read(12))
        if version != VERSION:
            raise DatasetError(f"{path}: unsupported version {version}")
        task_id = f.read(tid_len).decode()
        (length,) = struct.unpack("<I", f.read(4))
        images = np.empty((length, IMG_HW, IMG_HW, 3), dtype=np.uint8)
        proprios = np.empty((length, D_S), dtype=np.float32)
        actions = np.empty((length, ACTION_DIM), dtype=np.float32)
        for i in range(length):
            images[i] = np.frombuffer(f.read(_IMG_BYTES), dtype=np.uint8).reshape(IMG_HW, IMG_HW, 3)
            proprios[i] = np.frombuffer(f.read(D_S * 4), dtype="<f4")
            actions[i] = np.frombuffer(f.read(ACTION_DIM * 4), dtype="<f4")
    return EpisodeRecord(images, proprios, actions, task_id, seed)


def save_dataset(episodes, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as mf:
        for i, ep in enumerate(episodes):
            name = f"ep_{i:05d}.mrtb"
            save_episode(ep, out_dir / name)
            mf.write(json.dumps({"file": name, "task": ep.task_id,
                                 "seed": ep.seed, "length": len(ep)}) + "\n")
    return manifest


def load_dataset(data_dir):
    data_dir = Path(data_dir)
    manifest = data_dir / "manifest.jsonl"
    if not manifest.exists():
        raise DatasetError(f"no manifest in {data_dir}")
    episodes = []
    with open(manifest) as mf:
        for line in mf:
            entry = json.loads(line)
            episodes.append(load_episode(data_dir / entry["file"]))
    return episodes
