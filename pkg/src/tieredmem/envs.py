"""Deterministic 32x32-rendered benchmark tasks with certified perceptual
aliasing ("aliasworld"), scripted privileged experts, and the
success-iff-all-subtasks evaluation rule.

Task roster:
  seqtap    — tap red, tap blue, tap red again, stop; the two red-tap
              approaches are observation-identical (task state tracking).
  putback   — an item starts in one of four slots, is parked at a staging
              cell within the first ten steps, and must be returned to its
              origin slot ~100 steps later (long-horizon retention).
  swaptrack — two identical containers are toggled in a seed-dependent
              order; the final decision state is observation-identical across
              both orders (order memory).

The grid is 16x16 cells rendered at 2px per cell. Rendering is a pure
function of the visible fields; hidden phase bookkeeping never touches
pixels, which is what makes the aliasing certifiable.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

GRID = 16
CELL_PX = 2
MAX_EPISODE_LEN = 120

# black background: empty patches project to exactly zero under the frozen
# linear patch encoder, so object content dominates the readout attention
BG = (0, 0, 0)
AGENT = (255, 255, 255)
AGENT_ON_OBJECT = (255, 220, 0)
RED = (220, 40, 40)
BLUE = (60, 90, 235)
ORANGE = (230, 150, 40)
CYAN = (50, 200, 200)
SLOT_GRAY = (90, 90, 90)
STAGE_GREEN = (40, 120, 40)
DECISION_PURPLE = (150, 60, 180)


class TaskConfigError(ValueError):
    """Benchmark-integrity failure (misconfigured task or broken aliasing)."""


@dataclass
class SceneObject:
    obj_id: str
    cell: tuple
    color: tuple
    visible: bool = True
    shifted: bool = False   # rendered one cell up while set

    def render_cell(self):
        x, y = self.cell
        return (x, y - 1) if self.shifted else self.cell


@dataclass
class SceneState:
    task_id: str
    agent: tuple
    vel: tuple = (0, 0)
    tap_last: float = 0.0
    objects: dict = field(default_factory=dict)
    markers: list = field(default_factory=list)   # [(cell, color)], static decor
    carrying: str = None
    progress: int = 0
    violations: int = 0
    events: list = field(default_factory=list)    # [(t, obj_id)]
    phase: dict = field(default_factory=dict)     # hidden; never rendered
    t: int = 0

    def copy(self):
        return copy.deepcopy(self)


def _draw_cell(img, cell, color):
    x, y = cell
    if 0 <= x < GRID and 0 <= y < GRID:
        img[y * CELL_PX:(y + 1) * CELL_PX, x * CELL_PX:(x + 1) * CELL_PX] = color


def _draw_sprite(img, cell, color, radius=1):
    """A (2*radius+1)-cell square block: objects get a large visual footprint
    so their locations survive the coarse frozen patch projection."""
    x, y = cell
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            _draw_cell(img, (x + dx, y + dy), color)


def render(state):
    """Deterministic rasterization of the visible scene."""
    img = np.empty((GRID * CELL_PX, GRID * CELL_PX, 3), dtype=np.uint8)
    img[:] = BG
    for cell, color in state.markers:
        _draw_cell(img, cell, color)
    for obj in state.objects.values():
        if obj.visible:
            _draw_sprite(img, obj.render_cell(), obj.color)
    on_object = any(obj.visible and obj.render_cell() == state.agent
                    for obj in state.objects.values())
    # the agent would otherwise fully occlude an object it stands on; recolor
    # the whole agent cell so "on an object" is a cell-sized visual event
    _draw_cell(img, state.agent, AGENT_ON_OBJECT if on_object else AGENT)
    if state.carrying is not None:
        ax, ay = state.agent
        img[ay * CELL_PX, ax * CELL_PX] = state.objects[state.carrying].color
    return img


def proprio_of(state):
    x, y = state.agent
    on_object = any(o.visible and o.render_cell() == state.agent
                    for o in state.objects.values())
    return np.array([
        x / 7.5 - 1.0, y / 7.5 - 1.0,
        float(state.vel[0]),
        # "standing on a visible object" replaces the redundant y-velocity:
        # tap decisions hinge on it, and the agent sprite occludes the
        # object in the rendered view
        1.0 if on_object else 0.0,
        state.tap_last,
        1.0 if state.carrying is not None else 0.0,
    ], dtype=np.float32)


def observe(state):
    from .encoder import ObservationFrame
    return ObservationFrame(image=render(state), proprio=proprio_of(state),
                            step_index=state.t)


def step(task, state, action):
    """Advance the scene by one quantized action (dx, dy, tap).

    Non-finite actions are no-ops; deltas round to {-1, 0, 1}; a tap value
    > 0.5 fires the tap event at the agent's cell.
    """
    state = state.copy()
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        a = np.zeros(3)
    a = np.clip(a, -1.0, 1.0)
    dx, dy = int(np.rint(a[0])), int(np.rint(a[1]))
    nx = min(max(state.agent[0] + dx, 0), GRID - 1)
    ny = min(max(state.agent[1] + dy, 0), GRID - 1)
    state.vel = (nx - state.agent[0], ny - state.agent[1])
    state.agent = (nx, ny)
    tap = a[2] > 0.5
    state.tap_last = 1.0 if tap else 0.0
    state.t += 1
    if tap:
        task.handle_tap(state)
    return state


# -- tasks -----------------------------------------------------------------


def _walk_toward(state, dest):
    """One-cell move, x axis first. Returns (dx, dy)."""
    ax, ay = state.agent
    if ax != dest[0]:
        return (1 if dest[0] > ax else -1, 0)
    if ay != dest[1]:
        return (0, 1 if dest[1] > ay else -1)
    return (0, 0)


def _approach_and_tap(state, target):
    """Scripted approach that always arrives from two cells below, so the
    arrival velocity (and hence proprioception) is phase-independent."""
    tx, ty = target
    stage = (tx, ty + 2)
    ax, ay = state.agent
    if (ax, ay) == (tx, ty):
        return np.array([0.0, 0.0, 1.0])
    if (ax, ay) == (tx, ty + 1) or (ax, ay) == stage:
        return np.array([0.0, -1.0, 0.0])
    dx, dy = _walk_toward(state, stage)
    return np.array([float(dx), float(dy), 0.0])


class Task:
    task_id = ""
    max_len = MAX_EPISODE_LEN
    n_subtasks = 0

    def reset(self, seed):
        raise NotImplementedError

    def expert_action(self, state):
        raise NotImplementedError

    def handle_tap(self, state):
        raise NotImplementedError

    def expert_done(self, state):
        return False

    def _record_tap(self, state, obj_id, expected_seq):
        state.events.append((state.t, obj_id))
        if state.progress < len(expected_seq) and obj_id == expected_seq[state.progress]:
            state.progress += 1
        else:
            state.violations += 1


class SeqTapTask(Task):
    """Tap red, tap blue, tap red again, then hold still at home."""

    task_id = "seqtap"
    n_subtasks = 3
    # candidate cells are chosen with pairwise-distinct (x%4, y%4) offsets so
    # the frozen 8-px patch encoder (position-agnostic across patches) can
    # tell every variant apart by patch content alone
    RED_CELLS = [(3, 3), (4, 7), (2, 10)]
    BLUE_CELLS = [(12, 3), (11, 7), (13, 10)]
    HOME = (8, 13)

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        red = self.RED_CELLS[rng.integers(len(self.RED_CELLS))]
        blue = self.BLUE_CELLS[rng.integers(len(self.BLUE_CELLS))]
        return SceneState(
            task_id=self.task_id, agent=self.HOME,
            objects={"red": SceneObject("red", red, RED),
                     "blue": SceneObject("blue", blue, BLUE)},
        )

    def _sequence(self):
        return ["red", "blue", "red"]

    def handle_tap(self, state):
        for obj in state.objects.values():
            if obj.visible and obj.cell == state.agent:
                self._record_tap(state, obj.obj_id, self._sequence())
                return

    def expert_action(self, state):
        seq = self._sequence()
        if state.progress < len(seq):
            target = state.objects[seq[state.progress]].cell
            return _approach_and_tap(state, target)
        if state.agent != self.HOME:
            dx, dy = _walk_toward(state, self.HOME)
            return np.array([float(dx), float(dy), 0.0])
        state.phase["settle"] = state.phase.get("settle", 0) + 1
        return np.zeros(3)

    def expert_done(self, state):
        return state.phase.get("settle", 0) >= 4

    def aliased_observation_steps(self, trace_events):
        """The two red-tap steps (first and third tap events)."""
        taps = [t for t, obj in trace_events if obj == "red"]
        return [(taps[0], taps[1])]


class PutBackTask(Task):
    """Park an item at the staging cell early, return it to its origin slot
    after a ~100-step patrol. The origin slot is unobservable after step 10."""

    task_id = "putback"
    n_subtasks = 4
    SLOTS = [(6, 6), (9, 6), (6, 9), (9, 9)]
    STAGING = (8, 8)
    PATROL = [(8, 10), (9, 10), (10, 10), (10, 11), (9, 11), (8, 11),
              (7, 11), (6, 11), (6, 10), (7, 10)]
    PATROL_END = 100

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        slot_idx = int(rng.integers(4))
        direction = 1 if rng.integers(2) == 0 else -1
        slot = self.SLOTS[slot_idx]
        markers = [(c, SLOT_GRAY) for c in self.SLOTS] + [(self.STAGING, STAGE_GREEN)]
        return SceneState(
            task_id=self.task_id, agent=self.STAGING,
            objects={"item": SceneObject("item", slot, ORANGE)},
            markers=markers,
            phase={"orig_slot": slot_idx, "patrol_dir": direction, "patrol_i": None},
        )

    def handle_tap(self, state):
        item = state.objects["item"]
        if state.carrying == "item":
            # drop at the agent's cell
            item.cell = state.agent
            item.visible = True
            state.carrying = None
            if state.agent == self.STAGING and state.progress == 1:
                state.events.append((state.t, "item"))
                state.progress = 2
            elif state.agent == self.SLOTS[state.phase["orig_slot"]] and state.progress == 3:
                state.events.append((state.t, "item"))
                state.progress = 4
            else:
                state.events.append((state.t, "item"))
                state.violations += 1
        elif item.visible and item.cell == state.agent:
            item.visible = False
            state.carrying = "item"
            state.events.append((state.t, "item"))
            if state.progress in (0, 2):
                state.progress += 1
            else:
                state.violations += 1

    def expert_action(self, state):
        slot = self.SLOTS[state.phase["orig_slot"]]
        t = state.t
        if t < 10:
            if state.progress == 0:
                item = state.objects["item"]
                if state.agent == item.cell:
                    return np.array([0.0, 0.0, 1.0])
                dx, dy = _walk_toward(state, item.cell)
                return np.array([float(dx), float(dy), 0.0])
            if state.progress == 1:
                if state.agent == self.STAGING:
                    return np.array([0.0, 0.0, 1.0])
                dx, dy = _walk_toward(state, self.STAGING)
                return np.array([float(dx), float(dy), 0.0])
            return np.zeros(3)   # parked; wait out the convergence window
        if t < self.PATROL_END:
            if state.phase["patrol_i"] is None:
                if state.agent in self.PATROL:
                    state.phase["patrol_i"] = self.PATROL.index(state.agent)
                else:
                    dx, dy = _walk_toward(state, self.PATROL[0])
                    return np.array([float(dx), float(dy), 0.0])
            i = (state.phase["patrol_i"] + state.phase["patrol_dir"]) % len(self.PATROL)
            state.phase["patrol_i"] = i
            dx, dy = _walk_toward(state, self.PATROL[i])
            return np.array([float(dx), float(dy), 0.0])
        if state.progress == 2:
            if state.agent == self.STAGING:
                return np.array([0.0, 0.0, 1.0])
            dx, dy = _walk_toward(state, self.STAGING)
            return np.array([float(dx), float(dy), 0.0])
        if state.progress == 3:
            if state.agent == slot:
                return np.array([0.0, 0.0, 1.0])
            dx, dy = _walk_toward(state, slot)
            return np.array([float(dx), float(dy), 0.0])
        if state.agent != self.STAGING:
            dx, dy = _walk_toward(state, self.STAGING)
            return np.array([float(dx), float(dy), 0.0])
        state.phase["settle"] = state.phase.get("settle", 0) + 1
        return np.zeros(3)

    def expert_done(self, state):
        return state.phase.get("settle", 0) >= 3


class SwapTrackTask(Task):
    """Toggle two identical containers in a seed-dependent order; after an
    aliased decision state, tap the container that was toggled first."""

    task_id = "swaptrack"
    n_subtasks = 5
    CELL_A = (4, 6)
    CELL_B = (12, 6)
    DECISION = (8, 10)
    PATROL = [(7, 12), (8, 12), (9, 12), (8, 12)]
    PATROL_END = 52

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        dy = int(rng.integers(-1, 2))
        a_cell = (self.CELL_A[0], self.CELL_A[1] + dy)
        b_cell = (self.CELL_B[0], self.CELL_B[1] + dy)
        first = "ca" if rng.integers(2) == 0 else "cb"
        return SceneState(
            task_id=self.task_id, agent=(8, 13),
            objects={"ca": SceneObject("ca", a_cell, CYAN),
                     "cb": SceneObject("cb", b_cell, CYAN)},
            markers=[(self.DECISION, DECISION_PURPLE)],
            phase={"first": first, "hold": 0},
        )

    def _sequence(self, state):
        first = state.phase["first"]
        second = "cb" if first == "ca" else "ca"
        return [first, first, second, second, first]

    def handle_tap(self, state):
        for obj in state.objects.values():
            if obj.cell == state.agent:
                obj.shifted = not obj.shifted
                self._record_tap(state, obj.obj_id, self._sequence(state))
                return

    def expert_action(self, state):
        seq = self._sequence(state)
        p = state.progress
        if p < 4:
            target_id = seq[p]
            target = state.objects[target_id].cell
            if p in (1, 3) and state.phase["hold"] < 2:
                # dwell on the shifted container before restoring it
                state.phase["hold"] += 1
                return np.zeros(3)
            if p in (1, 3) and state.agent == target:
                state.phase["hold"] = 0
                return np.array([0.0, 0.0, 1.0])
            return _approach_and_tap(state, target)
        if state.t < self.PATROL_END:
            if state.agent not in self.PATROL:
                dx, dy = _walk_toward(state, self.PATROL[0])
                return np.array([float(dx), float(dy), 0.0])
            i = (self.PATROL.index(state.agent) + 1) % len(self.PATROL)
            dx, dy = _walk_toward(state, self.PATROL[i])
            return np.array([float(dx), float(dy), 0.0])
        if not state.phase.get("visited_decision"):
            if state.agent == self.DECISION:
                state.phase["visited_decision"] = True
                return self.expert_action(state)
            dx, dy = _walk_toward(state, (self.DECISION[0], self.DECISION[1] + 1))
            if (dx, dy) == (0, 0):
                return np.array([0.0, -1.0, 0.0])
            return np.array([float(dx), float(dy), 0.0])
        if p == 4:
            target = state.objects[seq[4]].cell
            return _approach_and_tap(state, target)
        state.phase["settle"] = state.phase.get("settle", 0) + 1
        return np.zeros(3)

    def expert_done(self, state):
        return state.phase.get("settle", 0) >= 3


TASKS = {t.task_id: t for t in (SeqTapTask(), PutBackTask(), SwapTrackTask())}


def make_task(task_id):
    if task_id not in TASKS:
        raise TaskConfigError(f"unknown task {task_id!r}")
    return TASKS[task_id]


def reset(task, seed):
    return task.reset(seed)


DETOUR_PROB = 0.05
_DETOUR_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))


def _detour_allowed(task, state):
    """Detours are only taken where they cannot disturb the certified
    aliasing windows:

    - never within Manhattan distance 1 of a visible object, so every entry
      into an object cell is an expert approach move (tap observations keep
      their phase-independent arrival velocity);
    - putback: only during the recovery leg (t >= PATROL_END) — the parking
      deadline is tight and the patrol frames are compared bit-exactly
      across slot variants.
    """
    if state.task_id == "putback" and state.t < PutBackTask.PATROL_END:
        return False
    ax, ay = state.agent
    for obj in state.objects.values():
        if obj.visible:
            ox, oy = obj.render_cell()
            if abs(ax - ox) + abs(ay - oy) <= 1:
                return False
    return True


def expert_rollout(task, seed, detour_prob=DETOUR_PROB):
    """Run the scripted expert; returns (frames, actions, states, success).

    With probability detour_prob per eligible step the expert takes a random
    unit move instead of its scripted action and then recovers.  A fixed
    start plus a deterministic script would otherwise cover only a handful
    of distinct trajectories, leaving a cloned policy nothing to learn about
    recovering from its own small deviations."""
    state = task.reset(seed)
    drng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5EED])
    frames, actions, states = [], [], []
    while state.t < task.max_len:
        frames.append(observe(state))
        states.append(state)
        if detour_prob > 0 and _detour_allowed(task, state) \
                and drng.random() < detour_prob:
            dx, dy = _DETOUR_MOVES[drng.integers(4)]
            a = np.array([float(dx), float(dy), 0.0])
        else:
            a = task.expert_action(state)
        actions.append(np.asarray(a, dtype=np.float32))
        state = step(task, state, a)
        if task.expert_done(state):
            break
    ok, _ = check_success(state, task)
    return frames, actions, states, ok, state


def check_success(final_state, task):
    """Success iff every subtask fired in order with no violations."""
    bitmap = [final_state.progress > i for i in range(task.n_subtasks)]
    return (final_state.progress == task.n_subtasks
            and final_state.violations == 0), bitmap


def verify_aliasing(task, n_seeds=20, base_seed=0):
    """Certify the declared aliased observation pairs bit-exactly.

    Returns a report dict; raises TaskConfigError on any mismatch.
    """
    report = {"task": task.task_id, "pairs_checked": 0, "seeds": n_seeds}
    for s in range(base_seed, base_seed + n_seeds):
        if task.task_id == "seqtap":
            frames, actions, states, ok, final = expert_rollout(task, s)
            if not ok:
                raise TaskConfigError(f"seqtap expert failed on seed {s}")
            for ia, ib in task.aliased_observation_steps(final.events):
                _assert_aliased(frames[ia], frames[ib], task.task_id, s)
                report["pairs_checked"] += 1
        elif task.task_id == "putback":
            # the four origin-slot variants must be indistinguishable from
            # step 10 until the recovery phase begins
            rollouts = [expert_rollout(task, _putback_variant_seed(s, v))
                        for v in range(4)]
            for frames, _, _, ok, _ in rollouts:
                if not ok:
                    raise TaskConfigError(f"putback expert failed near seed {s}")
            for t in range(12, task.PATROL_END):
                ref = rollouts[0][0][t]
                for frames, *_ in rollouts[1:]:
                    _assert_aliased(ref, frames[t], task.task_id, s)
                    report["pairs_checked"] += 1
        elif task.task_id == "swaptrack":
            ra = expert_rollout(task, _swaptrack_variant_seed(s, "ca"))
            rb = expert_rollout(task, _swaptrack_variant_seed(s, "cb"))
            if not (ra[3] and rb[3]):
                raise TaskConfigError(f"swaptrack expert failed near seed {s}")
            ta = _decision_step(ra[2], task)
            tb = _decision_step(rb[2], task)
            _assert_aliased(ra[0][ta], rb[0][tb], task.task_id, s)
            report["pairs_checked"] += 1
    return report


def _assert_aliased(fa, fb, task_id, seed):
    if fa.image.tobytes() != fb.image.tobytes():
        raise TaskConfigError(f"{task_id} seed {seed}: aliased images differ")
    if fa.proprio.tobytes() != fb.proprio.tobytes():
        raise TaskConfigError(f"{task_id} seed {seed}: aliased proprio differ")


def _decision_step(states, task):
    for i, st in enumerate(states):
        if st.agent == task.DECISION and st.vel == (0, -1):
            return i
    raise TaskConfigError("expert never reached the decision cell")


def _putback_variant_seed(base, slot_idx):
    """Find a seed whose reset picks the requested origin slot while keeping
    the patrol direction fixed."""
    task = TASKS["putback"]
    for s in range(base * 1000, base * 1000 + 100_000):
        st = task.reset(s)
        if st.phase["orig_slot"] == slot_idx and st.phase["patrol_dir"] == 1:
            return s
    raise TaskConfigError(f"no putback seed found for slot {slot_idx!r}")


def _swaptrack_variant_seed(base, first):
    task = TASKS["swaptrack"]
    for s in range(base * 1000, base * 1000 + 100_000):
        st = task.reset(s)
        if st.phase["first"] == first and st.objects["ca"].cell[1] == task.CELL_A[1]:
            return s
    raise TaskConfigError(f"no swaptrack seed found for first={first!r}")
