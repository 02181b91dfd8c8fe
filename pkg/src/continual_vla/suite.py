"""Procedural 2-D pick-and-place suite with a scripted expert.

The scene is the unit square. A point gripper moves by at most
``max_step`` per axis per step; action rows are ``(dx, dy, grip)`` in
``[-1, 1]``. A positive grip command closes on the nearest object within
``grasp_radius``; a non-positive one opens and drops whatever is held.
Every scene contains every object (one per colour) in a random permutation
of fixed slots, plus every target region. Tasks differ only in which object
goes to which target, so the instruction is the only thing that tells them
apart: this is what makes sequential training interfere.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

SCHEMA_VERSION = 1

COLORS = np.array(
    [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
    ]
)
VERBS = ("put",)
OBJECT_NAMES = ("red", "green", "blue", "yellow")
TARGET_NAMES = ("left bin", "middle bin", "right bin")


@dataclass(frozen=True)
class SuiteConfig:
    image_size: int = 16
    channels: int = 3
    horizon: int = 8
    action_dim: int = 3
    proprio_dim: int = 4
    max_step: float = 0.1
    grasp_radius: float = 0.08
    target_radius: float = 0.12
    object_slots: tuple[tuple[float, float], ...] = (
        (0.125, 0.125),
        (0.375, 0.125),
        (0.625, 0.125),
        (0.875, 0.125),
    )
    target_centers: tuple[tuple[float, float], ...] = ((0.15, 0.85), (0.5, 0.85), (0.85, 0.85))
    object_jitter: float = 0.05
    target_jitter: float = 0.03
    gripper_start: tuple[tuple[float, float], tuple[float, float]] = ((0.3, 0.7), (0.4, 0.6))
    t_max: int = 40

    @property
    def n_objects(self) -> int:
        return len(self.object_slots)

    @property
    def n_targets(self) -> int:
        return len(self.target_centers)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    verb: int
    object: int
    target: int
    object_shapes: tuple[int, ...]
    t_max: int
    # tolerance the expert uses before closing / releasing
    grasp_tol: float = 0.02
    release_tol: float = 0.03

    @property
    def instruction(self) -> np.ndarray:
        return np.array([self.verb, self.object, self.target], dtype=np.int64)

    def describe(self) -> str:
        return f"{VERBS[self.verb]} the {OBJECT_NAMES[self.object]} block in the {TARGET_NAMES[self.target]}"


@dataclass
class SimState:
    gripper: np.ndarray
    objects: np.ndarray
    targets: np.ndarray
    holding: int = -1
    heading: float = 0.0
    t: int = 0

    def copy(self) -> SimState:
        return SimState(
            self.gripper.copy(), self.objects.copy(), self.targets.copy(), self.holding, self.heading, self.t
        )


@dataclass
class Observation:
    image: np.ndarray
    proprio: np.ndarray


@dataclass
class Trajectory:
    """Struct-of-arrays demonstration: one row per recorded timestep."""

    task_id: int
    instruction: np.ndarray
    images: np.ndarray
    proprio: np.ndarray
    actions: np.ndarray
    success: bool

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def steps(self):
        for i in range(len(self)):
            yield Observation(self.images[i], self.proprio[i]), self.actions[i], self.instruction

    def freeze(self) -> Trajectory:
        for arr in (self.instruction, self.images, self.proprio, self.actions):
            arr.flags.writeable = False
        return self

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction.tolist(),
            "images": self.images.tolist(),
            "proprio": self.proprio.tolist(),
            "actions": self.actions.tolist(),
            "success": self.success,
        }

    @classmethod
    def from_json(cls, d: dict) -> Trajectory:
        return cls(
            task_id=int(d["task_id"]),
            instruction=np.array(d["instruction"], dtype=np.int64),
            images=np.array(d["images"], dtype=np.float64),
            proprio=np.array(d["proprio"], dtype=np.float64),
            actions=np.array(d["actions"], dtype=np.float64),
            success=bool(d["success"]),
        )


# ------------------------------------------------------------------ tasks


def generate_tasks(n: int, seed: int, cfg: SuiteConfig = SuiteConfig()) -> list[TaskSpec]:
    """``n`` distinct tasks ordered so each one conflicts with its predecessor.

    A conflict means sharing the object (different target) or the target
    (different object) with the previous task.
    """
    combos = [(v, o, t) for v in range(len(VERBS)) for o in range(cfg.n_objects) for t in range(cfg.n_targets)]
    if not 1 <= n <= len(combos):
        raise ValueError(f"n must be in [1, {len(combos)}], got {n}")
    rng = np.random.default_rng(seed)
    remaining = [combos[i] for i in rng.permutation(len(combos))]
    order = [remaining.pop(0)]
    while len(order) < n:
        last = order[-1]
        conflicting = [c for c in remaining if c[1] == last[1] or c[2] == last[2]]
        pool = conflicting or remaining
        order.append(pool[int(rng.integers(len(pool)))])
        remaining.remove(order[-1])
    shapes = tuple(int(s) for s in rng.integers(0, 2, size=cfg.n_objects))
    return [
        TaskSpec(task_id=i, verb=v, object=o, target=t, object_shapes=shapes, t_max=cfg.t_max)
        for i, (v, o, t) in enumerate(order)
    ]


# -------------------------------------------------------------- simulator


def initial_state(spec: TaskSpec, rng: np.random.Generator, cfg: SuiteConfig = SuiteConfig()) -> SimState:
    slots = np.array(cfg.object_slots)[rng.permutation(cfg.n_objects)]
    objects = slots + rng.uniform(-cfg.object_jitter, cfg.object_jitter, size=slots.shape)
    targets = np.array(cfg.target_centers) + rng.uniform(-cfg.target_jitter, cfg.target_jitter, (cfg.n_targets, 2))
    (x0, x1), (y0, y1) = cfg.gripper_start
    gripper = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    return SimState(gripper=gripper, objects=np.clip(objects, 0, 1), targets=np.clip(targets, 0, 1))


def step(state: SimState, action: np.ndarray, cfg: SuiteConfig = SuiteConfig()) -> SimState:
    """Advance one timestep; returns a new state and leaves ``state`` intact."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    if not np.isfinite(a).all():
        raise FloatingPointError("non-finite action")
    s = state.copy()
    move = a[:2] * cfg.max_step
    s.gripper = np.clip(s.gripper + move, 0.0, 1.0)
    if np.any(move != 0):
        s.heading = float(np.arctan2(move[1], move[0]) / np.pi)
    if a[2] > 0:
        if s.holding < 0:
            d = np.linalg.norm(s.objects - s.gripper, axis=1)
            nearest = int(np.argmin(d))
            if d[nearest] <= cfg.grasp_radius:
                s.holding = nearest
    else:
        s.holding = -1
    if s.holding >= 0:
        s.objects[s.holding] = s.gripper
    s.t += 1
    _check_state(s)
    return s


def _check_state(s: SimState) -> None:
    if not (np.isfinite(s.gripper).all() and np.isfinite(s.objects).all()):
        raise FloatingPointError("simulator state became non-finite")
    if np.any(s.gripper < 0) or np.any(s.gripper > 1) or np.any(s.objects < 0) or np.any(s.objects > 1):
        raise AssertionError("simulator state left the unit box")


def is_success(state: SimState, spec: TaskSpec, cfg: SuiteConfig = SuiteConfig()) -> bool:
    if state.holding == spec.object:
        return False
    d = np.linalg.norm(state.objects[spec.object] - state.targets[spec.target])
    return bool(d <= cfg.target_radius)


def _pixel(p: np.ndarray, n: int) -> tuple[int, int]:
    return min(int(p[1] * n), n - 1), min(int(p[0] * n), n - 1)


_SHAPE_OFFSETS = {
    0: ((0, 0), (0, 1), (1, 0), (1, 1)),
    1: ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)),
}
_RING = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


def render(state: SimState | None, spec: TaskSpec | None = None, cfg: SuiteConfig = SuiteConfig()) -> Observation:
    """Rasterise targets, objects and gripper into a ``C x n x n`` grid.

    ``state=None`` renders the empty scene.
    """
    n = cfg.image_size
    img = np.zeros((cfg.channels, n, n))
    if state is None:
        return Observation(img, np.zeros(cfg.proprio_dim))

    def paint(r, c, value):
        if 0 <= r < n and 0 <= c < n:
            img[:, r, c] = np.maximum(img[:, r, c], value)

    for center in state.targets:
        r, c = _pixel(center, n)
        for dr, dc in _RING:
            paint(r + dr, c + dc, np.full(cfg.channels, 0.3))
    shapes = spec.object_shapes if spec is not None else (0,) * len(state.objects)
    for k, pos in enumerate(state.objects):
        r, c = _pixel(pos, n)
        for dr, dc in _SHAPE_OFFSETS[shapes[k]]:
            paint(r + dr, c + dc, COLORS[k % len(COLORS)][: cfg.channels])
    r, c = _pixel(state.gripper, n)
    paint(r, c, np.full(cfg.channels, 0.6 if state.holding >= 0 else 1.0))
    proprio = np.array([state.gripper[0], state.gripper[1], float(state.holding >= 0), state.heading])
    return Observation(img, proprio)


# ----------------------------------------------------------------- expert


def _toward(pos: np.ndarray, goal: np.ndarray, cfg: SuiteConfig) -> np.ndarray:
    return np.clip((goal - pos) / cfg.max_step, -1.0, 1.0)


def expert_action(spec: TaskSpec, state: SimState, cfg: SuiteConfig = SuiteConfig()) -> np.ndarray:
    """One proportional-controller action for the current state."""
    obj = state.objects[spec.object]
    goal = state.targets[spec.target]
    if state.holding == spec.object:
        if np.linalg.norm(obj - goal) <= spec.release_tol:
            return np.array([0.0, 0.0, -1.0])
        return np.append(_toward(state.gripper, goal, cfg), 1.0)
    if state.holding >= 0:
        return np.array([0.0, 0.0, -1.0])
    if is_success(state, spec, cfg):
        return np.array([0.0, 0.0, -1.0])
    if np.linalg.norm(state.gripper - obj) <= spec.grasp_tol:
        return np.array([0.0, 0.0, 1.0])
    return np.append(_toward(state.gripper, obj, cfg), -1.0)


def scripted_expert(
    spec: TaskSpec, state: SimState, rng: np.random.Generator | None = None, cfg: SuiteConfig = SuiteConfig()
) -> np.ndarray:
    """``horizon x action_dim`` chunk obtained by running the controller forward.

    The controller is deterministic; ``rng`` is accepted for interface
    symmetry with stochastic experts and is unused.
    """
    chunk = np.zeros((cfg.horizon, cfg.action_dim))
    s = state
    for h in range(cfg.horizon):
        chunk[h] = expert_action(spec, s, cfg)
        s = step(s, chunk[h], cfg)
    return chunk


def expert_episode(
    spec: TaskSpec, rng: np.random.Generator, cfg: SuiteConfig = SuiteConfig()
) -> tuple[Trajectory, SimState]:
    state = initial_state(spec, rng, cfg)
    images, proprio, actions = [], [], []
    success = False
    for _ in range(spec.t_max):
        obs = render(state, spec, cfg)
        chunk = scripted_expert(spec, state, rng, cfg)
        images.append(obs.image)
        proprio.append(obs.proprio)
        actions.append(chunk)
        state = step(state, chunk[0], cfg)
        if is_success(state, spec, cfg):
            success = True
            break
    traj = Trajectory(
        task_id=spec.task_id,
        instruction=spec.instruction,
        images=np.array(images),
        proprio=np.array(proprio),
        actions=np.array(actions),
        success=success,
    )
    return traj, state


def collect_demos(
    spec: TaskSpec, n_demos: int, rng: np.random.Generator, cfg: SuiteConfig = SuiteConfig(), max_factor: int = 3
) -> list[Trajectory]:
    """Keep successful expert episodes until ``n_demos`` are collected."""
    demos: list[Trajectory] = []
    for _ in range(n_demos * max_factor):
        traj, _ = expert_episode(spec, rng, cfg)
        if traj.success:
            demos.append(traj.freeze())
            if len(demos) == n_demos:
                return demos
    raise RuntimeError(f"task {spec.task_id}: only {len(demos)}/{n_demos} expert demos succeeded")


# ---------------------------------------------------------------- rollouts

@dataclass
class PolicyInput:
    """What a policy sees at a re-planning step.

    ``states`` is privileged simulator state; learned policies ignore it and
    only the scripted expert reads it.
    """

    images: np.ndarray
    proprio: np.ndarray
    instructions: np.ndarray
    rngs: list[np.random.Generator]
    states: list[SimState]


PolicyFn = Callable[[PolicyInput], np.ndarray]


@dataclass
class RolloutTrace:
    states: list[SimState] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    success: bool = False


def rollout_many(
    policy_fn: PolicyFn,
    spec: TaskSpec,
    rngs: Sequence[np.random.Generator],
    t_max: int | None = None,
    cfg: SuiteConfig = SuiteConfig(),
    keep_trace: bool = False,
) -> list[RolloutTrace]:
    """Run ``len(rngs)`` episodes in lockstep, re-planning every ``horizon`` steps.

    Each episode draws its layout and its sampling noise from its own rng, so
    results do not depend on how many episodes share the batch.
    """
    t_max = spec.t_max if t_max is None else t_max
    states = [initial_state(spec, r, cfg) for r in rngs]
    traces = [RolloutTrace(states=[s] if keep_trace else []) for s in states]
    active = list(range(len(states)))
    chunks = None
    for t in range(t_max):
        if not active:
            break
        if t % cfg.horizon == 0:
            obs = [render(states[i], spec, cfg) for i in active]
            inp = PolicyInput(
                images=np.stack([o.image for o in obs]),
                proprio=np.stack([o.proprio for o in obs]),
                instructions=np.tile(spec.instruction, (len(active), 1)),
                rngs=[rngs[i] for i in active],
                states=[states[i] for i in active],
            )
            chunks = dict(zip(active, policy_fn(inp)))
        still = []
        for i in active:
            a = chunks[i][t % cfg.horizon]
            states[i] = step(states[i], a, cfg)
            if keep_trace:
                traces[i].states.append(states[i])
                traces[i].actions.append(a)
            if is_success(states[i], spec, cfg):
                traces[i].success = True
            else:
                still.append(i)
        active = still
    return traces


def rollout(
    policy_fn: PolicyFn,
    spec: TaskSpec,
    rng: np.random.Generator,
    t_max: int | None = None,
    cfg: SuiteConfig = SuiteConfig(),
) -> tuple[bool, RolloutTrace]:
    trace = rollout_many(policy_fn, spec, [rng], t_max, cfg, keep_trace=True)[0]
    return trace.success, trace


def expert_policy(spec: TaskSpec, cfg: SuiteConfig = SuiteConfig()) -> PolicyFn:
    """The scripted expert as a policy_fn (reads privileged state)."""

    def act(inp: PolicyInput) -> np.ndarray:
        return np.stack([scripted_expert(spec, s, None, cfg) for s in inp.states])

    return act


def zero_policy(cfg: SuiteConfig = SuiteConfig()) -> PolicyFn:
    def act(inp: PolicyInput) -> np.ndarray:
        return np.zeros((len(inp.states), cfg.horizon, cfg.action_dim))

    return act


# ------------------------------------------------------------------- files


def save_demos(path: str | Path, demos: Sequence[Trajectory]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        f.write(json.dumps({"schema_version": SCHEMA_VERSION, "kind": "trajectories", "count": len(demos)}) + "\n")
        for d in demos:
            f.write(json.dumps(d.to_json()) + "\n")
    tmp.replace(path)


def load_demos(path: str | Path) -> list[Trajectory]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported demo schema {header.get('schema_version')}")
        return [Trajectory.from_json(json.loads(line)) for line in f if line.strip()]


def suite_manifest(specs: Sequence[TaskSpec], seed: int, cfg: SuiteConfig = SuiteConfig()) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "config": dataclasses.asdict(cfg),
        "tasks": [dict(dataclasses.asdict(s), instruction=s.describe()) for s in specs],
    }


def layout_signature(state: SimState, cfg: SuiteConfig = SuiteConfig()) -> tuple[int, ...]:
    """Slot index occupied by each object (coarse layout identity)."""
    slots = np.array(cfg.object_slots)
    return tuple(int(np.argmin(np.linalg.norm(slots - p, axis=1))) for p in state.objects)


def all_layout_signatures(cfg: SuiteConfig = SuiteConfig()) -> set[tuple[int, ...]]:
    return set(itertools.permutations(range(cfg.n_objects)))
