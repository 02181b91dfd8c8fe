"""One-trajectory-per-task replay memory and mixed batch sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .suite import Trajectory


class ReplayError(ValueError):
    pass


@dataclass
class StepDataset:
    """Flat timestep arrays built from a list of trajectories."""

    images: np.ndarray
    proprio: np.ndarray
    instructions: np.ndarray
    actions: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, idx):
        return StepDataset(
            self.images[idx], self.proprio[idx], self.instructions[idx], self.actions[idx], self.task_ids[idx]
        )

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> StepDataset:
        if not trajs:
            raise ReplayError("no trajectories")
        return cls(
            images=np.concatenate([t.images for t in trajs]),
            proprio=np.concatenate([t.proprio for t in trajs]),
            instructions=np.concatenate([np.tile(t.instruction, (len(t), 1)) for t in trajs]),
            actions=np.concatenate([t.actions for t in trajs]),
            task_ids=np.concatenate([np.full(len(t), t.task_id) for t in trajs]),
        )


@dataclass
class Batch:
    data: StepDataset
    replay_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.replay_mask)


class ReplayMemory:
    """Exactly one stored trajectory per completed task; entries are read-only."""

    def __init__(self):
        self.entries: dict[int, Trajectory] = {}
        self._manifest: list[dict] = []
        self._steps: StepDataset | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self.entries

    def store(self, task_id: int, demos: Sequence[Trajectory], rng: np.random.Generator) -> int:
        """Insert one uniformly chosen demo; returns its index in ``demos``."""
        if task_id in self.entries:
            raise ReplayError(f"task {task_id} already has a stored trajectory")
        if not demos:
            raise ReplayError(f"no demos to store for task {task_id}")
        idx = int(rng.integers(len(demos)))
        src = demos[idx]
        traj = Trajectory(
            task_id=src.task_id,
            instruction=src.instruction.copy(),
            images=src.images.copy(),
            proprio=src.proprio.copy(),
            actions=src.actions.copy(),
            success=src.success,
        ).freeze()
        self.entries[task_id] = traj
        self._manifest.append({"task_id": int(task_id), "trajectory_index": idx, "n_steps": len(traj)})
        self._steps = None
        return idx

    def steps(self) -> StepDataset:
        if not self.entries:
            raise ReplayError("memory is empty")
        if self._steps is None:
            self._steps = StepDataset.from_trajectories([self.entries[k] for k in sorted(self.entries)])
        return self._steps

    def manifest(self) -> list[dict]:
        return [dict(m) for m in self._manifest]


def replay_count(batch_size: int, replay_fraction: float) -> int:
    return math.ceil(replay_fraction * batch_size)


def make_batch(
    current: StepDataset,
    memory: ReplayMemory | None,
    batch_size: int,
    replay_fraction: float,
    rng: np.random.Generator,
) -> Batch:
    """Mix ``ceil(replay_fraction * batch_size)`` replayed steps with current-task steps.

    Replay rows come first. With an empty (or absent) memory the whole batch
    is current data and the mask is all false.
    """
    if batch_size < 2:
        raise ReplayError("batch_size must be >= 2")
    if len(current) == 0:
        raise ReplayError("current dataset is empty")
    if not 0.0 <= replay_fraction <= 1.0:
        raise ReplayError("replay_fraction must lie in [0, 1]")
    n_rep = replay_count(batch_size, replay_fraction) if memory is not None and len(memory) else 0
    cur_idx = rng.integers(len(current), size=batch_size - n_rep)
    if n_rep == 0:
        return Batch(current[cur_idx], np.zeros(batch_size, dtype=bool))
    mem = memory.steps()
    rep_idx = rng.integers(len(mem), size=n_rep)
    parts = [mem[rep_idx], current[cur_idx]]
    data = StepDataset(*(np.concatenate([getattr(p, f) for p in parts]) for f in StepDataset.__dataclass_fields__))
    mask = np.zeros(batch_size, dtype=bool)
    mask[:n_rep] = True
    return Batch(data, mask)
