from __future__ import annotations

import numpy as np
import pytest

from continual_vla import replay as R
from continual_vla import suite as S


@pytest.fixture(scope="module")
def demos():
    specs = S.generate_tasks(2, 0)
    rng = np.random.default_rng(0)
    return {s.task_id: S.collect_demos(s, 4, rng) for s in specs}


def test_store_single_demo(demos):
    mem = R.ReplayMemory()
    assert mem.store(0, demos[0][:1], np.random.default_rng(0)) == 0
    stored = mem.entries[0]
    assert np.array_equal(stored.actions, demos[0][0].actions)
    assert not stored.actions.flags.writeable
    assert stored.actions is not demos[0][0].actions
    assert mem.manifest() == [{"task_id": 0, "trajectory_index": 0, "n_steps": len(demos[0][0])}]


def test_store_is_seeded(demos):
    picks = []
    for _ in range(2):
        mem = R.ReplayMemory()
        picks.append(mem.store(0, demos[0], np.random.default_rng(42)))
    assert picks[0] == picks[1]


def test_store_contract_errors(demos):
    mem = R.ReplayMemory()
    mem.store(0, demos[0], np.random.default_rng(0))
    with pytest.raises(R.ReplayError):
        mem.store(0, demos[0], np.random.default_rng(0))
    with pytest.raises(R.ReplayError):
        mem.store(1, [], np.random.default_rng(0))
    with pytest.raises(R.ReplayError):
        R.ReplayMemory().steps()


def test_selection_is_uniform(demos):
    n_demo, trials = 4, 10_000
    rng = np.random.default_rng(1)
    counts = np.zeros(n_demo)
    for _ in range(trials):
        counts[R.ReplayMemory().store(0, demos[0], rng)] += 1
    p = 1 / n_demo
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) < 3 * sigma)


def test_empty_memory_batch_is_all_current(demos):
    cur = R.StepDataset.from_trajectories(demos[1])
    b = R.make_batch(cur, R.ReplayMemory(), 8, 0.5, np.random.default_rng(0))
    assert len(b) == 8 and not b.replay_mask.any()
    b = R.make_batch(cur, None, 8, 0.5, np.random.default_rng(0))
    assert not b.replay_mask.any()


@pytest.mark.parametrize("bs,frac,expected", [(8, 0.5, 4), (7, 0.5, 4), (10, 0.25, 3), (128, 0.5, 64)])
def test_replay_count(demos, bs, frac, expected):
    cur = R.StepDataset.from_trajectories(demos[1])
    mem = R.ReplayMemory()
    mem.store(0, demos[0], np.random.default_rng(0))
    b = R.make_batch(cur, mem, bs, frac, np.random.default_rng(0))
    assert b.replay_mask.sum() == expected
    assert np.all(b.data.task_ids[b.replay_mask] == 0)
    assert np.all(b.data.task_ids[~b.replay_mask] == 1)


def test_replay_indices_uniform_over_memory_steps(demos):
    mem = R.ReplayMemory()
    mem.store(0, demos[0][:1], np.random.default_rng(0))
    steps = mem.steps()
    n = len(steps)
    # make each step identifiable by its proprio row
    keys = {tuple(p): i for i, p in enumerate(steps.proprio)}
    assert len(keys) == n
    cur = R.StepDataset.from_trajectories(demos[1])
    rng = np.random.default_rng(2)
    counts = np.zeros(n)
    draws = 0
    while draws < 10_000:
        b = R.make_batch(cur, mem, 8, 0.5, rng)
        for p in b.data.proprio[b.replay_mask]:
            counts[keys[tuple(p)]] += 1
            draws += 1
    p = 1 / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3.5 * sigma)


def test_make_batch_contract_errors(demos):
    cur = R.StepDataset.from_trajectories(demos[1])
    with pytest.raises(R.ReplayError):
        R.make_batch(cur, None, 1, 0.5, np.random.default_rng(0))
    with pytest.raises(R.ReplayError):
        R.make_batch(cur, None, 8, 1.5, np.random.default_rng(0))
    with pytest.raises(R.ReplayError):
        R.StepDataset.from_trajectories([])
