from __future__ import annotations

import numpy as np
import pytest

from continual_vla import suite as S

CFG = S.SuiteConfig()


def test_generate_tasks_seeded_and_distinct():
    assert S.generate_tasks(10, 3) == S.generate_tasks(10, 3)
    specs = S.generate_tasks(10, 3)
    assert len({tuple(s.instruction) for s in specs}) == 10
    with pytest.raises(ValueError):
        S.generate_tasks(13, 0)


@pytest.mark.parametrize("seed", range(5))
def test_consecutive_tasks_conflict(seed):
    specs = S.generate_tasks(5, seed)
    for a, b in zip(specs, specs[1:]):
        assert a.object == b.object or a.target == b.target


def test_layout_distributions_overlap():
    specs = S.generate_tasks(5, 0)
    sigs = []
    for s in specs:
        rng = np.random.default_rng(s.task_id)
        sigs.append({S.layout_signature(S.initial_state(s, rng)) for _ in range(1000)})
    for i in range(len(sigs)):
        for j in range(i + 1, len(sigs)):
            assert sigs[i] & sigs[j]
    assert sigs[0] <= S.all_layout_signatures()


def _state_holding(spec):
    state = S.initial_state(spec, np.random.default_rng(0))
    state.gripper = state.targets[spec.target].copy()
    state.objects[spec.object] = state.gripper.copy()
    state.holding = spec.object
    return state


def test_release_only_chunk_at_target():
    spec = S.generate_tasks(1, 0)[0]
    chunk = S.scripted_expert(spec, _state_holding(spec))
    assert np.all(chunk[:, :2] == 0) and chunk[0, 2] < 0


def test_expert_distance_decreases_on_free_path():
    spec = S.generate_tasks(1, 0)[0]
    state = S.initial_state(spec, np.random.default_rng(1))
    dists = [np.linalg.norm(state.gripper - state.objects[spec.object])]
    while dists[-1] > spec.grasp_tol:
        state = S.step(state, S.expert_action(spec, state))
        dists.append(np.linalg.norm(state.gripper - state.objects[spec.object]))
    assert all(b < a for a, b in zip(dists, dists[1:]))


@pytest.mark.parametrize("task", range(5))
def test_expert_success_rate(task):
    spec = S.generate_tasks(5, 0)[task]
    rngs = [np.random.default_rng(1000 + e) for e in range(200)]
    traces = S.rollout_many(S.expert_policy(spec), spec, rngs)
    assert np.mean([t.success for t in traces]) >= 0.95


def test_zero_policy_fails_and_rollout_is_deterministic():
    spec = S.generate_tasks(1, 0)[0]
    ok, _ = S.rollout(S.zero_policy(), spec, np.random.default_rng(0))
    assert not ok
    a = S.rollout(S.expert_policy(spec), spec, np.random.default_rng(3))
    b = S.rollout(S.expert_policy(spec), spec, np.random.default_rng(3))
    assert a[0] and a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1].actions, b[1].actions))


def test_render_empty_and_translation():
    obs = S.render(None)
    assert not obs.image.any()
    spec = S.generate_tasks(1, 0)[0]
    state = S.initial_state(spec, np.random.default_rng(0))
    state.objects[:] = [[0.1, 0.4], [0.45, 0.4], [0.7, 0.2], [0.7, 0.6]]
    state.gripper[:] = [0.95, 0.05]
    a = S.render(state, spec)
    assert np.array_equal(a.image, S.render(state, spec).image)
    moved = state.copy()
    moved.objects[0, 0] += 1.0 / CFG.image_size
    b = S.render(moved, spec)
    colour = S.COLORS[0][: CFG.channels]
    mask_a = np.all(a.image == colour[:, None, None], axis=0)
    mask_b = np.all(b.image == colour[:, None, None], axis=0)
    assert mask_a.any() and np.array_equal(np.roll(mask_a, 1, axis=1), mask_b)


def test_collect_demos_contract():
    spec = S.generate_tasks(3, 0)[2]
    demos = S.collect_demos(spec, 3, np.random.default_rng(0))
    assert len(demos) == 3
    assert all(d.success and np.array_equal(d.instruction, spec.instruction) for d in demos)
    (one,) = S.collect_demos(spec, 1, np.random.default_rng(0))
    assert one.success and one.actions.shape[1:] == (CFG.horizon, CFG.action_dim)


def test_demo_file_round_trip(tmp_path):
    spec = S.generate_tasks(1, 0)[0]
    demos = S.collect_demos(spec, 2, np.random.default_rng(0))
    S.save_demos(tmp_path / "d.jsonl", demos)
    back = S.load_demos(tmp_path / "d.jsonl")
    assert len(back) == 2
    assert np.array_equal(back[1].images, demos[1].images)


def test_step_rejects_non_finite_action():
    spec = S.generate_tasks(1, 0)[0]
    state = S.initial_state(spec, np.random.default_rng(0))
    with pytest.raises(FloatingPointError):
        S.step(state, np.array([np.nan, 0.0, 0.0]))


def test_manifest_lists_tasks():
    specs = S.generate_tasks(3, 0)
    m = S.suite_manifest(specs, 0)
    assert [t["task_id"] for t in m["tasks"]] == [0, 1, 2]
    assert m["tasks"][0]["instruction"].startswith("put the")
