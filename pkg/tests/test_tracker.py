import math

import numpy as np
import pytest

from hinflow import sim, tracker
from hinflow.errors import DimensionError, SamplingError


def fresh_state(seed=0, task_name="place_disc"):
    task = sim.make_task(task_name)
    state, _ = sim.reset(task, seed)
    return task, state


def test_default_counts_give_32_points_inside_shapes():
    task, state = fresh_state()
    rng = np.random.default_rng(0)
    pts = tracker.sample_task_points(state, rng, tracker.DEFAULT_POINT_COUNTS["place_disc"])
    assert len(pts) == 32
    obj = state.objects[0]
    for p in pts:
        if p.anchor == "object":
            assert math.hypot(*p.offset) <= obj.size[0] + 1e-12
        else:
            assert math.hypot(*p.offset) <= sim.PROFILES["A"].size + 1e-12


def test_zero_counts_rejected():
    _, state = fresh_state()
    with pytest.raises(SamplingError):
        tracker.sample_task_points(state, np.random.default_rng(0), {})


def test_missing_entity_named_in_error():
    _, state = fresh_state()
    with pytest.raises(SamplingError) as err:
        tracker.sample_task_points(state, np.random.default_rng(0), {"object2": 4})
    assert "object2" in str(err.value)


def test_disc_sampling_uniform_centroid():
    _, state = fresh_state()
    rng = np.random.default_rng(1)
    pts = tracker.sample_task_points(state, rng, {"object0": 10000})
    offs = np.array([p.offset for p in pts])
    assert np.abs(offs.mean(axis=0)).max() < 0.01 * state.objects[0].size[0] * 100
    assert np.abs(offs.mean(axis=0)).max() < 0.01


def test_grid_points_trim_to_32():
    pts = tracker.sample_grid_points(6, total=32)
    assert len(pts) == 32
    assert all(p.anchor == "image" for p in pts)


def test_grid_single_center_point():
    pts = tracker.sample_grid_points(1)
    assert len(pts) == 1
    assert pts[0].offset == (16.0, 16.0)


def test_grid_spacing_uniform():
    pts = tracker.sample_grid_points(5)
    xs = sorted({p.offset[0] for p in pts})
    gaps = np.diff(xs)
    assert np.abs(gaps - gaps[0]).max() < 1e-12


def test_project_affine_arithmetic():
    _, state = fresh_state()
    obj = sim.SceneObject(0.5, 0.5, 0.0, "disc", (0.2,))
    st = sim.SceneState(
        gripper=(0.1, 0.1), grip_closed=False, attached=None, attach_offset=None,
        objects=(obj,), distractors=(), goal=state.goal, profile="A", step=0,
    )
    p = tracker.QueryPoint("object", 0, (0.1, 0.0), (0.0, 0.0))
    assert np.allclose(tracker.project(st, [p], 32), [[19.2, 16.0]])
    rotated = sim.SceneObject(0.5, 0.5, math.pi / 2, "disc", (0.2,))
    st_rot = sim.SceneState(
        gripper=(0.1, 0.1), grip_closed=False, attached=None, attach_offset=None,
        objects=(rotated,), distractors=(), goal=state.goal, profile="A", step=0,
    )
    assert np.allclose(tracker.project(st_rot, [p], 32), [[16.0, 19.2]])


def test_project_translation_linearity():
    _, state = fresh_state()
    obj = state.objects[0]
    moved = sim.SceneState(
        gripper=state.gripper, grip_closed=False, attached=None, attach_offset=None,
        objects=(sim.SceneObject(obj.x + 0.1, obj.y, 0.0, obj.shape, obj.size),),
        distractors=(), goal=state.goal, profile="A", step=0,
    )
    p = tracker.QueryPoint("object", 0, (0.01, -0.02), (0.0, 0.0))
    before = tracker.project(state, [p], 32)
    after = tracker.project(moved, [p], 32)
    assert np.allclose(after - before, [[3.2, 0.0]])


def test_track_static_scene_constant():
    _, state = fresh_state()
    rng = np.random.default_rng(2)
    pts = tracker.sample_task_points(state, rng, {"gripper": 4, "object0": 4})
    traj = tracker.track_episode([state] * 7, pts, 32)
    assert traj.shape == (8, 7, 2)
    assert np.all(traj == traj[:, :1, :])


def test_track_rigid_motion_matches_closed_form():
    # 1000 random rigid motions: translate the anchor, check exact transform
    rng = np.random.default_rng(3)
    _, state = fresh_state()
    pts = tracker.sample_task_points(state, rng, {"object0": 4})
    obj = state.objects[0]
    worst = 0.0
    for _ in range(1000):
        dx, dy = rng.uniform(-0.2, 0.2, 2)
        moved = sim.SceneState(
            gripper=state.gripper, grip_closed=False, attached=None, attach_offset=None,
            objects=(sim.SceneObject(obj.x + dx, obj.y + dy, 0.0, obj.shape, obj.size),),
            distractors=(), goal=state.goal, profile="A", step=0,
        )
        got = tracker.project(moved, pts, 32)
        want = np.array([((obj.x + dx + p.offset[0]) * 32, (obj.y + dy + p.offset[1]) * 32) for p in pts])
        worst = max(worst, np.abs(got - want).max())
    assert worst < 1e-9


def test_grasp_carry_rigidity_oracle():
    task, state = fresh_state(17)
    rng = np.random.default_rng(17)
    pts = tracker.sample_task_points(state, rng, {"gripper": 6, "object0": 6})
    states = [state]
    for _ in range(task.horizon):
        a = sim.scripted_expert(state, task)
        state, _ = sim.step(state, a, task.image_size)
        states.append(state)
    traj = tracker.track_episode(states, pts, 32)
    attached_steps = [i for i, st in enumerate(states) if st.attached == 0]
    assert len(attached_steps) >= 3
    a0, a1 = attached_steps[0], attached_steps[-1]
    # while attached, gripper- and object-anchored displacements coincide
    disp = traj[:, a1, :] - traj[:, a0, :]
    assert np.abs(disp - disp[0]).max() < 1e-9


def test_flow_window_slice_and_padding():
    traj = np.arange(10, dtype=float).reshape(1, 10, 1).repeat(2, axis=2)
    win = tracker.make_flow_window(traj, 0, 8, 32)
    assert win.shape == (1, 9, 2)
    assert np.array_equal(win[0, :, 0], np.arange(9.0))
    win = tracker.make_flow_window(traj, 8, 8, 32)
    assert np.array_equal(win[0, :, 0], [8, 9, 9, 9, 9, 9, 9, 9, 9])
    win = tracker.make_flow_window(traj, 9, 4, 32)
    assert np.all(win[0, :, 0] == 9.0)


def test_flow_window_requires_positive_horizon():
    traj = np.zeros((1, 5, 2))
    with pytest.raises(DimensionError):
        tracker.make_flow_window(traj, 0, 0, 32)


def test_flow_window_clamped_to_image():
    traj = np.array([[[-3.0, 40.0], [10.0, 10.0]]])
    win = tracker.make_flow_window(traj, 0, 1, 32)
    assert win[0, 0, 0] == 0.0 and win[0, 0, 1] == 32.0


def test_window_head_equals_projection():
    task, state = fresh_state(23)
    rng = np.random.default_rng(23)
    pts = tracker.sample_task_points(state, rng, tracker.DEFAULT_POINT_COUNTS["place_disc"])
    states = [state]
    for _ in range(20):
        a = sim.scripted_expert(state, task)
        state, _ = sim.step(state, a, task.image_size)
        states.append(state)
    traj = tracker.track_episode(states, pts, 32)
    for t in (0, 5, 13):
        win = tracker.make_flow_window(traj, t, 8, 32)
        assert np.array_equal(win[:, 0, :], tracker.project(states[t], pts, 32))
