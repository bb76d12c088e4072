import dataclasses
import math

import numpy as np
import pytest

import hinflow.sim as sim
import hinflow.trainloop as tl
from hinflow import datasets, planner, policy, tracker
from hinflow.errors import ConfigError


def tiny_cfg(**kw):
    """A seconds-scale config: tiny model budgets, tiny data."""
    cfg = tl.RunConfig(
        task="place_disc",
        seed=0,
        n_videos=3,
        n_demos=1,
        video_jitter=0.15,
        planner=planner.PlannerConfig(train_steps=30, resample=1),
        policy=policy.PolicyConfig(pretrain_steps=30, batch=16),
        online=tl.OnlineConfig(budget=120, explore_sigma=0.1),
        eval=tl.EvalConfig(cadence=60, episodes=2),
    )
    for key, val in kw.items():
        if isinstance(val, dict):
            setattr(cfg, key, dataclasses.replace(getattr(cfg, key), **val))
        else:
            setattr(cfg, key, val)
    return cfg


@pytest.fixture(scope="module")
def tiny_run():
    return tl.run_hinflow(tiny_cfg())


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(online={"ratio": 0.0}).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(eval={"cadence": 70}).validate()  # does not divide 120
    with pytest.raises(ConfigError):
        tiny_cfg(policy={"h_in": 17}).validate()
    tiny_cfg().validate()


def test_rollout_length_equals_horizon(tiny_run):
    _, art = tiny_run
    task = art["task"]
    ep = tl.rollout(
        task, art["planner"], art["policy"], seed=5,
        explore_sigma=0.1, rng=np.random.default_rng(0),
        point_rng=np.random.default_rng(1),
    )
    assert ep.t_len == task.horizon
    assert len(ep.states) == task.horizon + 1


def test_rollout_zero_policy_never_moves():
    cfg = tiny_cfg()
    task = tl.make_task(cfg)
    pol = policy.PolicyModel(cfg.policy, np.random.default_rng(0))
    ep = tl.rollout(task, None, pol, seed=3, explore_sigma=0.0,
                    point_rng=np.random.default_rng(2))
    starts = ep.states[0].gripper
    assert all(st.gripper == starts for st in ep.states)
    assert np.all(ep.actions == 0.0)


def test_run_budget_zero_single_row():
    cfg = tiny_cfg(online={"budget": 0})
    report, art = tl.run_hinflow(cfg)
    assert len(report.rows) == 1
    assert report.rows[0].env_step == 0
    assert art["gradient_updates"] == 0


def test_schedule_accounting(tiny_run):
    report, art = tiny_run
    # ratio 1: updates deferred while the buffer is under one batch, then
    # caught up; total stays within one episode of ratio * env steps
    assert art["env_steps"] >= 120
    assert abs(art["gradient_updates"] - art["env_steps"]) <= 60
    assert report.rows[-1].env_step == art["env_steps"]


def test_buffer_growth_matches_episodes(tiny_run):
    _, art = tiny_run
    total = sum(ep.t_len for ep, _ in art["collected"])
    assert len(art["buffer"]) == min(total, 50_000)
    assert art["buffer"].pushed == total


def test_hindsight_invariant_on_buffer(tiny_run):
    _, art = tiny_run
    task = art["task"]
    by_id = {}
    for ep, pts in art["collected"]:
        by_id[id(ep)] = pts
    for tr in art["buffer"].items:
        pts = by_id[id(tr.episode)]
        proj = tracker.project(tr.episode.states[tr.t], pts, task.image_size)
        clamped = np.clip(proj, 0.0, float(task.image_size))
        assert np.array_equal(tr.flow[:, 0, :], clamped)
        # full provenance: every row matches this episode's own trajectory
        traj = tracker.track_episode(tr.episode.states, pts, task.image_size)
        window = tracker.make_flow_window(traj, tr.t, tr.flow.shape[1] - 1, task.image_size)
        assert np.array_equal(tr.flow, window)


def test_no_success_queries_during_collection(monkeypatch):
    cfg = tiny_cfg(online={"budget": 60}, eval={"cadence": 60, "episodes": 1})
    calls = {"n": 0, "phase": "setup"}
    real = sim.is_success

    def spy(state, task):
        if calls["phase"] == "collect":
            calls["n"] += 1
        return real(state, task)

    monkeypatch.setattr(sim, "is_success", spy)
    monkeypatch.setattr(tl.sim, "is_success", spy)

    real_rollout = tl.rollout

    def phased_rollout(*args, **kw):
        prev = calls["phase"]
        if kw.get("explore_sigma", 0) > 0:
            calls["phase"] = "collect"
        out = real_rollout(*args, **kw)
        calls["phase"] = prev
        return out

    monkeypatch.setattr(tl, "rollout", phased_rollout)
    tl.run_hinflow(cfg)
    assert calls["n"] == 0


def test_determinism_bit_identical_reports():
    cfg = tiny_cfg(online={"budget": 60}, eval={"cadence": 60, "episodes": 2})
    r1, _ = tl.run_hinflow(cfg)
    r2, _ = tl.run_hinflow(cfg)
    for a, b in zip(r1.rows, r2.rows):
        assert a.env_step == b.env_step
        assert a.success_rate == b.success_rate
        assert a.stage_mean == b.stage_mean
        assert a.policy_loss == b.policy_loss
        assert a.planner_loss == b.planner_loss


def test_parallel_eval_matches_serial(tiny_run):
    _, art = tiny_run
    task = art["task"]
    serial = tl.evaluate(task, art["planner"], art["policy"], seed=0, episodes=4, workers=1)
    parallel = tl.evaluate(task, art["planner"], art["policy"], seed=0, episodes=4, workers=3)
    assert serial == parallel


def test_bc_baseline_ignores_flows():
    cfg = tiny_cfg()
    report, art = tl.run_baseline("bc", cfg)
    assert len(report.rows) == 1
    model = art["policy"]
    assert model.cfg.zero_flow
    rng = np.random.default_rng(0)
    _, demos = datasets.generate_dataset(tl.make_task(cfg), 1, 1, 0.1, 9)
    trs = datasets.relabel_episode(demos[0], cfg.policy.h_in, 2, rng)
    tr = trs[0]
    a = model.predict_chunk(tr.obs_stack(), tr.proprio_stack(), tr.flow)
    b = model.predict_chunk(tr.obs_stack(), tr.proprio_stack(), tr.flow + 3.0)
    assert np.array_equal(a, b)


def test_atm_seg_baseline_single_row():
    report, _ = tl.run_baseline("atm_seg", tiny_cfg())
    assert len(report.rows) == 1
    assert report.rows[0].env_step == 0


def test_atm_grid_uses_grid_points():
    cfg = tiny_cfg()
    _, art = tl.run_baseline("atm_grid", cfg)
    assert art["demo_transitions"]
    flow = art["demo_transitions"][0].flow
    # grid anchors are image-fixed: row 0 must be lattice positions
    pts = tracker.sample_grid_points(tl.GRID_SIDE, 32, total=32)
    lattice = np.array([p.pixel for p in pts])
    assert np.array_equal(flow[:, 0, :], lattice)


def test_ablation_grid_shape():
    cfg = tiny_cfg()
    out = tl.run_ablation("flow_length", (4, 8), cfg, seeds=(0, 1))
    assert set(out) == {4, 8}
    assert all(len(v) == 2 for v in out.values())
    with pytest.raises(ConfigError):
        tl.run_ablation("flow_length", (5,), cfg, seeds=(0,))
    with pytest.raises(ConfigError):
        tl.run_ablation("bogus", (1,), cfg, seeds=(0,))


def test_perturbation_sigma_zero_matches_unperturbed():
    cfg = tiny_cfg(online={"budget": 60}, eval={"cadence": 60, "episodes": 2})
    base, _ = tl.run_hinflow(cfg)
    out = tl.run_perturbation((0,), cfg, seeds=(0,))
    pert = out[0][0]
    assert [r.success_rate for r in pert.rows] == [r.success_rate for r in base.rows]
    assert [r.policy_loss for r in pert.rows] == [r.policy_loss for r in base.rows]


def test_demo_seeding_prepopulates_buffer():
    cfg = tiny_cfg(online={"budget": 60, "seed_demos": True}, eval={"cadence": 60, "episodes": 1})
    _, art = tl.run_hinflow(cfg)
    demo_len = sum(tr.episode.t_len for tr in art["demo_transitions"]) // max(
        1, len({id(tr.episode) for tr in art["demo_transitions"]})
    )
    collected = sum(ep.t_len for ep, _ in art["collected"])
    assert art["buffer"].pushed == len(art["demo_transitions"]) + collected
    assert demo_len > 0


def test_generalization_distractor_scene():
    cfg = tiny_cfg(online={"budget": 60}, eval={"cadence": 60, "episodes": 2})
    res = tl.run_generalization("distractors", cfg)
    assert 0.0 <= res["variant_success"] <= 1.0
    var_cfg = dataclasses.replace(cfg, n_distractors=4)
    state, _ = sim.reset(tl.make_task(var_cfg), 0)
    assert len(state.distractors) >= 3
