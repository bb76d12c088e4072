import numpy as np
import pytest

from hinflow import datasets, planner, sim
from hinflow.errors import DimensionError, TrainingError
from hinflow.nncore import Tape


@pytest.fixture(scope="module")
def tiny_ann():
    task = sim.make_task("place_disc")
    videos, _ = datasets.generate_dataset(task, n_videos=3, n_demos=0, jitter=0.15, seed=77)
    return datasets.annotate_videos(videos, h_out=16, resample=1, seed=3)


def fresh_model(seed=0, **kw):
    cfg = planner.PlannerConfig(**kw)
    return planner.PlannerModel(cfg, np.random.default_rng(seed))


def test_zero_init_predicts_stationary_flow(tiny_ann):
    model = fresh_model()
    img = tiny_ann.image(0)
    pts = tiny_ann.points[0]
    window = model.predict_flow(img, pts, task_id=0)
    assert window.shape == (32, 17, 2)
    for row in range(17):
        assert np.allclose(window[:, row, :], pts, atol=1e-12)


def test_output_shape_at_defaults(tiny_ann):
    model = fresh_model(1)
    window = model.predict_flow(tiny_ann.image(3), tiny_ann.points[3], 0)
    assert window.shape == (32, 16 + 1, 2)


def test_flow_head_anchoring_any_params(tiny_ann):
    model = fresh_model(2)
    for p in model.params().values():
        p.data += np.random.default_rng(0).normal(0, 0.3, p.data.shape)
    pts = tiny_ann.points[5]
    window = model.predict_flow(tiny_ann.image(5), pts, 0)
    assert np.array_equal(window[:, 0, :], pts)
    assert window[:, 1:, :].min() >= 0.0 and window[:, 1:, :].max() <= 32.0


def test_permutation_equivariance(tiny_ann):
    model = fresh_model(3)
    planner.train_planner(model, tiny_ann, steps=20, seed=1)
    img, pts = tiny_ann.image(2), tiny_ann.points[2]
    perm = np.random.default_rng(5).permutation(32)
    base = model.predict_flow(img, pts, 0)
    permuted = model.predict_flow(img, pts[perm], 0)
    assert np.allclose(base[perm], permuted, atol=1e-10)


def test_wrong_point_count_rejected(tiny_ann):
    model = fresh_model(4)
    with pytest.raises(DimensionError):
        model.predict_flow(tiny_ann.image(0), tiny_ann.points[0][:16], 0)


def test_initial_loss_matches_closed_form(tiny_ann):
    model = fresh_model(5)
    # zero-init head predicts p_t everywhere, so the unaugmented loss is the
    # mean squared normalized displacement of the evaluation slice
    idx = np.arange(len(tiny_ann))
    images = np.stack([tiny_ann.image(i) for i in idx])
    pts = tiny_ann.points[idx]
    flows = tiny_ann.flows[idx]
    with Tape():
        loss = planner.batch_loss(
            model, images, pts / 32.0, flows / 32.0, tiny_ann.task_ids[idx]
        )
    oracle = planner.initial_loss_oracle(pts, flows, 32)
    assert abs(float(loss.data) - oracle) < 1e-12


def test_training_determinism(tiny_ann):
    m1 = fresh_model(6)
    m2 = fresh_model(6)
    planner.train_planner(m1, tiny_ann, steps=25, seed=9)
    planner.train_planner(m2, tiny_ann, steps=25, seed=9)
    for name in m1.params():
        assert np.array_equal(m1.params()[name].data, m2.params()[name].data)


def test_training_empty_dataset_rejected(tiny_ann):
    empty = datasets.AnnotatedSet(
        episodes=[], ep_idx=np.zeros(0, dtype=np.int64), t_idx=np.zeros(0, dtype=np.int64),
        task_ids=np.zeros(0, dtype=np.int64), points=np.zeros((0, 32, 2)),
        flows=np.zeros((0, 32, 16, 2)),
    )
    with pytest.raises(TrainingError):
        planner.train_planner(fresh_model(7), empty, steps=5, seed=0)


def test_loss_decreases(tiny_ann):
    model = fresh_model(8)
    curve = planner.train_planner(model, tiny_ann, steps=400, seed=4, log_every=50)
    assert curve[-1][1] < curve[0][1]


def test_overfit_single_sample():
    task = sim.make_task("place_disc")
    videos, _ = datasets.generate_dataset(task, n_videos=1, n_demos=0, jitter=0.15, seed=5)
    ann = datasets.annotate_videos(videos, h_out=16, resample=1, seed=1)
    one = datasets.AnnotatedSet(
        episodes=ann.episodes,
        ep_idx=ann.ep_idx[10:11], t_idx=ann.t_idx[10:11], task_ids=ann.task_ids[10:11],
        points=ann.points[10:11], flows=ann.flows[10:11],
    )
    cfg = planner.PlannerConfig(
        mask_ratio=0.0, coord_jitter_px=0.0, flip_augment=False, lr=5e-3, batch=4
    )
    model = planner.PlannerModel(cfg, np.random.default_rng(9))
    planner.train_planner(model, one, steps=1500, seed=2)
    window = model.predict_flow(one.image(0), one.points[0], 0)
    err = np.linalg.norm(window[:, -1, :] - one.flows[0][:, -1, :], axis=-1).mean()
    assert err < 0.5


def test_perturb_flow_sigma_zero_identity():
    rng = np.random.default_rng(0)
    flow = rng.uniform(0, 32, (32, 9, 2))
    out = planner.perturb_flow(flow, 0.0, rng, 32)
    assert np.array_equal(out, flow)


def test_perturb_flow_row0_unchanged():
    rng = np.random.default_rng(1)
    flow = rng.uniform(5, 25, (32, 9, 2))
    out = planner.perturb_flow(flow, 4.0, rng, 32)
    assert np.array_equal(out[:, 0, :], flow[:, 0, :])
    assert not np.array_equal(out[:, 1:, :], flow[:, 1:, :])
    assert out.min() >= 0.0 and out.max() <= 32.0


def test_perturb_flow_final_row_magnitude():
    # final row displacement is |N(0, sigma)| in 2D: mean = sigma * sqrt(pi/2)
    rng = np.random.default_rng(2)
    flow = np.full((2000, 9, 2), 16.0)
    out = planner.perturb_flow(flow, 2.0, rng, 32)
    mags = np.linalg.norm(out[:, -1, :] - flow[:, -1, :], axis=-1)
    expect = 2.0 * np.sqrt(np.pi / 2.0)
    assert abs(mags.mean() - expect) / expect < 0.05


def test_perturb_flow_linear_ramp():
    rng = np.random.default_rng(3)
    flow = np.full((4, 9, 2), 16.0)
    out = planner.perturb_flow(flow, 1.5, rng, 32)
    delta = out - flow
    h = 8
    for i in range(1, 9):
        assert np.allclose(delta[:, i, :], delta[:, h, :] * (i / h), atol=1e-12)
