"""End-to-end orchestration: planner training, policy pretraining, the
online collect/relabel/update cycle, periodic evaluation, baselines, and
the ablation/perturbation/generalization studies.

Success is never queried during collection; evaluation rolls out with
exploration disabled and judges a trajectory successful if any visited
state satisfies the task predicate.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import datasets, tracker
from . import sim
from .datasets import EpisodeRecord, ReplayBuffer
from .errors import ConfigError
from .planner import PlannerConfig, PlannerModel, perturb_flow, train_planner
from .policy import (
    DwellState,
    EnsembleState,
    PolicyConfig,
    PolicyModel,
    explore,
    pretrain,
    update_online,
)
from .nncore import Adam

log = logging.getLogger("hinflow.trainloop")

GRID_SIDE = 6  # 6x6 lattice trimmed to 32 points for the grid-query baseline


@dataclass
class OnlineConfig:
    budget: int = 20_000
    ratio: float = 1.0
    explore_sigma: float = 0.1
    dwell_steps: int = 8
    buffer_capacity: int = 50_000
    seed_demos: bool = False
    perturb_sigma_px: float = 0.0


@dataclass
class EvalConfig:
    cadence: int = 2_000
    episodes: int = 20
    workers: int = 1


@dataclass
class RunConfig:
    experiment: str = "hinflow"
    task: str = "place_disc"
    seed: int = 0
    image_size: int = 32
    horizon: int | None = None
    n_distractors: int = 0
    embodiment: str = "A"
    novel_object: bool = False
    n_videos: int = 100
    n_demos: int = 1
    video_jitter: float = 0.08
    grid_points: bool = False
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.online.budget < 0:
            raise ConfigError("online budget must be >= 0")
        if self.online.ratio <= 0:
            raise ConfigError("updates-per-env-step ratio must be positive")
        if self.eval.cadence <= 0 or (self.online.budget and self.online.budget % self.eval.cadence):
            raise ConfigError(
                f"eval cadence {self.eval.cadence} must divide the budget {self.online.budget}"
            )
        if self.policy.h_in > self.planner.h_out:
            raise ConfigError(
                f"policy flow length {self.policy.h_in} exceeds planner horizon {self.planner.h_out}"
            )
        if self.n_videos < 1:
            raise ConfigError("need at least one video")
        return self


@dataclass
class CheckpointRow:
    env_step: int
    success_rate: float
    stage_mean: float
    policy_loss: float
    planner_loss: float
    wall_s: float


@dataclass
class RunReport:
    experiment: str
    task: str
    seed: int
    rows: list = field(default_factory=list)

    def final_success(self) -> float:
        return self.rows[-1].success_rate

    def base_success(self) -> float:
        return self.rows[0].success_rate


def make_task(cfg: RunConfig) -> sim.TaskSpec:
    kw = dict(
        image_size=cfg.image_size,
        n_distractors=cfg.n_distractors,
        embodiment=cfg.embodiment,
    )
    if cfg.horizon is not None:
        kw["horizon"] = cfg.horizon
    return sim.make_task(cfg.task, novel_object=cfg.novel_object, **kw)


def _rng(seed, *tags):
    parts = [int(seed) & 0x7FFFFFFF]
    for t in tags:
        parts.append(int(np.uint32(hash(t) & 0xFFFFFFFF)) if isinstance(t, str) else int(t))
    return np.random.default_rng(np.random.SeedSequence(parts))


def _seed_int(seed, *tags) -> int:
    return int(_rng(seed, *tags).integers(0, 2**31 - 1))


# ---------------------------------------------------------------------------
# rollout and evaluation


def zero_flow_window(k_points: int, rows: int) -> np.ndarray:
    return np.zeros((k_points, rows, 2))


def rollout(task: sim.TaskSpec, planner_model, policy_model: PolicyModel, seed: int,
            explore_sigma: float = 0.0, perturb_sigma_px: float = 0.0,
            rng=None, point_rng=None, grid_points: bool = False) -> EpisodeRecord:
    """Collect one episode under planner guidance.

    Every chunk boundary re-projects the query points, queries the planner
    (optionally perturbing the flow), and predicts a fresh action chunk;
    each step blends pending chunks and optionally explores. Episodes always
    run to the task horizon.
    """
    cfg = policy_model.cfg
    size = task.image_size
    state, obs = sim.reset(task, seed)
    if grid_points:
        points = tracker.sample_grid_points(GRID_SIDE, size, total=cfg.k_points)
    else:
        counts = tracker.DEFAULT_POINT_COUNTS[task.name]
        points = tracker.sample_task_points(state, point_rng, counts, size)
    ens = EnsembleState(cfg.chunk, cfg.ensemble_m)
    dwell = DwellState()
    states, frames, proprios, actions = [state], [obs.image], [obs.proprio], []
    for t in range(task.horizon):
        if t % cfg.chunk_every == 0:
            stack_idx = [max(0, len(frames) - 1 - k) for k in range(cfg.frame_stack - 1, -1, -1)]
            obs_stack = np.asarray([frames[i] for i in stack_idx])
            pro_stack = np.asarray([proprios[i] for i in stack_idx])
            if planner_model is None:
                window = zero_flow_window(cfg.k_points, cfg.h_in + 1)
            else:
                p_t = tracker.project(state, points, size)
                window = planner_model.predict_flow(obs.image, p_t, task.task_id)
                if perturb_sigma_px > 0:
                    window = perturb_flow(window, perturb_sigma_px, rng, size)
            chunk = policy_model.predict_chunk(obs_stack, pro_stack, window)
            ens.add(t, chunk)
        a = ens.action(t)
        if explore_sigma > 0:
            a = explore(a, explore_sigma, dwell, rng, policy_dwell_steps(policy_model))
        actions.append(np.asarray(a, dtype=float))
        state, obs = sim.step(state, a, size)
        states.append(state)
        frames.append(obs.image)
        proprios.append(obs.proprio)
    return EpisodeRecord(
        task=task,
        seed=seed,
        states=states,
        frames=np.asarray(frames).astype(np.uint8),
        proprio=np.asarray(proprios),
        actions=np.asarray(actions),
    )


def policy_dwell_steps(policy_model) -> int:
    return getattr(policy_model, "dwell_steps", 8)


def _episode_outcome(episode: EpisodeRecord, task: sim.TaskSpec):
    """Post-hoc trajectory success and best stage count (evaluation only)."""
    success, best = False, 0
    for st in episode.states:
        ok, stages = sim.is_success(st, task)
        success = success or ok
        best = max(best, stages)
    return success, best


def evaluate(task: sim.TaskSpec, planner_model, policy_model, seed: int,
             episodes: int = 20, perturb_sigma_px: float = 0.0,
             grid_points: bool = False, workers: int = 1):
    """Success rate and mean stage count over `episodes` fresh scenes.

    Exploration is off; per-episode seeds derive from the run seed, so
    parallel and serial evaluation see identical scenes and return
    identical results (merged by episode index).
    """

    def one(i):
        ep_seed = _seed_int(seed, "eval-episode", i)
        ep = rollout(
            task, planner_model, policy_model, ep_seed,
            explore_sigma=0.0,
            perturb_sigma_px=perturb_sigma_px,
            rng=_rng(seed, "eval-perturb", i),
            point_rng=_rng(seed, "eval-points", i),
            grid_points=grid_points,
        )
        return _episode_outcome(ep, task)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(one, range(episodes)))
    else:
        outcomes = [one(i) for i in range(episodes)]
    succ = float(np.mean([o[0] for o in outcomes]))
    stages = float(np.mean([o[1] for o in outcomes]))
    return succ, stages


# ---------------------------------------------------------------------------
# stage builders shared by the runs and the CLI


def build_datasets(cfg: RunConfig, task=None):
    task = task or make_task(cfg)
    return datasets.generate_dataset(
        task, cfg.n_videos, cfg.n_demos, cfg.video_jitter, _seed_int(cfg.seed, "data")
    )


def build_planner(cfg: RunConfig, videos, extra_videos=None, seed=None) -> tuple:
    """Annotate videos and train the planner; returns (model, final loss)."""
    seed = cfg.seed if seed is None else seed
    all_videos = list(videos) + list(extra_videos or [])
    ann = datasets.annotate_videos(
        all_videos,
        h_out=cfg.planner.h_out,
        resample=cfg.planner.resample,
        seed=_seed_int(seed, "annotate"),
        grid_side=GRID_SIDE if cfg.grid_points else None,
    )
    model = PlannerModel(cfg.planner, _rng(seed, "planner-init"))
    curve = train_planner(model, ann, seed=_seed_int(seed, "planner-train"))
    return model, curve[-1][1]


def relabel_demos(cfg: RunConfig, demos):
    rng = _rng(cfg.seed, "demo-relabel")
    out = []
    for i, d in enumerate(demos):
        out.extend(
            datasets.relabel_episode(
                d, cfg.policy.h_in, cfg.policy.frame_stack, rng,
                episode_id=-(i + 1),
                grid_side=GRID_SIDE if cfg.grid_points else None,
            )
        )
    return out


def build_policy(cfg: RunConfig, demo_transitions) -> tuple:
    model = PolicyModel(cfg.policy, _rng(cfg.seed, "policy-init"))
    model.dwell_steps = cfg.online.dwell_steps
    loss = float("nan")
    if demo_transitions and cfg.policy.pretrain_steps > 0:
        curve = pretrain(model, demo_transitions, seed=_seed_int(cfg.seed, "pretrain"))
        loss = curve[-1][1]
    return model, loss


# ---------------------------------------------------------------------------
# the main loop


def run_hinflow(cfg: RunConfig, planner_override=None, eval_task=None,
                row_callback=None, keep_collected: bool = True):
    """Full online-imitation run; returns (RunReport, artifacts).

    Artifacts carry the trained models, the replay buffer, and the collected
    episodes with their query points, so invariants can be audited post hoc.
    """
    cfg.validate()
    task = make_task(cfg)
    videos, demos = build_datasets(cfg, task)
    if planner_override is not None:
        planner_model, planner_loss = planner_override, float("nan")
    else:
        planner_model, planner_loss = build_planner(cfg, videos)
    demo_transitions = relabel_demos(cfg, demos)
    policy_model, policy_loss = build_policy(cfg, demo_transitions)
    report, artifacts = run_online(
        cfg, task, planner_model, policy_model, demo_transitions,
        planner_loss=planner_loss, policy_loss=policy_loss,
        eval_task=eval_task, row_callback=row_callback, keep_collected=keep_collected,
    )
    artifacts["demos"] = demos
    artifacts["videos"] = videos
    return report, artifacts


def run_online(cfg: RunConfig, task, planner_model, policy_model, demo_transitions=(),
               planner_loss=float("nan"), policy_loss=float("nan"), eval_task=None,
               row_callback=None, keep_collected: bool = True):
    """The collect / relabel / update / evaluate cycle on prepared models."""
    cfg.validate()
    t_start = time.perf_counter()
    eval_task = eval_task or task
    buffer = ReplayBuffer(cfg.online.buffer_capacity)
    if cfg.online.seed_demos:
        buffer.extend(demo_transitions)
    opt = Adam(policy_model.params(), lr=cfg.policy.lr)
    sample_rng = _rng(cfg.seed, "buffer-sample")
    relabel_rng = _rng(cfg.seed, "online-relabel")

    report = RunReport(experiment=cfg.experiment, task=cfg.task, seed=cfg.seed)
    collected = []

    def checkpoint(env_step):
        succ, stages = evaluate(
            eval_task, planner_model, policy_model, cfg.seed,
            episodes=cfg.eval.episodes,
            perturb_sigma_px=cfg.online.perturb_sigma_px,
            grid_points=cfg.grid_points,
            workers=cfg.eval.workers,
        )
        row = CheckpointRow(
            env_step=env_step,
            success_rate=succ,
            stage_mean=stages,
            policy_loss=policy_loss,
            planner_loss=planner_loss,
            wall_s=time.perf_counter() - t_start,
        )
        report.rows.append(row)
        if row_callback:
            row_callback(row)
        log.info("%s seed %d step %d success %.2f", cfg.experiment, cfg.seed, env_step, succ)

    checkpoint(0)
    env_step = 0
    episode_idx = 0
    updates_owed = 0.0
    next_mark = cfg.eval.cadence
    while env_step < cfg.online.budget:
        ep = rollout(
            task, planner_model, policy_model,
            _seed_int(cfg.seed, "collect", episode_idx),
            explore_sigma=cfg.online.explore_sigma,
            perturb_sigma_px=cfg.online.perturb_sigma_px,
            rng=_rng(cfg.seed, "explore", episode_idx),
            point_rng=_rng(cfg.seed, "collect-points", episode_idx),
            grid_points=cfg.grid_points,
        )
        transitions, points = datasets.relabel_episode(
            ep, cfg.policy.h_in, cfg.policy.frame_stack, relabel_rng,
            episode_id=episode_idx,
            grid_side=GRID_SIDE if cfg.grid_points else None,
            return_points=True,
        )
        buffer.extend(transitions)
        if keep_collected:
            collected.append((ep, points))
        env_step += ep.t_len
        episode_idx += 1
        updates_owed += cfg.online.ratio * ep.t_len
        while updates_owed >= 1.0 and len(buffer) >= cfg.policy.batch:
            policy_loss = update_online(
                policy_model, opt, buffer.sample(cfg.policy.batch, sample_rng)
            )
            updates_owed -= 1.0
        if env_step >= next_mark:
            checkpoint(env_step)
            next_mark = (env_step // cfg.eval.cadence + 1) * cfg.eval.cadence
    if cfg.online.budget > 0 and len(buffer) < cfg.policy.batch:
        raise ConfigError(
            f"budget exhausted with buffer below one batch "
            f"({len(buffer)} < {cfg.policy.batch})"
        )
    if report.rows[-1].env_step != env_step:
        checkpoint(env_step)
    artifacts = {
        "task": task,
        "planner": planner_model,
        "policy": policy_model,
        "buffer": buffer,
        "collected": collected,
        "demo_transitions": demo_transitions,
        "optimizer": opt,
        "gradient_updates": opt.state.t,
        "env_steps": env_step,
        "episodes": episode_idx,
    }
    return report, artifacts


# ---------------------------------------------------------------------------
# baselines and studies


def run_baseline(kind: str, cfg: RunConfig):
    """Offline baselines: bc (flow zeroed), atm_seg, atm_grid (grid queries)."""
    if kind not in ("bc", "atm_grid", "atm_seg"):
        raise ConfigError(f"unknown baseline {kind!r}")
    sub = replace(
        cfg,
        experiment=kind,
        online=replace(cfg.online, budget=0),
        policy=replace(cfg.policy, zero_flow=(kind == "bc")),
        grid_points=(kind == "atm_grid"),
    )
    if kind == "bc":
        # flow input is zeroed everywhere, so the planner is never consulted
        sub.validate()
        task = make_task(sub)
        _, demos = build_datasets(sub, task)
        demo_transitions = relabel_demos(sub, demos)
        policy_model, policy_loss = build_policy(sub, demo_transitions)
        t0 = time.perf_counter()
        succ, stages = evaluate(
            task, None, policy_model, sub.seed,
            episodes=sub.eval.episodes, workers=sub.eval.workers,
        )
        report = RunReport(experiment=kind, task=sub.task, seed=sub.seed)
        report.rows.append(
            CheckpointRow(0, succ, stages, policy_loss, float("nan"), time.perf_counter() - t0)
        )
        return report, {"policy": policy_model, "task": task}
    return run_hinflow(sub, keep_collected=False)


def run_ablation(axis: str, values, cfg: RunConfig, seeds):
    """Grid of full runs along one axis; returns {value: [RunReport per seed]}."""
    if axis == "flow_length":
        allowed = {4, 8, 12, 16}
    elif axis == "n_demos":
        allowed = {0, 1, 3, 5}
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    if not set(values) <= allowed:
        raise ConfigError(f"{axis} values {values} must be within {sorted(allowed)}")
    out = {}
    for v in values:
        runs = []
        for seed in seeds:
            sub = replace(cfg, seed=seed, experiment=f"{cfg.experiment}_{axis}_{v}")
            if axis == "flow_length":
                sub = replace(sub, policy=replace(cfg.policy, h_in=v))
            else:
                sub = replace(sub, n_demos=v)
            report, _ = run_hinflow(sub, keep_collected=False)
            runs.append(report)
        out[v] = runs
    return out


def run_perturbation(sigmas, cfg: RunConfig, seeds):
    """Flow-noise study: each sigma runs with perturbation in collection and eval."""
    out = {}
    for sigma in sigmas:
        if sigma < 0:
            raise ConfigError(f"perturbation sigma must be >= 0, got {sigma}")
        runs = []
        for seed in seeds:
            sub = replace(
                cfg, seed=seed, experiment=f"{cfg.experiment}_perturb_{sigma}",
                online=replace(cfg.online, perturb_sigma_px=float(sigma)),
            )
            report, _ = run_hinflow(sub, keep_collected=False)
            runs.append(report)
        out[sigma] = runs
    return out


def run_generalization(variant: str, cfg: RunConfig, base_artifacts=None):
    """Zero-shot scene variants and the cross-embodiment comparison."""
    if variant in ("distractors", "novel_object"):
        var_cfg = replace(
            cfg,
            n_distractors=4 if variant == "distractors" else cfg.n_distractors,
            novel_object=(variant == "novel_object"),
        )
        var_task = make_task(var_cfg)
        videos, _ = build_datasets(cfg)
        var_videos, _ = datasets.generate_dataset(
            var_task, cfg.n_videos, 0, cfg.video_jitter, _seed_int(cfg.seed, "variant-data")
        )
        planner_model, _ = build_planner(cfg, videos, extra_videos=var_videos)
        if base_artifacts is None:
            report, base_artifacts = run_hinflow(cfg, planner_override=planner_model,
                                                 keep_collected=False)
        else:
            report = None
        policy_model = base_artifacts["policy"]
        task = base_artifacts["task"]
        orig = evaluate(task, planner_model, policy_model, cfg.seed,
                        episodes=cfg.eval.episodes, workers=cfg.eval.workers)
        zshot = evaluate(var_task, planner_model, policy_model, cfg.seed,
                         episodes=cfg.eval.episodes, workers=cfg.eval.workers)
        return {
            "variant": variant,
            "original_success": orig[0],
            "original_stage_mean": orig[1],
            "variant_success": zshot[0],
            "variant_stage_mean": zshot[1],
            "report": report,
        }
    if variant == "embodiment":
        tgt_cfg = replace(cfg, embodiment="B", n_demos=5, experiment=f"{cfg.experiment}_embodiment")
        tgt_cfg.validate()
        src_cfg = replace(cfg, embodiment="A")
        src_videos, _ = build_datasets(src_cfg)
        _, tgt_demos = datasets.generate_dataset(
            make_task(tgt_cfg), 1, tgt_cfg.n_demos, 0.0, _seed_int(cfg.seed, "target-demos")
        )
        demo_videos = [
            EpisodeRecord(d.task, d.seed, d.states, d.frames, d.proprio, None) for d in tgt_demos
        ]
        cross_planner, _ = build_planner(tgt_cfg, demo_videos, extra_videos=src_videos)
        solo_planner, _ = build_planner(tgt_cfg, demo_videos)
        with_cross, _ = run_hinflow(tgt_cfg, planner_override=cross_planner, keep_collected=False)
        without_cross, _ = run_hinflow(
            replace(tgt_cfg, experiment=f"{tgt_cfg.experiment}_nocross"),
            planner_override=solo_planner, keep_collected=False,
        )
        return {"variant": variant, "with_cross": with_cross, "without_cross": without_cross}
    raise ConfigError(f"unknown generalization variant {variant!r}")
