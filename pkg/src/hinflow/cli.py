"""Command-line entry point: dataset generation, staged training, evaluation,
and the experiment presets.

Exit codes: 0 on success, 1 for internal errors, 2 for user or
configuration mistakes. Verbosity comes from the HINFLOW_LOG environment
variable (debug / info / warning / error).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datasets, planner as planner_mod, policy as policy_mod, report as report_mod
from . import trainloop
from .config import FileConfig, config_to_dict, load_config, save_config
from .errors import ConfigError, DependencyError, HinflowError
from .nncore import load_checkpoint, save_checkpoint
from .planner import PlannerModel, endpoint_error_px, train_planner
from .policy import PolicyModel, pretrain

log = logging.getLogger("hinflow")

PRESETS = ("main", "ablation_flow", "ablation_demos", "perturb", "generalize", "baselines")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def _setup_logging():
    level = os.environ.get("HINFLOW_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_seeds(text: str):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(s) for s in text.split(","))


def _load(args) -> FileConfig:
    overrides = {}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    cfg = load_config(args.config, overrides)
    return cfg


def _out_dir(args, cfg: FileConfig, which: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(getattr(cfg.paths, which))


# ---------------------------------------------------------------------------
# gen-data


def _dataset_dir_signature(cfg: FileConfig) -> dict:
    run = cfg.run
    return {
        "task": run.task,
        "seed": run.seed,
        "n_videos": run.n_videos,
        "n_demos": run.n_demos,
        "video_jitter": run.video_jitter,
        "image_size": run.image_size,
        "n_distractors": run.n_distractors,
        "embodiment": run.embodiment,
        "generator_version": datasets.GENERATOR_VERSION,
    }


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg, "data_dir")
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.overwrite:
        print(f"refusing to overwrite existing dataset at {out} (use --overwrite)", file=sys.stderr)
        return 2
    run = cfg.run
    task = trainloop.make_task(run)
    videos, demos = trainloop.build_datasets(run, task)
    ann = datasets.annotate_videos(
        videos,
        h_out=run.planner.h_out,
        resample=run.planner.resample,
        seed=trainloop._seed_int(run.seed, "annotate"),
        grid_side=trainloop.GRID_SIDE if run.grid_points else None,
    )
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "demos").mkdir(parents=True, exist_ok=True)
    files = {"videos": [], "demos": []}
    for i, ep in enumerate(videos):
        rel = f"videos/video_{i:04d}.hfc"
        datasets.episode_to_file(out / rel, ep)
        files["videos"].append(rel)
    for i, ep in enumerate(demos):
        rel = f"demos/demo_{i:04d}.hfc"
        datasets.episode_to_file(out / rel, ep)
        files["demos"].append(rel)
    manifest = _dataset_dir_signature(cfg)
    manifest["files"] = files
    manifest["annotation_samples"] = len(ann)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(videos)} videos + {len(demos)} demos to {out}")
    return 0


def load_dataset_dir(path) -> tuple:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DependencyError(f"missing dataset manifest {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    videos = [datasets.episode_from_file(path / rel) for rel in manifest["files"]["videos"]]
    demos = [datasets.episode_from_file(path / rel) for rel in manifest["files"]["demos"]]
    return videos, demos, manifest


# ---------------------------------------------------------------------------
# staged training


def _loss_csv(path, curve):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss!r}\n")
            fh.flush()


def cmd_train_planner(args) -> int:
    cfg = _load(args)
    run = cfg.run
    data_dir = Path(args.data) if args.data else Path(cfg.paths.data_dir)
    videos, _, _ = load_dataset_dir(data_dir)
    ann = datasets.annotate_videos(
        videos,
        h_out=run.planner.h_out,
        resample=run.planner.resample,
        seed=trainloop._seed_int(run.seed, "annotate"),
        grid_side=trainloop.GRID_SIDE if run.grid_points else None,
    )
    model = PlannerModel(run.planner, trainloop._rng(run.seed, "planner-init"))
    curve = train_planner(model, ann, seed=trainloop._seed_int(run.seed, "planner-train"))
    out = _out_dir(args, cfg, "checkpoint_dir")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "planner.hfc", "planner", model.params(), run.planner.to_dict())
    _loss_csv(out / "planner_train.csv", curve)
    print(f"planner checkpoint: {out / 'planner.hfc'} (final loss {curve[-1][1]:.6f})")
    return 0


def cmd_pretrain_policy(args) -> int:
    cfg = _load(args)
    run = cfg.run
    data_dir = Path(args.data) if args.data else Path(cfg.paths.data_dir)
    _, demos, _ = load_dataset_dir(data_dir)
    transitions = trainloop.relabel_demos(run, demos)
    model = PolicyModel(run.policy, trainloop._rng(run.seed, "policy-init"))
    curve = pretrain(model, transitions, seed=trainloop._seed_int(run.seed, "pretrain"))
    out = _out_dir(args, cfg, "checkpoint_dir")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "policy_base.hfc", "policy", model.params(), run.policy.to_dict())
    _loss_csv(out / "pretrain.csv", curve)
    final = curve[-1][1] if curve else float("nan")
    print(f"policy checkpoint: {out / 'policy_base.hfc'} (final loss {final:.6f})")
    return 0


def _load_model(path, expect_kind):
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing {expect_kind} checkpoint {path}")
    kind, params, hyper, _ = load_checkpoint(path)
    if kind != expect_kind:
        raise ConfigError(f"{path} holds a {kind!r} checkpoint, expected {expect_kind!r}")
    if expect_kind == "planner":
        return PlannerModel.from_checkpoint(params, hyper)
    return PolicyModel.from_checkpoint(params, hyper)


def cmd_train_online(args) -> int:
    cfg = _load(args)
    run = cfg.run
    ckpt_dir = Path(args.out) if args.out else Path(cfg.paths.checkpoint_dir)
    planner_path = Path(args.planner) if args.planner else ckpt_dir / "planner.hfc"
    policy_path = Path(args.policy) if args.policy else ckpt_dir / "policy_base.hfc"
    planner_model = _load_model(planner_path, "planner")
    policy_model = _load_model(policy_path, "policy")
    policy_model.dwell_steps = run.online.dwell_steps
    data_dir = Path(args.data) if args.data else Path(cfg.paths.data_dir)
    _, demos, _ = load_dataset_dir(data_dir)
    demo_transitions = trainloop.relabel_demos(run, demos)
    task = trainloop.make_task(run)
    report_dir = Path(cfg.paths.report_dir)
    report = trainloop.RunReport(experiment=run.experiment, task=run.task, seed=run.seed)
    writer = report_mod.CsvWriter(report_dir / f"{run.experiment}_seed{run.seed}.csv", report)
    try:
        report, artifacts = trainloop.run_online(
            run, task, planner_model, policy_model, demo_transitions,
            row_callback=writer.write_row, keep_collected=False,
        )
    finally:
        writer.close()
    save_checkpoint(
        ckpt_dir / "policy_final.hfc", "policy", artifacts["policy"].params(), run.policy.to_dict()
    )
    report_mod.render_success_figure(
        report_dir / f"{run.experiment}_seed{run.seed}.png",
        {run.experiment: [report]},
        title=f"{run.task} (seed {run.seed})",
    )
    print(
        f"online run done: base {report.base_success():.2f} -> final {report.final_success():.2f}; "
        f"report {report_dir / f'{run.experiment}_seed{run.seed}.csv'}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load(args)
    run = cfg.run
    planner_model = _load_model(args.planner, "planner") if args.planner else None
    policy_model = _load_model(args.policy, "policy")
    task = trainloop.make_task(run)
    succ, stages = trainloop.evaluate(
        task, planner_model, policy_model, run.seed,
        episodes=args.episodes or run.eval.episodes,
        perturb_sigma_px=run.online.perturb_sigma_px,
        grid_points=run.grid_points,
        workers=args.threads or 1,
    )
    print(json.dumps({"task": run.task, "success_rate": succ, "stage_mean": stages}))
    return 0


# ---------------------------------------------------------------------------
# experiment presets


def _run_one(run_cfg, kind):
    if kind == "hinflow":
        rep, _ = trainloop.run_hinflow(run_cfg, keep_collected=False)
        return rep
    rep, _ = trainloop.run_baseline(kind, run_cfg)
    return rep


def _expand_main(run_cfg, seeds):
    jobs = []
    for kind in ("hinflow", "bc", "atm_seg", "atm_grid"):
        for seed in seeds:
            jobs.append((f"{kind}", replace(run_cfg, seed=seed, experiment=kind), kind))
    return jobs


def cmd_experiment(args) -> int:
    if args.name not in PRESETS:
        print(f"unknown preset {args.name!r}; choose from {', '.join(PRESETS)}", file=sys.stderr)
        return 2
    cfg = _load(args)
    run = cfg.run
    seeds = _parse_seeds(args.seeds) if args.seeds else DEFAULT_SEEDS
    out = _out_dir(args, cfg, "report_dir") / args.name
    out.mkdir(parents=True, exist_ok=True)
    threads = max(1, args.threads or 1)
    grouped: dict = {}

    def submit(jobs):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(lambda j: _run_one(j[1], j[2]), jobs))
        else:
            results = [_run_one(j[1], j[2]) for j in jobs]
        for (name, _, _), rep in zip(jobs, results):
            grouped.setdefault(name, []).append(rep)

    if args.name == "main":
        submit(_expand_main(run, seeds))
    elif args.name == "baselines":
        jobs = [
            (kind, replace(run, seed=seed, experiment=kind), kind)
            for kind in ("bc", "atm_seg", "atm_grid")
            for seed in seeds
        ]
        submit(jobs)
    elif args.name == "ablation_flow":
        for v, reps in trainloop.run_ablation("flow_length", (4, 8, 12, 16), run, seeds).items():
            grouped[f"flow_{v}"] = reps
    elif args.name == "ablation_demos":
        for v, reps in trainloop.run_ablation("n_demos", (0, 1, 3, 5), run, seeds).items():
            grouped[f"demos_{v}"] = reps
    elif args.name == "perturb":
        for s, reps in trainloop.run_perturbation((0, 2, 4, 6), run, seeds).items():
            grouped[f"sigma_{s}"] = reps
    elif args.name == "generalize":
        gen_rows = {}
        for variant in ("distractors", "novel_object"):
            res = trainloop.run_generalization(variant, replace(run, seed=seeds[0]))
            gen_rows[variant] = {
                "original_success": res["original_success"],
                "variant_success": res["variant_success"],
            }
            if res["report"] is not None:
                grouped[f"{variant}_training"] = [res["report"]]
        emb = trainloop.run_generalization("embodiment", replace(run, seed=seeds[0]))
        grouped["embodiment_with_cross"] = [emb["with_cross"]]
        grouped["embodiment_without_cross"] = [emb["without_cross"]]
        (out / "generalization.json").write_text(
            json.dumps(gen_rows, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        report_mod.render_bar_figure(
            out / "generalization.png",
            {
                f"{v}:{k}": gen_rows[v][k]
                for v in gen_rows
                for k in ("original_success", "variant_success")
            },
            ylabel="success rate",
            title="zero-shot generalization",
        )

    for name, reps in grouped.items():
        for rep in reps:
            report_mod.write_csv(out / f"{name}_seed{rep.seed}.csv", rep)
    if grouped:
        report_mod.write_summary_json(out / "summary.json", grouped)
        report_mod.render_success_figure(out / f"{args.name}.png", grouped, title=args.name)
    print(f"experiment {args.name}: reports in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hinflow",
        description="Flow-conditioned online imitation in a planar manipulation sim",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="run seed override")
        p.add_argument("--out", default=None, help=out_help)

    p = sub.add_parser("gen-data", help="generate and annotate the video/demo dataset")
    common(p, "dataset output directory")
    p.add_argument("--overwrite", action="store_true", help="replace an existing dataset")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-planner", help="train the flow planner on a dataset")
    common(p, "checkpoint output directory")
    p.add_argument("--data", default=None, help="dataset directory")
    p.set_defaults(fn=cmd_train_planner)

    p = sub.add_parser("pretrain-policy", help="pretrain the policy on demos")
    common(p, "checkpoint output directory")
    p.add_argument("--data", default=None, help="dataset directory")
    p.set_defaults(fn=cmd_pretrain_policy)

    p = sub.add_parser("train-online", help="online self-improvement loop")
    common(p, "checkpoint directory (planner/policy inputs, outputs)")
    p.add_argument("--data", default=None, help="dataset directory")
    p.add_argument("--planner", default=None, help="planner checkpoint path")
    p.add_argument("--policy", default=None, help="base policy checkpoint path")
    p.set_defaults(fn=cmd_train_online)

    p = sub.add_parser("eval", help="evaluate checkpoints")
    common(p, "unused")
    p.add_argument("--planner", default=None, help="planner checkpoint path")
    p.add_argument("--policy", required=True, help="policy checkpoint path")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("experiment", help="run a preset experiment grid")
    p.add_argument("name", help=f"one of: {', '.join(PRESETS)}")
    common(p, "report output directory")
    p.add_argument("--seeds", default=None, help="seed range N..M or comma list")
    p.add_argument("--threads", type=int, default=None, help="worker threads for grid runs")
    p.set_defaults(fn=cmd_experiment)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DependencyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except HinflowError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
