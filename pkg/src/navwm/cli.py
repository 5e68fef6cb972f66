"""Command-line orchestration: dataset generation, the two training
stages, rollout evaluation, the planning benchmark, ablation grids, and
CSV report merging. Every command is a pure function of (config, seed).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    load_config,
    save_resolved_config,
    substream_seed,
)
from .metrics import MetricReport, ate, rpe, rollout_divergence, write_metric_csv
from .model import Denoiser, checkpoint_meta, denoiser_from_checkpoint, save_checkpoint
from .perceptual import FeatureEmbedder
from .planner import cem_plan, execute_openloop, make_model_score_fn, random_plan
from .schedule import make_schedule, make_sub_schedule
from .sim import World, generate_dataset, load_dataset_csv, make_goal_task, save_dataset_csv
from .training import fixed_segments, posttrain_acc, save_curve_csv, split_dataset, train_stage1

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def worker_threads() -> int:
    """Thread cap from MWM_THREADS; defaults to the logical core count."""
    raw = os.environ.get("MWM_THREADS", "")
    if raw.strip():
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"MWM_THREADS must be an integer, got {raw!r}")
        if n < 1:
            raise ConfigError("MWM_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


class Runtime:
    """Shared handles built from a run config."""

    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.world = World(cfg.world.world_config())
        self.sched = make_schedule(cfg.diffusion.kind, cfg.diffusion.T)
        self.sub = make_sub_schedule(self.sched, cfg.diffusion.T_prime)
        self.embedder = FeatureEmbedder(cfg.world.obs_dim, cfg.perceptual.seed)
        self.hash = config_hash(cfg)

    # dataset is always read back from CSV so downstream stages see the
    # serialized (9-significant-digit) values regardless of run order
    def dataset(self):
        path = self.out / "dataset.csv"
        if not path.exists():
            self.write_dataset(path)
        return load_dataset_csv(path)

    def write_dataset(self, path):
        data = generate_dataset(
            self.world, self.cfg.world.n_traj, self.cfg.world.traj_len,
            policy_seed=substream_seed(self.cfg.master_seed, "policy"),
        )
        save_dataset_csv(path, data)

    def new_model(self, tag: str = "model-init") -> Denoiser:
        mc = self.cfg.model.model_config(
            self.cfg.world.obs_dim, substream_seed(self.cfg.master_seed, tag)
        )
        return Denoiser(mc)

    def meta(self) -> dict:
        return checkpoint_meta(
            self.cfg.model.model_config(
                self.cfg.world.obs_dim,
                substream_seed(self.cfg.master_seed, "model-init"),
            ),
            {
                "T": self.cfg.diffusion.T,
                "kind": self.cfg.diffusion.kind,
                "T_prime": self.cfg.diffusion.T_prime,
            },
        )

    def load_model(self, name: str) -> Denoiser:
        path = self.out / name
        if not path.exists():
            raise FileNotFoundError(
                f"missing checkpoint {path}; run the producing command first"
            )
        return denoiser_from_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(rt: Runtime) -> None:
    rt.write_dataset(rt.out / "dataset.csv")
    print(f"wrote {rt.out / 'dataset.csv'}")


def cmd_train_stage1(rt: Runtime) -> None:
    dataset, _ = split_dataset(rt.dataset(), rt.cfg.eval.heldout_frac)
    model = rt.new_model()
    cfg1 = rt.cfg.stage1_config(substream_seed(rt.cfg.master_seed, "stage1"))
    curve = train_stage1(dataset, model, rt.sched, cfg1)
    save_checkpoint(rt.out / "stage1.ckpt", model.params, rt.meta())
    save_curve_csv(rt.out / "stage1_curve.csv", curve)
    print(f"stage-1 final loss {curve[-1][1]:.6f} after {len(curve)} steps")


def cmd_posttrain_acc(rt: Runtime) -> None:
    dataset, _ = split_dataset(rt.dataset(), rt.cfg.eval.heldout_frac)
    model = rt.load_model("stage1.ckpt")
    acc_cfg = rt.cfg.acc_config(substream_seed(rt.cfg.master_seed, "acc"))
    curve = posttrain_acc(dataset, model, rt.sched, rt.sub, acc_cfg, rt.embedder)
    save_checkpoint(rt.out / "acc.ckpt", model.params, rt.meta())
    save_curve_csv(rt.out / "acc_curve.csv", curve)
    print(f"post-training final loss {curve[-1][1]:.6f} after {len(curve)} steps")


def _eval_report(rt: Runtime, model: Denoiser, name: str, segments, sub,
                 seed_tag: str) -> MetricReport:
    rng = np.random.default_rng(substream_seed(rt.cfg.master_seed, seed_tag))
    div = rollout_divergence(model, rt.sched, sub, segments,
                             rt.cfg.eval.horizons, rt.embedder, rng)
    report = MetricReport(model=name, seed=rt.cfg.master_seed, config_hash=rt.hash)
    for h, (pd, ffd) in div.items():
        report.horizon_perceptual[h] = pd
        report.horizon_ffd[h] = ffd
    return report


def cmd_rollout_eval(rt: Runtime) -> None:
    _, heldout = split_dataset(rt.dataset(), rt.cfg.eval.heldout_frac)
    horizon = max(rt.cfg.eval.horizons)
    segments = fixed_segments(
        heldout, horizon, rt.cfg.model.memory, rt.cfg.eval.segments_per_traj,
        substream_seed(rt.cfg.master_seed, "eval-segments"),
    )
    reports = []
    tp = rt.cfg.diffusion.T_prime
    stage1 = rt.load_model("stage1.ckpt")
    reports.append(_eval_report(rt, stage1, f"stage1-ddim{tp}", segments, rt.sub,
                                "eval-stage1"))
    baseline_sub = make_sub_schedule(rt.sched, rt.cfg.eval.baseline_T_prime)
    reports.append(_eval_report(
        rt, stage1, f"stage1-ddim{rt.cfg.eval.baseline_T_prime}", segments,
        baseline_sub, "eval-stage1-slow"))
    if (rt.out / "acc.ckpt").exists():
        acc = rt.load_model("acc.ckpt")
        reports.append(_eval_report(rt, acc, f"acc-ddim{tp}", segments, rt.sub,
                                    "eval-acc"))
    write_metric_csv(rt.out / "metrics_rollout.csv", reports)
    print(f"wrote {rt.out / 'metrics_rollout.csv'} ({len(reports)} models)")


def _bench_one_task(rt: Runtime, models: dict, task_index: int):
    cfg = rt.cfg
    task_seed = substream_seed(cfg.master_seed, f"task-{task_index}")
    task = make_goal_task(
        rt.world, task_seed, memory=cfg.model.memory, horizon=cfg.cem.horizon,
        distance_range=(cfg.cem.goal_min, cfg.cem.goal_max), task_id=task_index,
    )
    start = task.context_poses[-1]
    rows = []
    plans = []
    for name, model in models.items():
        cem_cfg = cfg.cem_config(substream_seed(cfg.master_seed, f"plan-{name}-{task_index}"))
        score_fn = make_model_score_fn(model, rt.sched, rt.sub, task.context_obs,
                                       task.goal_obs, rt.embedder, cem_cfg.sims)
        result = cem_plan(score_fn, cem_cfg, (rt.world.cfg.v_max, rt.world.cfg.w_max))
        traj, ne, ok = execute_openloop(rt.world, start, result.actions,
                                        task.goal_pose, cem_cfg.success_radius)
        n = min(len(traj.poses), len(task.demo.poses))
        rows.append((name, task_index, ne, ok,
                     ate(traj.poses[:n], task.demo.poses[:n]),
                     rpe(traj.poses[:n], task.demo.poses[:n])))
        plans.append((name, task_index, result))
    rng = np.random.default_rng(substream_seed(cfg.master_seed, f"plan-random-{task_index}"))
    cem_cfg = cfg.cem_config(0)
    actions = random_plan(cem_cfg, (rt.world.cfg.v_max, rt.world.cfg.w_max), rng)
    traj, ne, ok = execute_openloop(rt.world, start, actions, task.goal_pose,
                                    cem_cfg.success_radius)
    n = min(len(traj.poses), len(task.demo.poses))
    rows.append(("random", task_index, ne, ok,
                 ate(traj.poses[:n], task.demo.poses[:n]),
                 rpe(traj.poses[:n], task.demo.poses[:n])))
    return rows, plans


def cmd_plan_bench(rt: Runtime) -> None:
    models = {}
    if (rt.out / "acc.ckpt").exists():
        models["acc"] = rt.load_model("acc.ckpt")
    if (rt.out / "stage1.ckpt").exists():
        models["stage1"] = rt.load_model("stage1.ckpt")
    if not models:
        raise FileNotFoundError("no checkpoints in out dir; train a model first")
    n_tasks = rt.cfg.cem.n_tasks
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        results = list(pool.map(
            lambda i: _bench_one_task(rt, models, i), range(n_tasks)
        ))
    all_rows = [row for rows, _ in results for row in rows]
    all_plans = [plan for _, plans in results for plan in plans]

    with open(rt.out / "plan_episodes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "task_id", "ne", "success", "ate", "rpe"])
        for name, tid, ne, ok, a, r in sorted(all_rows, key=lambda x: (x[0], x[1])):
            writer.writerow([name, tid, f"{ne:.9g}", int(ok), f"{a:.9g}", f"{r:.9g}"])

    with open(rt.out / "plan_candidates.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "task_id", "iteration", "candidate", "score", "chosen"])
        for name, tid, res in sorted(all_plans, key=lambda x: (x[0], x[1])):
            for it in range(res.candidate_scores.shape[0]):
                for cand in range(res.candidate_scores.shape[1]):
                    chosen = int(it == res.best_iteration and cand == res.best_candidate)
                    writer.writerow([name, tid, it, cand,
                                     f"{res.candidate_scores[it, cand]:.9g}", chosen])

    with open(rt.out / "plans.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "task_id", "step", "v", "w"])
        for name, tid, res in sorted(all_plans, key=lambda x: (x[0], x[1])):
            for step, (v, w) in enumerate(res.actions):
                writer.writerow([name, tid, step, f"{v:.9g}", f"{w:.9g}"])

    reports = []
    for name in sorted({row[0] for row in all_rows}):
        rows = [row for row in all_rows if row[0] == name]
        rep = MetricReport(model=f"plan-{name}", seed=rt.cfg.master_seed,
                           config_hash=rt.hash)
        rep.sr = float(np.mean([row[3] for row in rows]))
        rep.ne = float(np.mean([row[2] for row in rows]))
        rep.ate = float(np.mean([row[4] for row in rows]))
        rep.rpe = float(np.mean([row[5] for row in rows]))
        reports.append(rep)
        print(f"{name}: SR={rep.sr:.2f} NE={rep.ne:.3f}")
    write_metric_csv(rt.out / "metrics_plan.csv", reports)


def _horizon_summary(rt: Runtime, model, segments, seed_tag):
    rng = np.random.default_rng(substream_seed(rt.cfg.master_seed, seed_tag))
    div = rollout_divergence(model, rt.sched, rt.sub, segments,
                             rt.cfg.eval.horizons, rt.embedder, rng)
    top = max(rt.cfg.eval.horizons)
    return div[top]


def cmd_ablate(rt: Runtime) -> None:
    """Train the ablation grid variants and emit one CSV per axis."""
    full = rt.dataset()
    train_set, heldout = split_dataset(full, rt.cfg.eval.heldout_frac)
    horizon = max(rt.cfg.eval.horizons)
    segments = fixed_segments(
        heldout, horizon, rt.cfg.model.memory, rt.cfg.eval.segments_per_traj,
        substream_seed(rt.cfg.master_seed, "eval-segments"),
    )
    seed = rt.cfg.master_seed

    def fresh_stage1():
        model = rt.new_model()
        train_stage1(train_set, model, rt.sched,
                     rt.cfg.stage1_config(substream_seed(seed, "stage1")))
        return model

    base = fresh_stage1()
    base_values = base.params.snapshot()

    def acc_variant(tag, **overrides):
        model = rt.new_model()
        model.params.set_values(base_values)
        acc_cfg = rt.cfg.acc_config(substream_seed(seed, f"acc-{tag}"), **overrides)
        posttrain_acc(train_set, model, rt.sched, rt.sub, acc_cfg, rt.embedder)
        return model

    variants = {
        "perceptual": acc_variant("perceptual", loss="perceptual", context="icsd"),
        "l1": acc_variant("l1", loss="l1", context="icsd"),
        "l2": acc_variant("l2", loss="l2", context="icsd"),
        "x0hat": acc_variant("x0hat", loss="perceptual", context="x0hat"),
    }
    acc_only = rt.new_model("model-init-acconly")
    posttrain_acc(train_set, acc_only, rt.sched, rt.sub,
                  rt.cfg.acc_config(substream_seed(seed, "acc-only")), rt.embedder)

    def row(model, tag):
        pd, ffd = _horizon_summary(rt, model, segments, f"ablate-eval-{tag}")
        return pd, ffd

    def emit(path, rows):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", f"ffd_{horizon}", f"perceptual_{horizon}"])
            for name, (pd, ffd) in rows:
                writer.writerow([name, f"{ffd:.9g}", f"{pd:.9g}"])

    emit(rt.out / "ablate_loss.csv", [
        ("l2", row(variants["l2"], "l2")),
        ("l1", row(variants["l1"], "l1")),
        ("perceptual", row(variants["perceptual"], "perceptual")),
    ])
    emit(rt.out / "ablate_paradigm.csv", [
        ("structure-only", row(base, "structure")),
        ("consistency-only", row(acc_only, "acc-only")),
        ("structure+consistency", row(variants["perceptual"], "both")),
    ])
    emit(rt.out / "ablate_context.csv", [
        ("x0hat", row(variants["x0hat"], "ctx-x0hat")),
        ("icsd", row(variants["perceptual"], "ctx-icsd")),
    ])
    print(f"wrote ablation tables to {rt.out}")


def cmd_report(rt: Runtime) -> None:
    """Merge metric CSVs in the out dir; no model execution."""
    sources = sorted(rt.out.glob("metrics_*.csv"))
    if not sources:
        raise FileNotFoundError(f"no metrics_*.csv files in {rt.out}")
    merged = []
    for src in sources:
        with open(src, newline="") as fh:
            merged.extend(dict(r, source=src.name) for r in csv.DictReader(fh))
    with open(rt.out / "summary.csv", "w", newline="") as fh:
        cols = ["source", "model", "horizon", "perceptual", "ffd",
                "ate", "rpe", "sr", "ne", "seed", "config_hash"]
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for row in merged:
            writer.writerow({c: row.get(c, "") for c in cols})
    with open(rt.out / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "horizon", "perceptual", "ffd"])
        for row in merged:
            if row.get("horizon", "") not in ("", "summary"):
                writer.writerow([row["model"], row["horizon"],
                                 row.get("perceptual", ""), row.get("ffd", "")])
    print(f"wrote {rt.out / 'summary.csv'} and {rt.out / 'curves.csv'}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-stage1": cmd_train_stage1,
    "posttrain-acc": cmd_posttrain_acc,
    "rollout-eval": cmd_rollout_eval,
    "plan-bench": cmd_plan_bench,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="navwm",
        description="Navigation world model: data, training, evaluation, planning",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override master_seed")
        p.add_argument("--out", default=None, help="override out_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = RunConfig(**{**cfg.__dict__, "master_seed": args.seed})
        if args.out is not None:
            cfg = RunConfig(**{**cfg.__dict__, "out_dir": args.out})
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_resolved_config(cfg, out_dir)
        rt = Runtime(cfg, out_dir)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        COMMANDS[args.command](rt)
    except Exception as exc:  # runtime failure -> exit 1 with message
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
