"""Pilot 11: planning benchmark robustness across seeds and task scales."""
import time
import numpy as np

from navwm.sim import World, WorldConfig, generate_dataset, make_goal_task
from navwm.model import Denoiser, ModelConfig
from navwm.schedule import make_schedule, make_sub_schedule
from navwm.perceptual import FeatureEmbedder
from navwm.planner import CEMConfig, cem_plan, execute_openloop, make_model_score_fn, random_plan
from navwm.training import (
    StageIConfig, AccConfig, train_stage1, posttrain_acc, split_dataset,
)

world = World(WorldConfig())
dataset = generate_dataset(world, 64, 64, policy_seed=7)
train_set, _ = split_dataset(dataset, 0.2)
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
embedder = FeatureEmbedder(32, 20240)

CONFIGS = [
    ("H6",  dict(horizon=6,  distance_range=(1.0, 1.8))),
    ("H8",  dict(horizon=8,  distance_range=(1.2, 2.2))),
]

pooled = {}
for seed in range(3):
    t0 = time.time()
    mc = ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32,
                     init_seed=100 + seed)
    stage1 = Denoiser(mc)
    train_stage1(train_set, stage1, sched,
                 StageIConfig(lr=3e-4, batch=16, steps=2500, seed=seed))
    snap = stage1.params.snapshot()
    acc = Denoiser(mc)
    acc.params.set_values(snap)
    posttrain_acc(train_set, acc, sched, sub5,
                  AccConfig(lr=2e-4, rollout_len=8, steps=400, batch=8,
                            loss="perceptual", context="icsd", seed=seed + 10),
                  embedder)
    for tag, tk in CONFIGS:
        H = tk["horizon"]
        for i in range(20):
            task = make_goal_task(world, seed=3000 + 100 * seed + i, memory=3,
                                  horizon=H, distance_range=tk["distance_range"],
                                  task_id=i)
            start = task.context_poses[-1]
            for name, model in (("acc", acc), ("stage1", stage1)):
                cfg = CEMConfig(horizon=H, samples=120, iterations=12, sims=1,
                                elite_frac=0.1, init_std_frac=1.0,
                                init_mean_v=0.25, seed=7000 + 100 * seed + i)
                fn = make_model_score_fn(model, sched, sub5, task.context_obs,
                                         task.goal_obs, embedder, cfg.sims)
                res = cem_plan(fn, cfg, (0.5, 0.5))
                _, ne, ok = execute_openloop(world, start, res.actions,
                                             task.goal_pose)
                pooled.setdefault((tag, name), []).append((ne, ok))
            rng = np.random.default_rng(9000 + 100 * seed + i)
            actions = random_plan(CEMConfig(horizon=H, init_std_frac=1.0,
                                            init_mean_v=0.25, seed=0),
                                  (0.5, 0.5), rng)
            _, ne, ok = execute_openloop(world, start, actions, task.goal_pose)
            pooled.setdefault((tag, "random"), []).append((ne, ok))
    print(f"seed {seed} done ({time.time()-t0:.0f}s)", flush=True)
    for tag, _ in CONFIGS:
        for name in ("acc", "stage1", "random"):
            rows = pooled[(tag, name)]
            print(f"  {tag} {name}: SR={np.mean([o for _, o in rows]):.2f} "
                  f"NE={np.mean([n for n, _ in rows]):.2f}", flush=True)
