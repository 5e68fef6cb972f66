"""Pilot 9: planning benchmark with learned models at the tuned CEM config."""
import math
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

t0 = time.time()
world = World(WorldConfig())
dataset = generate_dataset(world, 64, 64, policy_seed=7)
train_set, _ = split_dataset(dataset, 0.2)
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
embedder = FeatureEmbedder(32, 20240)

mc = ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32, init_seed=100)
stage1 = Denoiser(mc)
train_stage1(train_set, stage1, sched, StageIConfig(lr=3e-4, batch=16, steps=2500, seed=0))
snap = stage1.params.snapshot()
acc = Denoiser(mc)
acc.params.set_values(snap)
posttrain_acc(train_set, acc, sched, sub5,
              AccConfig(lr=2e-4, rollout_len=8, steps=400, batch=8,
                        loss="perceptual", context="icsd", seed=10), embedder)
print(f"models ready ({time.time()-t0:.0f}s)", flush=True)

H = 10
results = {"acc": [], "stage1": [], "random": []}
for i in range(20):
    task = make_goal_task(world, seed=3000 + i, memory=3, horizon=H,
                          distance_range=(1.5, 3.0), task_id=i)
    start = task.context_poses[-1]
    for name, model in (("acc", acc), ("stage1", stage1)):
        cfg = CEMConfig(horizon=H, samples=120, iterations=12, sims=1,
                        elite_frac=0.1, init_std_frac=1.0, init_mean_v=0.25,
                        seed=7000 + i)
        fn = make_model_score_fn(model, sched, sub5, task.context_obs,
                                 task.goal_obs, embedder, cfg.sims)
        res = cem_plan(fn, cfg, (0.5, 0.5))
        _, ne, ok = execute_openloop(world, start, res.actions, task.goal_pose)
        results[name].append((ne, ok))
    rng = np.random.default_rng(9000 + i)
    actions = random_plan(CEMConfig(horizon=H, init_std_frac=1.0,
                                    init_mean_v=0.25, seed=0), (0.5, 0.5), rng)
    _, ne, ok = execute_openloop(world, start, actions, task.goal_pose)
    results["random"].append((ne, ok))
    print(f"task {i}: acc={results['acc'][-1][0]:.2f} "
          f"s1={results['stage1'][-1][0]:.2f} rnd={results['random'][-1][0]:.2f}",
          flush=True)

for name, rows in results.items():
    print(f"{name}: SR={np.mean([ok for _, ok in rows]):.2f} "
          f"NE={np.mean([ne for ne, _ in rows]):.2f}")
print(f"total {time.time()-t0:.0f}s")
