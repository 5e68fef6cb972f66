"""Pilot 10: bigger models + shorter-horizon benchmark + score-ranking diagnostics."""
import math
import time
import numpy as np

from navwm.sim import World, WorldConfig, generate_dataset, make_goal_task, wrap_angle
from navwm.model import Denoiser, ModelConfig
from navwm.schedule import make_schedule, make_sub_schedule
from navwm.perceptual import FeatureEmbedder, perceptual_distance_np
from navwm.planner import (
    CEMConfig, cem_plan, context_arrays, execute_openloop,
    make_model_score_fn, random_plan,
)
from navwm.training import (
    StageIConfig, AccConfig, train_stage1, posttrain_acc, split_dataset,
    fixed_segments, self_rollout,
)

t0 = time.time()
world = World(WorldConfig())
dataset = generate_dataset(world, 64, 64, policy_seed=7)
train_set, heldout = split_dataset(dataset, 0.2)
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
embedder = FeatureEmbedder(32, 20240)

mc = ModelConfig(obs_dim=32, hidden=128, blocks=4, memory=3, embed=32, init_seed=100)
stage1 = Denoiser(mc)
train_stage1(train_set, stage1, sched,
             StageIConfig(lr=3e-4, batch=16, steps=6000, seed=0))
snap = stage1.params.snapshot()
acc = Denoiser(mc)
acc.params.set_values(snap)
posttrain_acc(train_set, acc, sched, sub5,
              AccConfig(lr=2e-4, rollout_len=8, steps=600, batch=8,
                        loss="perceptual", context="icsd", seed=10), embedder)
print(f"models ready ({time.time()-t0:.0f}s)", flush=True)

segments = fixed_segments(heldout, 16, 3, 3, seed=99)
for name, model in (("stage1", stage1), ("acc", acc)):
    rng = np.random.default_rng(5)
    pred = self_rollout(model, sched, sub5, segments.ctx0, segments.mem0,
                        segments.actions, rng=rng)
    errs = {h: float(np.mean(perceptual_distance_np(
        pred[:, h - 1], segments.targets[:, h - 1], embedder)))
        for h in (1, 4, 8, 16)}
    print(f"{name} rollout err: " + " ".join(f"h{h}={v:.4f}" for h, v in errs.items()),
          flush=True)


class VecOracle:
    def __init__(self, world, memory=3):
        self.world = world
        self.cfg = ModelConfig(obs_dim=world.cfg.obs_dim, memory=memory)
        self._pose = {}

    def register(self, pose, obs):
        self._pose[np.asarray(obs).tobytes()] = (pose.x, pose.y, pose.theta)

    def closure(self, ctx, mem, actions):
        ctx = np.asarray(ctx)

        def fn(s, t, with_grad):
            ps = np.array([self._pose[row.tobytes()] for row in ctx])
            th = np.array([wrap_angle(a) for a in ps[:, 2] + actions[:, 1]])
            xs = ps[:, 0] + actions[:, 0] * np.cos(th)
            ys = ps[:, 1] + actions[:, 0] * np.sin(th)
            obs = self.world.render_batch(xs, ys, th)
            for i in range(len(xs)):
                self._pose[obs[i].tobytes()] = (xs[i], ys[i], th[i])
            return obs

        return fn


# ranking diagnostic: correlation between model scores and true scores
H = 8
task = make_goal_task(world, seed=3000, memory=3, horizon=H,
                      distance_range=(1.2, 2.2), task_id=0)
rng = np.random.default_rng(1)
cands = np.clip(np.stack([0.25 + 0.5 * rng.standard_normal((H,)),
                          0.5 * rng.standard_normal((H,))], axis=-1)[None]
                if False else
                np.stack([np.clip(0.25 + 0.5 * rng.standard_normal((200, H)), -0.5, 0.5),
                          np.clip(0.5 * rng.standard_normal((200, H)), -0.5, 0.5)],
                         axis=-1), -0.5, 0.5)
oracle = VecOracle(world)
for pose, obs in zip(task.context_poses, task.context_obs):
    oracle.register(pose, obs)
ctx, mem = context_arrays(task.context_obs, 3)
true_roll = self_rollout(oracle, sched, sub5, np.tile(ctx, (200, 1)),
                         np.tile(mem[None], (200, 1, 1)), cands,
                         rng=np.random.default_rng(0))
true_scores = -perceptual_distance_np(true_roll[:, -1],
                                      np.tile(task.goal_obs, (200, 1)), embedder)
for name, model in (("stage1", stage1), ("acc", acc)):
    noise = np.random.default_rng(2).standard_normal((200, H, 32))
    roll = self_rollout(model, sched, sub5, np.tile(ctx, (200, 1)),
                        np.tile(mem[None], (200, 1, 1)), cands, noise=noise)
    scores = -perceptual_distance_np(roll[:, -1],
                                     np.tile(task.goal_obs, (200, 1)), embedder)
    corr = np.corrcoef(scores, true_scores)[0, 1]
    spear = np.corrcoef(np.argsort(np.argsort(scores)),
                        np.argsort(np.argsort(true_scores)))[0, 1]
    print(f"{name}: pearson={corr:.3f} spearman={spear:.3f}", flush=True)

# benchmark at H=8, goals [1.2, 2.2]
results = {"acc": [], "stage1": [], "random": []}
for i in range(20):
    task = make_goal_task(world, seed=3000 + i, memory=3, horizon=H,
                          distance_range=(1.2, 2.2), task_id=i)
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
    rngr = np.random.default_rng(9000 + i)
    actions = random_plan(CEMConfig(horizon=H, init_std_frac=1.0,
                                    init_mean_v=0.25, seed=0), (0.5, 0.5), rngr)
    _, ne, ok = execute_openloop(world, start, actions, task.goal_pose)
    results["random"].append((ne, ok))

for name, rows in results.items():
    print(f"{name}: SR={np.mean([ok for _, ok in rows]):.2f} "
          f"NE={np.mean([ne for ne, _ in rows]):.2f}")
print(f"total {time.time()-t0:.0f}s")
