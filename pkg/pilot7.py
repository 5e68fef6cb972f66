"""Pilot 7: isolate the planning failure.

(a) CEM + ground-truth-simulator scoring: does the optimizer navigate at all?
(b) model rollout quality under iid candidate-style action sequences.
"""
import math
import numpy as np

from navwm.sim import World, WorldConfig, make_goal_task, wrap_angle
from navwm.model import ModelConfig
from navwm.schedule import make_schedule, make_sub_schedule
from navwm.perceptual import FeatureEmbedder, perceptual_distance_np
from navwm.planner import CEMConfig, cem_plan, context_arrays, execute_openloop
from navwm.training import self_rollout

world = World(WorldConfig())
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
embedder = FeatureEmbedder(32, 20240)


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


print("=== (a) CEM with oracle world model ===")
for iters, isf in [(3, 0.5), (3, 1.0), (8, 1.0)]:
    nes, oks = [], []
    for i in range(10):
        task = make_goal_task(world, seed=3000 + i, horizon=16,
                              distance_range=(2.0, 6.0))
        oracle = VecOracle(world)
        for pose, obs in zip(task.context_poses, task.context_obs):
            oracle.register(pose, obs)
        ctx, mem = context_arrays(task.context_obs, 3)

        def score_batch(cands, rngs):
            n = cands.shape[0]
            roll = self_rollout(oracle, sched, sub5, np.tile(ctx, (n, 1)),
                                np.tile(mem[None], (n, 1, 1)), cands,
                                rng=np.random.default_rng(0))
            return -perceptual_distance_np(roll[:, -1],
                                           np.tile(task.goal_obs, (n, 1)), embedder)

        cfg = CEMConfig(horizon=16, samples=120, iterations=iters, sims=1,
                        init_std_frac=isf, seed=7000 + i)
        res = cem_plan(score_batch, cfg, (0.5, 0.5))
        _, ne, ok = execute_openloop(world, task.context_poses[-1], res.actions,
                                     task.goal_pose)
        nes.append(ne)
        oks.append(ok)
    print(f"iters={iters} init_std={isf}: SR={np.mean(oks):.2f} NE={np.mean(nes):.2f}")

print("=== (b) score landscape sanity on one task (oracle) ===")
task = make_goal_task(world, seed=3000, horizon=16, distance_range=(2.0, 6.0))
oracle = VecOracle(world)
for pose, obs in zip(task.context_poses, task.context_obs):
    oracle.register(pose, obs)
ctx, mem = context_arrays(task.context_obs, 3)
demo = np.array([[a.v, a.w] for a in task.demo.actions])
H = 16
padded = np.zeros((H, 2))
padded[:demo.shape[0]] = demo


def score1(actions):
    roll = self_rollout(oracle, sched, sub5, ctx[None], mem[None], actions[None],
                        rng=np.random.default_rng(0))
    return -float(perceptual_distance_np(roll[0, -1], task.goal_obs, embedder))


print(f"demo plan score: {score1(padded):.4f}")
rng = np.random.default_rng(0)
rand_scores = [score1(np.clip(0.25 * rng.standard_normal((H, 2)), -0.5, 0.5))
               for _ in range(20)]
print(f"random plan scores: min={min(rand_scores):.4f} max={max(rand_scores):.4f}")
