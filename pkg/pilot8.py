"""Pilot 8: CEM benchmark config search against the oracle world model."""
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


def bench(iters, isf, mean_v, n_tasks=10):
    nes, oks = [], []
    for i in range(n_tasks):
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
                        init_std_frac=isf, init_mean_v=mean_v, seed=7000 + i)
        res = cem_plan(score_batch, cfg, (0.5, 0.5))
        _, ne, ok = execute_openloop(world, task.context_poses[-1], res.actions,
                                     task.goal_pose)
        nes.append(ne)
        oks.append(ok)
    print(f"iters={iters} init_std={isf} mean_v={mean_v}: "
          f"SR={np.mean(oks):.2f} NE={np.mean(nes):.2f}", flush=True)


for iters, isf, mv in [(3, 1.0, 0.25), (6, 1.0, 0.25), (10, 1.0, 0.25),
                       (10, 1.0, 0.0), (15, 1.0, 0.25)]:
    bench(iters, isf, mv)
