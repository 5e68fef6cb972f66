"""Pilot 5: eval-noise magnitude, then l1 vs l2 at 1000 steps, 5 seeds,
with eval averaged over several rollout noise draws."""
import time
import numpy as np

from navwm.sim import World, WorldConfig, generate_dataset
from navwm.model import Denoiser, ModelConfig
from navwm.schedule import make_schedule, make_sub_schedule
from navwm.perceptual import FeatureEmbedder, perceptual_distance_np
from navwm.training import (
    StageIConfig, AccConfig, train_stage1, posttrain_acc,
    split_dataset, fixed_segments, self_rollout,
)

world = World(WorldConfig())
dataset = generate_dataset(world, 64, 64, policy_seed=7)
train_set, heldout = split_dataset(dataset, 0.2)
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
embedder = FeatureEmbedder(32, 20240)
segments = fixed_segments(heldout, 16, 3, 3, seed=99)


def h16(model, eval_seeds=(5, 6, 7, 8)):
    vals = []
    for s in eval_seeds:
        rng = np.random.default_rng(s)
        pred = self_rollout(model, sched, sub5, segments.ctx0, segments.mem0,
                            segments.actions, rng=rng)
        vals.append(float(np.mean(perceptual_distance_np(
            pred[:, 15], segments.targets[:, 15], embedder))))
    return float(np.mean(vals)), vals


# eval-noise magnitude on one stage-1 model
mc = ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32, init_seed=100)
probe = Denoiser(mc)
train_stage1(train_set, probe, sched, StageIConfig(lr=3e-4, batch=16, steps=2500, seed=0))
mean, vals = h16(probe, eval_seeds=tuple(range(5, 13)))
print(f"eval noise: mean={mean:.4f} std={np.std(vals):.4f} vals={[f'{v:.4f}' for v in vals]}",
      flush=True)

for seed in range(5):
    t0 = time.time()
    mc = ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32,
                     init_seed=100 + seed)
    model = Denoiser(mc)
    train_stage1(train_set, model, sched,
                 StageIConfig(lr=3e-4, batch=16, steps=2500, seed=seed))
    snap = model.params.snapshot()
    row = {}
    for tag in ("l1", "l2"):
        model.params.set_values(snap)
        cfg = AccConfig(lr=2e-4, rollout_len=8, steps=1000, batch=8,
                        loss=tag, context="icsd", seed=seed + 10)
        posttrain_acc(train_set, model, sched, sub5, cfg, embedder)
        row[tag], _ = h16(model)
    print(f"seed {seed} ({time.time()-t0:.0f}s): l1={row['l1']:.4f} "
          f"l2={row['l2']:.4f}  l1<=l2: {row['l1'] <= row['l2']}", flush=True)
