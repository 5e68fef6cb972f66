"""Pilot: stage-1 quality + ACC improvement check (dev only, not shipped)."""
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

t_start = time.time()
world = World(WorldConfig())
dataset = generate_dataset(world, 64, 64, policy_seed=7)
train_set, heldout = split_dataset(dataset, 0.2)
sched = make_schedule("linear-beta", 1000)
sub5 = make_sub_schedule(sched, 5)
sub25 = make_sub_schedule(sched, 25)
embedder = FeatureEmbedder(32, 20240)

segments = fixed_segments(heldout, 16, 3, 3, seed=99)
print(f"eval segments: {segments.ctx0.shape[0]}")


def eval_rollout(model, sub, tag, seed=5):
    rng = np.random.default_rng(seed)
    pred = self_rollout(model, sched, sub, segments.ctx0, segments.mem0,
                        segments.actions, rng=rng)
    errs = {}
    for h in (1, 4, 16):
        errs[h] = float(np.mean(perceptual_distance_np(
            pred[:, h - 1], segments.targets[:, h - 1], embedder)))
    print(f"  {tag}: " + "  ".join(f"h{h}={errs[h]:.4f}" for h in errs))
    return errs


mc = ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32, init_seed=11)
model = Denoiser(mc)
t0 = time.time()
curve = train_stage1(train_set, model, sched, StageIConfig(lr=3e-4, batch=16, steps=2500, seed=1))
print(f"stage1 lr=3e-4: {time.time()-t0:.1f}s  loss {curve[0][1]:.4f} -> {curve[-1][1]:.5f}")
s1_5 = eval_rollout(model, sub5, "stage1 @ T'=5")
s1_25 = eval_rollout(model, sub25, "stage1 @ T'=25")

snap = model.params.snapshot()

t0 = time.time()
acc_cfg = AccConfig(lr=2e-4, rollout_len=8, loss="perceptual", context="icsd",
                    steps=400, batch=8, seed=2)
c2 = posttrain_acc(train_set, model, sched, sub5, acc_cfg, embedder)
print(f"acc icsd: {time.time()-t0:.1f}s  loss {c2[0][1]:.4f} -> {c2[-1][1]:.4f}")
acc_5 = eval_rollout(model, sub5, "acc-icsd @ T'=5")

model.params.set_values(snap)
acc_cfg = AccConfig(lr=2e-4, rollout_len=8, loss="perceptual", context="x0hat",
                    steps=400, batch=8, seed=2)
c3 = posttrain_acc(train_set, model, sched, sub5, acc_cfg, embedder)
x0_5 = eval_rollout(model, sub5, "acc-x0hat @ T'=5")

model.params.set_values(snap)
for kind in ("l1", "l2"):
    model.params.set_values(snap)
    acc_cfg = AccConfig(lr=2e-4, rollout_len=8, loss=kind, context="icsd",
                        steps=400, batch=8, seed=2)
    posttrain_acc(train_set, model, sched, sub5, acc_cfg, embedder)
    eval_rollout(model, sub5, f"acc-{kind} @ T'=5")

fresh = Denoiser(ModelConfig(obs_dim=32, hidden=64, blocks=4, memory=3, embed=32, init_seed=77))
acc_cfg = AccConfig(lr=2e-4, rollout_len=8, loss="perceptual", context="icsd",
                    steps=400, batch=8, seed=2)
posttrain_acc(train_set, fresh, sched, sub5, acc_cfg, embedder)
eval_rollout(fresh, sub5, "acc-only (random init)")

print(f"total {time.time()-t_start:.1f}s")
