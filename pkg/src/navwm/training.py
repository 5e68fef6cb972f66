"""Two training stages for the denoiser.

Stage I: teacher-forced denoising of the next frame at random timesteps,
updating all parameters. Stage II: consistency post-training on truncated
self-rollouts, where only the AdaLN modulation group updates and the
autoregressive context comes from the model's own (stop-gradient) outputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ADALN, GROUPS, adam_step, backward
from .model import Denoiser
from .perceptual import FeatureEmbedder, perceptual_distance
from .schedule import (
    NoiseSchedule,
    SubSchedule,
    continue_to_clean,
    forward_noise,
    generate_frame,
)

LOSS_KINDS = ("perceptual", "l1", "l2")
CONTEXT_KINDS = ("icsd", "x0hat")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageIConfig:
    lr: float = 6e-5
    batch: int = 16
    steps: int = 3000
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("stage-1 lr must be positive")


@dataclass(frozen=True)
class AccConfig:
    lr: float = 2e-4
    rollout_len: int = 8
    loss: str = "perceptual"
    context: str = "icsd"
    steps: int = 1500
    batch: int = 8
    truncation_per: str = "segment"
    seed: int = 0

    def __post_init__(self):
        if self.rollout_len < 2:
            raise ValueError("rollout_len must be >= 2")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}")
        if self.context not in CONTEXT_KINDS:
            raise ValueError(f"context must be one of {CONTEXT_KINDS}")
        if self.truncation_per not in ("segment", "frame"):
            raise ValueError("truncation_per must be 'segment' or 'frame'")


# ---------------------------------------------------------------------------
# sample/segment assembly


def split_dataset(dataset, heldout_frac: float = 0.2):
    """Deterministic train/heldout split: last fraction of trajectories."""
    n_eval = max(1, int(round(len(dataset) * heldout_frac)))
    if n_eval >= len(dataset):
        raise TrainingError("heldout fraction leaves no training trajectories")
    return dataset[:-n_eval], dataset[-n_eval:]


def _memory_block(obs: np.ndarray, idx: int, memory: int) -> np.ndarray:
    """Past frames idx-1 .. idx-memory, most recent first, zero-padded."""
    dim = obs.shape[1]
    block = np.zeros((memory, dim))
    for j in range(memory):
        src = idx - 1 - j
        if src >= 0:
            block[j] = obs[src]
    return block


def transition_index(dataset):
    return [
        (ti, tau)
        for ti, traj in enumerate(dataset)
        for tau in range(len(traj.poses) - 1)
    ]


def gather_transitions(dataset, pairs, memory: int):
    """Batch arrays for teacher-forced training: target, context, memory, action."""
    n = len(pairs)
    dim = dataset[0].observations.shape[1]
    target = np.empty((n, dim))
    ctx = np.empty((n, dim))
    mem = np.empty((n, memory, dim))
    actions = np.empty((n, 2))
    for row, (ti, tau) in enumerate(pairs):
        traj = dataset[ti]
        target[row] = traj.observations[tau + 1]
        ctx[row] = traj.observations[tau]
        mem[row] = _memory_block(traj.observations, tau, memory)
        actions[row] = (traj.actions[tau].v, traj.actions[tau].w)
    return target, ctx, mem, actions


@dataclass
class SegmentBatch:
    """Rollout segments: ground-truth start context plus N actions/targets."""

    ctx0: np.ndarray  # (B, D)
    mem0: np.ndarray  # (B, m, D), most recent first
    actions: np.ndarray  # (B, N, 2)
    targets: np.ndarray  # (B, N, D)


def sample_segments(dataset, n: int, rollout_len: int, memory: int,
                    rng: np.random.Generator) -> SegmentBatch:
    usable = [
        ti for ti, traj in enumerate(dataset)
        if len(traj.poses) >= memory + rollout_len + 1
    ]
    if not usable:
        raise TrainingError(
            f"no trajectory long enough for memory={memory}, rollout={rollout_len}"
        )
    dim = dataset[0].observations.shape[1]
    ctx0 = np.empty((n, dim))
    mem0 = np.empty((n, memory, dim))
    actions = np.empty((n, rollout_len, 2))
    targets = np.empty((n, rollout_len, dim))
    for row in range(n):
        traj = dataset[usable[rng.integers(len(usable))]]
        last = len(traj.poses) - 1 - rollout_len
        j = int(rng.integers(memory, last + 1))
        ctx0[row] = traj.observations[j]
        mem0[row] = _memory_block(traj.observations, j, memory)
        for step in range(rollout_len):
            a = traj.actions[j + step]
            actions[row, step] = (a.v, a.w)
            targets[row, step] = traj.observations[j + 1 + step]
    return SegmentBatch(ctx0, mem0, actions, targets)


def fixed_segments(dataset, rollout_len: int, memory: int, per_traj: int,
                   seed: int) -> SegmentBatch:
    """Deterministic segments for evaluation (per_traj starts per trajectory)."""
    rng = np.random.default_rng(seed)
    rows = []
    for traj in dataset:
        last = len(traj.poses) - 1 - rollout_len
        if last < memory:
            continue
        starts = rng.integers(memory, last + 1, size=per_traj)
        rows.extend((traj, int(j)) for j in starts)
    if not rows:
        raise TrainingError("no evaluation segments available")
    dim = dataset[0].observations.shape[1]
    n = len(rows)
    ctx0 = np.empty((n, dim))
    mem0 = np.empty((n, memory, dim))
    actions = np.empty((n, rollout_len, 2))
    targets = np.empty((n, rollout_len, dim))
    for row, (traj, j) in enumerate(rows):
        ctx0[row] = traj.observations[j]
        mem0[row] = _memory_block(traj.observations, j, memory)
        for step in range(rollout_len):
            a = traj.actions[j + step]
            actions[row, step] = (a.v, a.w)
            targets[row, step] = traj.observations[j + 1 + step]
    return SegmentBatch(ctx0, mem0, actions, targets)


# ---------------------------------------------------------------------------
# stage I


def train_stage1(dataset, model: Denoiser, sched: NoiseSchedule,
                 cfg: StageIConfig, log_every: int = 0):
    """Teacher-forced pretraining; returns the loss curve [(step, loss, wall_ms)]."""
    if not dataset:
        raise TrainingError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    index = transition_index(dataset)
    memory = model.cfg.memory
    curve = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        pairs = [index[i] for i in rng.integers(len(index), size=cfg.batch)]
        target, ctx, mem, actions = gather_transitions(dataset, pairs, memory)
        t_rows = rng.integers(1, sched.T + 1, size=cfg.batch)
        eps = rng.standard_normal(target.shape)
        noisy = forward_noise(target, t_rows, sched, eps).s
        pred = model.forward(noisy, t_rows, ctx, mem, actions)
        diff = ad.sub(ad.constant(target.astype(model.dtype)), pred)
        loss = ad.mean_(ad.mul(diff, diff))
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingError(f"stage-1 loss diverged at step {step}: {loss_val}")
        backward(loss)
        adam_step(model.params, cfg.lr, groups=GROUPS)
        model.params.zero_grad()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        curve.append((step, loss_val, wall_ms))
    return curve


# ---------------------------------------------------------------------------
# stage II: consistency post-training on truncated self-rollouts


@dataclass
class FrameRecord:
    truncation_index: int
    visited: list  # [(t, s_t, s0_hat)] from the truncated reverse chain
    prediction: ad.Tensor  # the single gradient-bearing clean estimate
    inference_state: np.ndarray | None  # chain endpoint at t=0 (stop-gradient)
    actions: np.ndarray
    target: np.ndarray
    grad_calls: int


@dataclass
class RolloutTrace:
    frames: list
    context_kind: str

    def check(self):
        for fr in self.frames:
            if fr.grad_calls != 1:
                raise TrainingError(
                    f"expected exactly 1 gradient-bearing call per frame, got {fr.grad_calls}"
                )


class _CountingClosure:
    """Wraps a denoise closure and counts gradient-enabled invocations."""

    def __init__(self, fn):
        self.fn = fn
        self.grad_calls = 0

    def __call__(self, s, t, with_grad):
        if with_grad:
            self.grad_calls += 1
        return self.fn(s, t, with_grad)


def acc_rollout(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                seg: SegmentBatch, cfg: AccConfig,
                rng: np.random.Generator) -> RolloutTrace:
    """Self-conditioned rollout with one gradient-bearing prediction per frame.

    Each frame runs the reverse chain from t_{T'} to the truncation step t_k
    with stop-gradient intermediates. The inference-consistent state is the
    gradient-free continuation of that chain to t=0; it (or the detached
    truncation estimate, per cfg.context) becomes the next frame's context.
    """
    n_rows, rollout_len = seg.actions.shape[0], seg.actions.shape[1]
    memory = model.cfg.memory
    ctx = seg.ctx0.copy()
    mem = seg.mem0.copy()
    k_segment = int(rng.integers(1, sub.size + 1))
    frames = []
    for tau in range(rollout_len):
        k = k_segment if cfg.truncation_per == "segment" else int(
            rng.integers(1, sub.size + 1)
        )
        a = seg.actions[:, tau]
        fn = _CountingClosure(model.closure(ctx, mem, a))
        gen = generate_frame(
            fn, sub, sched, rng, (n_rows, model.cfg.obs_dim),
            truncate_at=k, grad_at_truncation=True,
        )
        pred = gen.grad_node
        detached = np.asarray(pred.value, dtype=np.float64)
        s_ic = None
        if cfg.context == "icsd":
            s_ic = continue_to_clean(fn, gen.final.s, detached, k, sub, sched)
            next_frame = s_ic
        else:
            next_frame = detached
        frames.append(FrameRecord(
            truncation_index=k,
            visited=gen.visited,
            prediction=pred,
            inference_state=s_ic,
            actions=a,
            target=seg.targets[:, tau],
            grad_calls=fn.grad_calls,
        ))
        if memory > 0:
            mem = np.concatenate([ctx[:, None, :], mem[:, :-1, :]], axis=1)
        ctx = next_frame
    trace = RolloutTrace(frames=frames, context_kind=cfg.context)
    trace.check()
    return trace


def acc_loss(trace: RolloutTrace, kind: str,
             embedder: FeatureEmbedder | None = None) -> ad.Tensor:
    """Multi-frame average of the per-frame distance to ground truth."""
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    if kind == "perceptual" and embedder is None:
        raise ValueError("perceptual loss needs an embedder")
    total = None
    for fr in trace.frames:
        pred = fr.prediction
        target = ad.constant(fr.target.astype(pred.value.dtype))
        if kind == "perceptual":
            term = perceptual_distance(pred, target, embedder)
        elif kind == "l1":
            term = ad.mean_(ad.abs_(ad.sub(target, pred)))
        else:
            diff = ad.sub(target, pred)
            term = ad.mean_(ad.mul(diff, diff))
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(trace.frames))


def posttrain_acc(dataset, model: Denoiser, sched: NoiseSchedule,
                  sub: SubSchedule, cfg: AccConfig,
                  embedder: FeatureEmbedder | None = None):
    """Consistency post-training; only the adaln group updates.

    Returns the loss curve [(step, loss, wall_ms)].
    """
    rng = np.random.default_rng(cfg.seed)
    curve = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        seg = sample_segments(dataset, cfg.batch, cfg.rollout_len,
                              model.cfg.memory, rng)
        trace = acc_rollout(model, sched, sub, seg, cfg, rng)
        loss = acc_loss(trace, cfg.loss, embedder)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise TrainingError(f"post-training loss diverged at step {step}")
        backward(loss)
        adam_step(model.params, cfg.lr, groups=(ADALN,))
        model.params.zero_grad()
        wall_ms = (time.perf_counter() - t0) * 1000.0
        curve.append((step, loss_val, wall_ms))
    return curve


# ---------------------------------------------------------------------------
# inference-mode rollout (shared by evaluation and planning)


def self_rollout(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                 ctx0: np.ndarray, mem0: np.ndarray, actions: np.ndarray,
                 rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """Autoregressive few-step rollout under given actions; returns (B, N, D).

    Initial per-frame noise comes from `noise` (B, N, D) when provided,
    otherwise from rng.
    """
    n_rows, n_frames = actions.shape[0], actions.shape[1]
    dim = ctx0.shape[1]
    memory = model.cfg.memory
    ctx = ctx0
    mem = mem0
    out = np.empty((n_rows, n_frames, dim))
    for tau in range(n_frames):
        fn = model.closure(ctx, mem, actions[:, tau])
        init = noise[:, tau] if noise is not None else None
        gen = generate_frame(fn, sub, sched, rng, (n_rows, dim), init_noise=init)
        frame = gen.final.s
        out[:, tau] = frame
        if memory > 0:
            mem = np.concatenate([ctx[:, None, :], mem[:, :-1, :]], axis=1)
        ctx = frame
    return out


def save_curve_csv(path, curve) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,wall_ms\n")
        for step, loss, wall_ms in curve:
            fh.write(f"{step},{loss:.9g},{wall_ms:.9g}\n")
