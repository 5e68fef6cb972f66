"""Cross-entropy-method planning over world-model rollouts, scored by the
feature-space distance between the rolled-out terminal frame and the goal
observation. Candidate scoring streams are derived per (seed, iteration,
candidate), so results do not depend on evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import Denoiser
from .perceptual import FeatureEmbedder, perceptual_distance_np
from .schedule import NoiseSchedule, SubSchedule
from .sim import Action, GoalTask, Pose, Trajectory, World
from .training import self_rollout


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class CEMConfig:
    horizon: int = 16
    samples: int = 120
    iterations: int = 1
    sims: int = 3
    elite_frac: float = 0.1
    std_floor: float = 0.02
    init_std_frac: float = 0.5
    init_mean_v: float = 0.0  # forward-motion prior for the first iteration
    success_radius: float = 0.5
    seed: int = 0

    def __post_init__(self):
        n_elite = math.ceil(self.elite_frac * self.samples)
        if not (self.samples >= n_elite >= 1):
            raise ValueError(f"bad population/elite sizes in {self}")
        if self.horizon < 1 or self.sims < 1 or self.iterations < 1:
            raise ValueError(f"bad planning config {self}")

    @property
    def n_elite(self) -> int:
        return math.ceil(self.elite_frac * self.samples)


@dataclass
class IterationStats:
    mean: np.ndarray  # (H, 2)
    std: np.ndarray  # (H, 2)
    elite_threshold: float


@dataclass
class PlanResult:
    actions: np.ndarray  # (H, 2), best candidate ever evaluated
    score: float
    iterations: list  # IterationStats per iteration
    candidate_scores: np.ndarray  # (I, M)
    best_iteration: int
    best_candidate: int


def context_arrays(context_obs: np.ndarray, memory: int):
    """Split an (m+1, D) context block (oldest first) into (ctx, mem slots)."""
    context_obs = np.asarray(context_obs)
    if context_obs.shape[0] != memory + 1:
        raise PlanningError(
            f"context needs {memory + 1} frames, got {context_obs.shape[0]}"
        )
    ctx = context_obs[-1]
    mem = context_obs[-2::-1] if memory > 0 else np.empty((0, context_obs.shape[1]))
    return ctx, mem


def rollout_terminal(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                     context_obs: np.ndarray, actions: np.ndarray,
                     noise: np.ndarray) -> np.ndarray:
    """Terminal frames of batched model rollouts; actions (M, H, 2)."""
    m = model.cfg.memory
    ctx, mem = context_arrays(context_obs, m)
    n = actions.shape[0]
    ctx0 = np.tile(ctx, (n, 1))
    mem0 = np.tile(mem[None, :, :], (n, 1, 1))
    frames = self_rollout(model, sched, sub, ctx0, mem0, actions, noise=noise)
    return frames[:, -1, :]


def score_plan(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
               context_obs: np.ndarray, actions: np.ndarray,
               goal_obs: np.ndarray, embedder: FeatureEmbedder,
               rng: np.random.Generator) -> float:
    """Negated terminal-frame feature distance for one candidate sequence."""
    actions = np.asarray(actions, dtype=np.float64)
    noise = rng.standard_normal((1, actions.shape[0], model.cfg.obs_dim))
    terminal = rollout_terminal(model, sched, sub, context_obs,
                                actions[None, :, :], noise)
    if not np.isfinite(terminal).all():
        return -math.inf
    return -float(perceptual_distance_np(terminal[0], np.asarray(goal_obs), embedder))


def make_model_score_fn(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                        context_obs: np.ndarray, goal_obs: np.ndarray,
                        embedder: FeatureEmbedder, sims: int):
    """Batched best-of-R score function for cem_plan."""
    goal = np.asarray(goal_obs)

    def score_batch(cands: np.ndarray, cand_rngs) -> np.ndarray:
        n, horizon = cands.shape[0], cands.shape[1]
        noise = np.stack(
            [r.standard_normal((sims, horizon, model.cfg.obs_dim)) for r in cand_rngs]
        )
        best = np.full(n, -np.inf)
        for r in range(sims):
            terminal = rollout_terminal(model, sched, sub, context_obs,
                                        cands, noise[:, r])
            scores = -perceptual_distance_np(terminal, np.tile(goal, (n, 1)), embedder)
            scores[~np.isfinite(terminal).all(axis=1)] = -np.inf
            best = np.maximum(best, scores)
        return best

    return score_batch


def cem_plan(score_batch_fn, cfg: CEMConfig, bounds) -> PlanResult:
    """Iteratively refit a per-step diagonal Gaussian to the elite candidates.

    bounds = (v_max, w_max). The returned plan is the best candidate ever
    evaluated (each candidate scored by its best simulation outcome).
    """
    v_max, w_max = bounds
    hi = np.array([v_max, w_max])
    mean = np.zeros((cfg.horizon, 2))
    mean[:, 0] = cfg.init_mean_v
    std = np.tile(cfg.init_std_frac * hi, (cfg.horizon, 1))
    best_score = -np.inf
    best_actions = None
    best_iter = best_cand = -1
    stats = []
    all_scores = np.empty((cfg.iterations, cfg.samples))
    for it in range(cfg.iterations):
        sample_rng = np.random.default_rng([cfg.seed, it])
        eps = sample_rng.standard_normal((cfg.samples, cfg.horizon, 2))
        cands = np.clip(mean + std * eps, -hi, hi)
        cand_rngs = [
            np.random.default_rng([cfg.seed, it, i]) for i in range(cfg.samples)
        ]
        scores = np.asarray(score_batch_fn(cands, cand_rngs), dtype=np.float64)
        all_scores[it] = scores
        if not np.any(np.isfinite(scores)):
            raise PlanningError("no feasible plan: every candidate scored -inf")
        # stable sort on negated scores -> ties broken by candidate index
        order = np.argsort(-scores, kind="stable")
        elites = cands[order[: cfg.n_elite]]
        mean = elites.mean(axis=0)
        std = np.maximum(elites.std(axis=0), cfg.std_floor)
        stats.append(IterationStats(
            mean=mean.copy(), std=std.copy(),
            elite_threshold=float(scores[order[cfg.n_elite - 1]]),
        ))
        top = int(order[0])
        if scores[top] > best_score:
            best_score = float(scores[top])
            best_actions = cands[top].copy()
            best_iter, best_cand = it, top
    return PlanResult(
        actions=best_actions,
        score=best_score,
        iterations=stats,
        candidate_scores=all_scores,
        best_iteration=best_iter,
        best_candidate=best_cand,
    )


def plan_to_goal(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                 task: GoalTask, cfg: CEMConfig, embedder: FeatureEmbedder,
                 world: World) -> PlanResult:
    score_fn = make_model_score_fn(
        model, sched, sub, task.context_obs, task.goal_obs, embedder, cfg.sims
    )
    return cem_plan(score_fn, cfg, (world.cfg.v_max, world.cfg.w_max))


def random_plan(cfg: CEMConfig, bounds, rng: np.random.Generator) -> np.ndarray:
    """A draw from the CEM proposal prior; baseline plan."""
    v_max, w_max = bounds
    hi = np.array([v_max, w_max])
    std = cfg.init_std_frac * hi
    return np.clip(std * rng.standard_normal((cfg.horizon, 2)), -hi, hi)


def execute_openloop(world: World, start: Pose, actions: np.ndarray,
                     goal: Pose, success_radius: float = 0.5):
    """Run a plan on the ground-truth simulator.

    Returns (trajectory, navigation error, success flag)."""
    acts = [Action(float(v), float(w)) for v, w in np.asarray(actions)]
    poses = [start]
    for a in acts:
        poses.append(world.step(poses[-1], a))
    traj = Trajectory(-1, poses, acts, world.render_trajectory(poses))
    ne = math.hypot(poses[-1].x - goal.x, poses[-1].y - goal.y)
    return traj, ne, ne <= success_radius
