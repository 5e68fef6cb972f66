"""Trajectory and rollout-quality metrics: absolute/relative trajectory
error, rollout divergence curves, pose recovery from observations, and
CSV report assembly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .model import Denoiser
from .perceptual import (
    FeatureEmbedder,
    frechet_feature_distance,
    perceptual_distance_np,
)
from .schedule import NoiseSchedule, SubSchedule
from .sim import Pose, World, wrap_angle
from .training import SegmentBatch, self_rollout


class MetricError(ValueError):
    pass


def _pose_array(poses) -> np.ndarray:
    if isinstance(poses, np.ndarray):
        return poses
    return np.array([[p.x, p.y, p.theta] for p in poses])


def ate(pred, gt) -> float:
    """RMSE of Euclidean position error; no alignment (shared start frame)."""
    p = _pose_array(pred)
    g = _pose_array(gt)
    if p.shape[0] != g.shape[0] or p.shape[0] < 1:
        raise MetricError(f"trajectory lengths differ: {p.shape[0]} vs {g.shape[0]}")
    err = p[:, :2] - g[:, :2]
    return float(np.sqrt((err ** 2).sum(axis=1).mean()))


def _relative_displacements(poses: np.ndarray, delta: int) -> np.ndarray:
    """Displacement from pose k to k+delta, expressed in pose k's frame."""
    d = poses[delta:, :2] - poses[:-delta, :2]
    theta = poses[:-delta, 2]
    cos, sin = np.cos(-theta), np.sin(-theta)
    return np.stack([cos * d[:, 0] - sin * d[:, 1],
                     sin * d[:, 0] + cos * d[:, 1]], axis=1)


def rpe(pred, gt, delta: int = 1) -> float:
    """RMSE of relative-motion discrepancies over the given interval."""
    p = _pose_array(pred)
    g = _pose_array(gt)
    if p.shape[0] != g.shape[0]:
        raise MetricError("trajectory lengths differ")
    if p.shape[0] < delta + 1:
        raise MetricError(f"need at least {delta + 1} poses for delta={delta}")
    diff = _relative_displacements(p, delta) - _relative_displacements(g, delta)
    return float(np.sqrt((diff ** 2).sum(axis=1).mean()))


# ---------------------------------------------------------------------------
# rollout divergence


def rollout_divergence(model: Denoiser, sched: NoiseSchedule, sub: SubSchedule,
                       segments: SegmentBatch, horizons,
                       embedder: FeatureEmbedder,
                       rng: np.random.Generator):
    """Self-conditioned rollout error per horizon on held-out segments.

    Returns {horizon: (mean feature distance, Frechet feature distance)}.
    """
    horizons = sorted(horizons)
    if segments.actions.shape[1] < horizons[-1]:
        raise MetricError(
            f"segments too short ({segments.actions.shape[1]}) for horizon {horizons[-1]}"
        )
    pred = self_rollout(model, sched, sub, segments.ctx0, segments.mem0,
                        segments.actions, rng=rng)
    out = {}
    for h in horizons:
        p = pred[:, h - 1, :]
        g = segments.targets[:, h - 1, :]
        pd = float(np.mean(perceptual_distance_np(p, g, embedder)))
        ffd = frechet_feature_distance(p, g, embedder)
        out[h] = (pd, ffd)
    return out


# ---------------------------------------------------------------------------
# pose recovery (render inversion)


@dataclass(frozen=True)
class PoseEstimate:
    pose: Pose
    residual: float  # mean squared observation error at the estimate
    low_confidence: bool


def _residual_batch(world: World, xs, ys, thetas, obs) -> np.ndarray:
    rendered = world.render_batch(xs, ys, thetas)
    return ((rendered - obs[None, :]) ** 2).mean(axis=1)


def _descend(world, obs, p0, f0, steps, lim):
    """Damped least-squares refinement with numerical Jacobians.

    Plain gradient descent zigzags in the ill-conditioned valleys of this
    residual surface and misses the 1e-2 round-trip tolerance, so the local
    refinement uses Levenberg-Marquardt steps, clamped to the search region.
    """
    p, f = p0.copy(), f0
    h = 1e-5
    lam = 1e-3
    for _ in range(steps):
        probes = np.tile(p, (6, 1))
        for d in range(3):
            probes[2 * d, d] += h
            probes[2 * d + 1, d] -= h
        rendered = world.render_batch(probes[:, 0], probes[:, 1], probes[:, 2])
        jac = np.stack([(rendered[2 * d] - rendered[2 * d + 1]) / (2 * h)
                        for d in range(3)], axis=1)
        r = world.render_batch(p[0:1], p[1:2], p[2:3])[0] - obs
        g = jac.T @ r
        hess = jac.T @ jac
        accepted = False
        for _ in range(8):
            damped = hess + lam * np.diag(np.maximum(np.diag(hess), 1e-12))
            try:
                step = np.linalg.solve(damped, g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            q = p - step
            q[0] = np.clip(q[0], -lim, lim)
            q[1] = np.clip(q[1], -lim, lim)
            fq = float(_residual_batch(world, q[0:1], q[1:2], q[2:3], obs)[0])
            if fq < f:
                p, f = q, fq
                lam = max(lam / 3.0, 1e-10)
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            break
    return p, f


def pose_recovery(obs: np.ndarray, world: World, grid_res: float = 0.4,
                  n_theta: int = 40, gd_steps: int = 20, n_starts: int = 4,
                  residual_threshold: float = 1e-3) -> PoseEstimate:
    """Invert the observation function: coarse grid search over the
    workspace, then damped least-squares descent from the best grid cells."""
    obs = np.asarray(obs, dtype=np.float64)
    lim = world.cfg.extent * 1.8
    coords = np.arange(-lim, lim + 1e-9, grid_res)
    thetas = np.linspace(-math.pi, math.pi, n_theta, endpoint=False)
    gx, gy, gt = np.meshgrid(coords, coords, thetas, indexing="ij")
    flat = np.stack([gx.ravel(), gy.ravel(), gt.ravel()], axis=1)
    res = _residual_batch(world, flat[:, 0], flat[:, 1], flat[:, 2], obs)
    order = np.argsort(res, kind="stable")

    # refine from a few well-separated grid candidates; keep the best
    starts = []
    for idx in order:
        cand = flat[idx]
        if all(np.linalg.norm(cand[:2] - s[:2]) > 2 * grid_res for s in starts):
            starts.append(cand)
        if len(starts) == n_starts:
            break
    best_p, best_f = None, np.inf
    for cand in starts:
        p, f = _descend(world, obs, cand, float(_residual_batch(
            world, cand[0:1], cand[1:2], cand[2:3], obs)[0]), gd_steps, lim)
        if f < best_f:
            best_p, best_f = p, f
    pose = Pose(float(best_p[0]), float(best_p[1]), wrap_angle(float(best_p[2])))
    return PoseEstimate(pose, best_f, best_f > residual_threshold)


def recover_trajectory(obs_seq: np.ndarray, world: World, **kw):
    return [pose_recovery(o, world, **kw) for o in np.asarray(obs_seq)]


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    model: str
    seed: int
    config_hash: str
    horizon_perceptual: dict = field(default_factory=dict)
    horizon_ffd: dict = field(default_factory=dict)
    ate: float | None = None
    rpe: float | None = None
    sr: float | None = None
    ne: float | None = None

    def check(self):
        values = list(self.horizon_perceptual.values()) + list(self.horizon_ffd.values())
        values += [v for v in (self.ate, self.rpe, self.sr, self.ne) if v is not None]
        if any((not np.isfinite(v)) or v < 0 for v in values):
            raise MetricError(f"non-finite or negative metric in report {self.model}")


METRIC_COLUMNS = [
    "model", "horizon", "perceptual", "ffd", "ate", "rpe", "sr", "ne",
    "seed", "config_hash",
]


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def write_metric_csv(path, reports) -> None:
    """One row per (model, horizon) plus a summary row per model."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rep in reports:
            rep.check()
            for h in sorted(rep.horizon_perceptual):
                writer.writerow([
                    rep.model, h, _cell(rep.horizon_perceptual[h]),
                    _cell(rep.horizon_ffd.get(h)), "", "", "", "",
                    rep.seed, rep.config_hash,
                ])
            writer.writerow([
                rep.model, "summary", "", "",
                _cell(rep.ate), _cell(rep.rpe), _cell(rep.sr), _cell(rep.ne),
                rep.seed, rep.config_hash,
            ])


def read_metric_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)
