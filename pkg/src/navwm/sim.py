"""Deterministic 2D unicycle world: kinematics, landmark observations,
dataset generation, and goal tasks. Doubles as the ground-truth oracle
for every rollout and planning experiment.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class SimError(ValueError):
    """Config or contract violation in the simulator."""


def wrap_angle(theta: float) -> float:
    """Wrap into (-pi, pi]."""
    t = math.remainder(theta, TWO_PI)
    if t <= -math.pi:
        t += TWO_PI
    return t


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class Action:
    v: float  # forward displacement per step [m]
    w: float  # heading change per step [rad]


@dataclass(frozen=True)
class WorldConfig:
    seed: int = 0
    landmarks: int = 16
    obs_dim: int = 32
    v_max: float = 0.5
    w_max: float = 0.5
    obs_noise: float = 0.0
    extent: float = 8.0  # landmarks sampled in [-extent, extent]^2
    range_scale: float = 1.0  # alpha in tanh(alpha / distance)
    min_landmark_sep: float = 0.5


@dataclass
class Trajectory:
    traj_id: int
    poses: list  # len L
    actions: list  # len L-1
    observations: np.ndarray  # (L, obs_dim) float64


class World:
    """Landmark field plus observation function, fixed by the world seed."""

    MIN_RANGE = 0.1  # distance floor [m]

    def __init__(self, cfg: WorldConfig):
        if cfg.landmarks < 3:
            raise SimError(f"need at least 3 landmarks, got {cfg.landmarks}")
        if cfg.obs_dim % 2 != 0:
            raise SimError(f"obs_dim must be even, got {cfg.obs_dim}")
        if cfg.obs_dim > 2 * cfg.landmarks:
            raise SimError(
                f"obs_dim {cfg.obs_dim} exceeds 2*landmarks = {2 * cfg.landmarks}"
            )
        self.cfg = cfg
        self.landmarks = self._place_landmarks(cfg)

    @staticmethod
    def _place_landmarks(cfg: WorldConfig) -> np.ndarray:
        rng = np.random.default_rng(cfg.seed)
        pts: list[np.ndarray] = []
        attempts = 0
        while len(pts) < cfg.landmarks:
            attempts += 1
            if attempts > 10000:
                raise SimError("could not place landmarks with requested separation")
            p = rng.uniform(-cfg.extent, cfg.extent, size=2)
            if all(np.hypot(*(p - q)) >= cfg.min_landmark_sep for q in pts):
                pts.append(p)
        return np.array(pts)

    # -- kinematics ---------------------------------------------------------

    def check_action(self, a: Action) -> None:
        if abs(a.v) > self.cfg.v_max + 1e-12 or abs(a.w) > self.cfg.w_max + 1e-12:
            raise SimError(
                f"action ({a.v}, {a.w}) out of bounds "
                f"(v_max={self.cfg.v_max}, w_max={self.cfg.w_max})"
            )

    def step(self, p: Pose, a: Action) -> Pose:
        """Rotate, then translate along the new heading."""
        self.check_action(a)
        theta = wrap_angle(p.theta + a.w)
        return Pose(p.x + a.v * math.cos(theta), p.y + a.v * math.sin(theta), theta)

    def step_back(self, p_next: Pose, a: Action) -> Pose:
        """Exact inverse of step given the action."""
        x = p_next.x - a.v * math.cos(p_next.theta)
        y = p_next.y - a.v * math.sin(p_next.theta)
        return Pose(x, y, wrap_angle(p_next.theta - a.w))

    # -- observations -------------------------------------------------------

    def render(self, p: Pose, rng: np.random.Generator | None = None) -> np.ndarray:
        """Observation vector: tanh(alpha/d) and sin(bearing - theta) for the
        obs_dim/2 nearest landmarks, slots ordered by landmark index."""
        obs = self.render_batch(
            np.array([p.x]), np.array([p.y]), np.array([p.theta])
        )[0]
        if rng is not None and self.cfg.obs_noise > 0:
            obs = obs + rng.normal(0.0, self.cfg.obs_noise, size=obs.shape)
            obs = np.clip(obs, -1.0, 1.0)
        return obs

    def render_batch(self, xs, ys, thetas) -> np.ndarray:
        """Vectorized noiseless render for n poses; returns (n, obs_dim)."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        thetas = np.asarray(thetas, dtype=np.float64)
        n = xs.shape[0]
        k = self.cfg.obs_dim // 2
        dx = self.landmarks[None, :, 0] - xs[:, None]
        dy = self.landmarks[None, :, 1] - ys[:, None]
        dist = np.maximum(np.hypot(dx, dy), self.MIN_RANGE)
        bearing = np.arctan2(dy, dx)
        if k == self.cfg.landmarks:
            sel = np.broadcast_to(np.arange(k), (n, k))
        else:
            nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
            sel = np.sort(nearest, axis=1)
        rows = np.arange(n)[:, None]
        d_sel = dist[rows, sel]
        b_sel = bearing[rows, sel]
        obs = np.empty((n, self.cfg.obs_dim))
        obs[:, 0::2] = np.tanh(self.cfg.range_scale / d_sel)
        obs[:, 1::2] = np.sin(b_sel - thetas[:, None])
        return obs

    def render_trajectory(self, poses) -> np.ndarray:
        xs = np.array([p.x for p in poses])
        ys = np.array([p.y for p in poses])
        ts = np.array([p.theta for p in poses])
        return self.render_batch(xs, ys, ts)


# ---------------------------------------------------------------------------
# dataset generation

# Mean-reverting random-walk policy constants; chosen so trajectories
# wander smoothly through the landmark field.
_OU_RATE = 0.15
_OU_SIGMA_V = 0.10
_OU_SIGMA_W = 0.25


def _random_walk_actions(world: World, length: int, rng: np.random.Generator):
    cfg = world.cfg
    v = 0.5 * cfg.v_max
    w = 0.0
    mu_v = 0.5 * cfg.v_max
    out = []
    for _ in range(length):
        v += _OU_RATE * (mu_v - v) + _OU_SIGMA_V * cfg.v_max * rng.normal()
        w += _OU_RATE * (0.0 - w) + _OU_SIGMA_W * cfg.w_max * rng.normal()
        v = float(np.clip(v, -cfg.v_max, cfg.v_max))
        w = float(np.clip(w, -cfg.w_max, cfg.w_max))
        out.append(Action(v, w))
    return out


def generate_trajectory(world: World, traj_id: int, length: int,
                        rng: np.random.Generator) -> Trajectory:
    cfg = world.cfg
    start = Pose(
        float(rng.uniform(-0.5 * cfg.extent, 0.5 * cfg.extent)),
        float(rng.uniform(-0.5 * cfg.extent, 0.5 * cfg.extent)),
        float(rng.uniform(-math.pi, math.pi)),
    )
    actions = _random_walk_actions(world, length - 1, rng)
    poses = [start]
    for a in actions:
        poses.append(world.step(poses[-1], a))
    return Trajectory(traj_id, poses, actions, world.render_trajectory(poses))


def generate_dataset(world: World, n_traj: int, length: int,
                     policy_seed: int) -> list[Trajectory]:
    """Trajectories from the smooth random-walk policy; reproducible from seeds."""
    if length < 2:
        raise SimError(f"trajectory length {length} too short")
    out = []
    for i in range(n_traj):
        rng = np.random.default_rng([policy_seed, i])
        out.append(generate_trajectory(world, i, length, rng))
    return out


# ---------------------------------------------------------------------------
# CSV serialization (one row per step; 9 significant digits)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def save_dataset_csv(path, dataset: list[Trajectory]) -> None:
    if not dataset:
        raise SimError("empty dataset")
    dim = dataset[0].observations.shape[1]
    header = ["traj_id", "step", "x", "y", "theta", "v", "w"]
    header += [f"obs_{i}" for i in range(dim)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for traj in dataset:
            for k, pose in enumerate(traj.poses):
                a = traj.actions[k] if k < len(traj.actions) else Action(0.0, 0.0)
                row = [traj.traj_id, k, _fmt(pose.x), _fmt(pose.y), _fmt(pose.theta),
                       _fmt(a.v), _fmt(a.w)]
                row += [_fmt(v) for v in traj.observations[k]]
                writer.writerow(row)


def load_dataset_csv(path) -> list[Trajectory]:
    by_id: dict[int, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 7
        for row in reader:
            by_id.setdefault(int(row[0]), []).append(row)
    out = []
    for traj_id in sorted(by_id):
        rows = sorted(by_id[traj_id], key=lambda r: int(r[1]))
        poses = [Pose(float(r[2]), float(r[3]), float(r[4])) for r in rows]
        actions = [Action(float(r[5]), float(r[6])) for r in rows[:-1]]
        obs = np.array([[float(v) for v in r[7:7 + dim]] for r in rows])
        out.append(Trajectory(traj_id, poses, actions, obs))
    return out


# ---------------------------------------------------------------------------
# goal tasks


@dataclass
class GoalTask:
    task_id: int
    context_poses: list  # m+1 poses, oldest first
    context_obs: np.ndarray  # (m+1, obs_dim)
    goal_pose: Pose
    goal_obs: np.ndarray  # (obs_dim,)
    demo: Trajectory  # feasible reference path from plan start to goal
    seed: int


def _goto_controller(world: World, start: Pose, target_xy, horizon: int,
                     tol: float = 0.05):
    """Greedy go-to-point actions; returns (poses, actions) or None on miss."""
    cfg = world.cfg
    poses = [start]
    actions = []
    p = start
    for _ in range(horizon):
        dx = target_xy[0] - p.x
        dy = target_xy[1] - p.y
        dist = math.hypot(dx, dy)
        if dist <= tol:
            break
        err = wrap_angle(math.atan2(dy, dx) - p.theta)
        w = float(np.clip(err, -cfg.w_max, cfg.w_max))
        v = float(np.clip(dist, 0.0, cfg.v_max)) * max(0.0, math.cos(err))
        a = Action(v, w)
        p = world.step(p, a)
        actions.append(a)
        poses.append(p)
    dist = math.hypot(target_xy[0] - p.x, target_xy[1] - p.y)
    if dist > tol:
        return None
    return poses, actions


def make_goal_task(world: World, seed: int, memory: int = 3, horizon: int = 16,
                   distance_range=(2.0, 6.0), max_retries: int = 50,
                   task_id: int = 0) -> GoalTask:
    """Context frames from random in-bound actions; goal at a uniform-random
    distance, with a feasible demonstration path recorded."""
    cfg = world.cfg
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        start = Pose(
            float(rng.uniform(-0.5 * cfg.extent, 0.5 * cfg.extent)),
            float(rng.uniform(-0.5 * cfg.extent, 0.5 * cfg.extent)),
            float(rng.uniform(-math.pi, math.pi)),
        )
        ctx_poses = [start]
        for _ in range(memory):
            a = Action(
                float(rng.uniform(0.0, cfg.v_max)),
                float(rng.uniform(-cfg.w_max, cfg.w_max)),
            )
            ctx_poses.append(world.step(ctx_poses[-1], a))
        anchor = ctx_poses[-1]
        d = float(rng.uniform(*distance_range))
        phi = float(rng.uniform(-math.pi, math.pi))
        target = (anchor.x + d * math.cos(phi), anchor.y + d * math.sin(phi))
        demo = _goto_controller(world, anchor, target, horizon)
        if demo is None:
            continue
        demo_poses, demo_actions = demo
        goal_pose = demo_poses[-1]
        demo_traj = Trajectory(task_id, demo_poses, demo_actions,
                               world.render_trajectory(demo_poses))
        return GoalTask(
            task_id=task_id,
            context_poses=ctx_poses,
            context_obs=world.render_trajectory(ctx_poses),
            goal_pose=goal_pose,
            goal_obs=world.render(goal_pose),
            demo=demo_traj,
            seed=seed,
        )
    raise SimError(f"no reachable goal found after {max_retries} retries (seed={seed})")
