"""Noise schedules, forward noising, the deterministic DDIM update, and
the skip-step reverse loop that wraps a denoiser.

Convention: alpha_bar(0) == 1, so a DDIM jump to t=0 returns the clean
estimate exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ScheduleError(ValueError):
    pass


LINEAR_BETA = "linear-beta"
COSINE = "cosine"
KINDS = (LINEAR_BETA, COSINE)

_BETA_MIN = 1e-4
_BETA_MAX = 2e-2
_COSINE_S = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative noise coefficients alpha_bar(1..T), plus alpha_bar(0)=1."""

    T: int
    kind: str
    _alpha_bar: np.ndarray  # length T+1, index 0 holds the exact 1.0

    @property
    def alpha_bar(self) -> np.ndarray:
        """View over t = 1..T."""
        return self._alpha_bar[1:]

    def at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 0..{self.T}")
        return float(self._alpha_bar[t])


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"need T >= 2, got {T}")
    if kind == LINEAR_BETA:
        betas = np.linspace(_BETA_MIN, _BETA_MAX, T)
    elif kind == COSINE:
        # squared-cosine alpha_bar profile, expressed through clipped betas
        # so alpha_bar stays strictly positive at t = T
        def f(t):
            return math.cos((t / T + _COSINE_S) / (1 + _COSINE_S) * math.pi / 2) ** 2

        ratios = np.array([f(t) / f(t - 1) for t in range(1, T + 1)])
        betas = np.clip(1.0 - ratios, 0.0, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r} (use one of {KINDS})")
    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(1.0 - betas)
    sched = NoiseSchedule(T=T, kind=kind, _alpha_bar=alpha_bar)
    ab = sched.alpha_bar
    if not (np.all(np.diff(ab) < 0) and ab[0] < 1.0 and ab[-1] > 0.0):
        raise ScheduleError(f"degenerate schedule for kind={kind}, T={T}")
    return sched


@dataclass(frozen=True)
class SubSchedule:
    """Increasing subset of timesteps used for skip-step sampling."""

    steps: tuple  # t_1 < t_2 < ... < t_{T'}

    def __post_init__(self):
        if not self.steps:
            raise ScheduleError("empty sub-schedule")
        if list(self.steps) != sorted(set(self.steps)) or self.steps[0] < 1:
            raise ScheduleError(f"invalid sub-schedule steps {self.steps}")

    @property
    def size(self) -> int:
        return len(self.steps)

    def at(self, k: int) -> int:
        """1-based: t_k."""
        if not 1 <= k <= len(self.steps):
            raise ScheduleError(f"sub-schedule index {k} outside 1..{len(self.steps)}")
        return self.steps[k - 1]


def make_sub_schedule(sched: NoiseSchedule, count: int) -> SubSchedule:
    """Evenly spaced timesteps over 1..T, always including T."""
    if not 1 <= count <= sched.T:
        raise ScheduleError(f"sub-schedule size {count} outside 1..{sched.T}")
    steps = tuple(round(sched.T * (i + 1) / count) for i in range(count))
    return SubSchedule(steps=steps)


@dataclass
class DiffusionState:
    s: np.ndarray
    t: int  # 0 means clean


def forward_noise(s: np.ndarray, t, sched: NoiseSchedule,
                  eps: np.ndarray) -> DiffusionState:
    """s_t = sqrt(ab_t) * s + sqrt(1 - ab_t) * eps.

    t may be a scalar or, for a rank-2 batch, a per-row integer array.
    """
    s = np.asarray(s)
    eps = np.asarray(eps)
    if np.isscalar(t) or np.ndim(t) == 0:
        t_int = int(t)
        if not 1 <= t_int <= sched.T:
            raise ScheduleError(f"timestep {t_int} outside 1..{sched.T}")
        ab = sched.at(t_int)
        return DiffusionState(math.sqrt(ab) * s + math.sqrt(1.0 - ab) * eps, t_int)
    t_arr = np.asarray(t, dtype=int)
    if np.any(t_arr < 1) or np.any(t_arr > sched.T):
        raise ScheduleError("batched timesteps outside 1..T")
    ab = sched._alpha_bar[t_arr][:, None]
    return DiffusionState(np.sqrt(ab) * s + np.sqrt(1.0 - ab) * eps, -1)


def ddim_step(s_t: np.ndarray, s0_hat: np.ndarray, t_hi: int, t_lo: int,
              sched: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) skip-step update from t_hi down to t_lo."""
    if t_lo > t_hi:
        raise ScheduleError(f"ddim_step: t_lo {t_lo} > t_hi {t_hi}")
    if t_lo == t_hi:
        return np.asarray(s_t)
    ab_hi = sched.at(t_hi)
    ab_lo = sched.at(t_lo)
    if ab_hi >= 1.0:
        raise ScheduleError(f"ddim_step: alpha_bar({t_hi}) = 1, implied noise undefined")
    s_t = np.asarray(s_t)
    s0_hat = np.asarray(s0_hat)
    eps_implied = (s_t - math.sqrt(ab_hi) * s0_hat) / math.sqrt(1.0 - ab_hi)
    return math.sqrt(ab_lo) * s0_hat + math.sqrt(1.0 - ab_lo) * eps_implied


@dataclass
class FrameGen:
    """Record of one reverse-process run."""

    visited: list  # [(t, s_t, s0_hat_detached)] in visiting order (high t first)
    final: DiffusionState
    grad_node: object = None  # autodiff Tensor for the truncation call, if requested


def generate_frame(denoise_fn, sub: SubSchedule, sched: NoiseSchedule,
                   rng: np.random.Generator | None, shape,
                   truncate_at: int | None = None,
                   grad_at_truncation: bool = False,
                   init_noise: np.ndarray | None = None) -> FrameGen:
    """Run the reverse process from t_{T'} down to t_k (or to 0).

    denoise_fn(s_t, t, with_grad) returns the clean estimate; with_grad=True
    may return an autodiff node, whose .value is used to continue the chain.
    Every call before the truncation step is gradient-free. The starting
    standard-normal state comes from init_noise when given, else from rng.
    """
    n_steps = sub.size
    if truncate_at is not None and not 1 <= truncate_at <= n_steps:
        raise ScheduleError(
            f"truncation index {truncate_at} outside 1..{n_steps}"
        )
    if init_noise is not None:
        s = np.asarray(init_noise, dtype=np.float64)
        if s.shape != tuple(shape):
            raise ScheduleError(f"init_noise shape {s.shape} != {tuple(shape)}")
    else:
        s = rng.standard_normal(shape)
    visited = []
    grad_node = None
    last = truncate_at if truncate_at is not None else 1
    for j in range(n_steps, last - 1, -1):
        t_j = sub.at(j)
        want_grad = grad_at_truncation and truncate_at is not None and j == truncate_at
        out = denoise_fn(s, t_j, want_grad)
        if want_grad:
            grad_node = out
            s0 = np.asarray(out.value)
        else:
            s0 = np.asarray(out)
        visited.append((t_j, s, s0))
        if truncate_at is not None and j == truncate_at:
            return FrameGen(visited, DiffusionState(s, t_j), grad_node)
        t_next = sub.at(j - 1) if j > 1 else 0
        s = ddim_step(s, s0, t_j, t_next, sched)
    return FrameGen(visited, DiffusionState(s, 0), None)


def continue_to_clean(denoise_fn, s_t: np.ndarray, s0_hat: np.ndarray, k: int,
                      sub: SubSchedule, sched: NoiseSchedule) -> np.ndarray:
    """Finish the reverse chain from the truncation step down to t = 0.

    Starts from the state/estimate pair at t_k and re-invokes the denoiser
    (gradient-free) at each remaining sub-schedule step; the result is the
    state few-step inference would actually produce.
    """
    s = np.asarray(s_t)
    s0 = np.asarray(s0_hat)
    for j in range(k, 0, -1):
        t_j = sub.at(j)
        t_next = sub.at(j - 1) if j > 1 else 0
        s = ddim_step(s, s0, t_j, t_next, sched)
        if t_next == 0:
            return s
        s0 = np.asarray(denoise_fn(s, t_next, False))
    return s0
