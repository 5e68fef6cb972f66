"""Run configuration: namespaced sections loaded from YAML with strict
key checking, plus named seed substreams derived from the master seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .model import ModelConfig
from .planner import CEMConfig
from .schedule import KINDS
from .sim import WorldConfig
from .training import AccConfig, StageIConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldSection:
    seed: int = 0
    landmarks: int = 16
    obs_dim: int = 32
    v_max: float = 0.5
    w_max: float = 0.5
    obs_noise: float = 0.0
    extent: float = 8.0
    range_scale: float = 1.0
    min_landmark_sep: float = 0.5
    n_traj: int = 64
    traj_len: int = 64

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            seed=self.seed, landmarks=self.landmarks, obs_dim=self.obs_dim,
            v_max=self.v_max, w_max=self.w_max, obs_noise=self.obs_noise,
            extent=self.extent, range_scale=self.range_scale,
            min_landmark_sep=self.min_landmark_sep,
        )


@dataclass(frozen=True)
class ModelSection:
    hidden: int = 128
    blocks: int = 4
    memory: int = 3
    embed: int = 32

    def model_config(self, obs_dim: int, init_seed: int) -> ModelConfig:
        return ModelConfig(obs_dim=obs_dim, hidden=self.hidden, blocks=self.blocks,
                           memory=self.memory, embed=self.embed, init_seed=init_seed)


@dataclass(frozen=True)
class DiffusionSection:
    T: int = 1000
    kind: str = "linear-beta"
    T_prime: int = 5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"diffusion.kind must be one of {KINDS}")


@dataclass(frozen=True)
class Stage1Section:
    lr: float = 6e-5
    batch: int = 16
    steps: int = 3000


@dataclass(frozen=True)
class AccSection:
    lr: float = 2e-4
    rollout_len: int = 8
    loss: str = "perceptual"
    context: str = "icsd"
    steps: int = 1500
    batch: int = 8
    truncation_per: str = "segment"


@dataclass(frozen=True)
class CemSection:
    horizon: int = 16
    samples: int = 120
    iterations: int = 1
    sims: int = 3
    elite_frac: float = 0.1
    std_floor: float = 0.02
    init_std_frac: float = 0.5
    success_radius: float = 0.5
    n_tasks: int = 20
    goal_min: float = 2.0
    goal_max: float = 6.0


@dataclass(frozen=True)
class EvalSection:
    horizons: tuple = (1, 2, 4, 8, 16)
    heldout_frac: float = 0.2
    segments_per_traj: int = 3
    baseline_T_prime: int = 25


@dataclass(frozen=True)
class PerceptualSection:
    seed: int = 20240


_SECTIONS = {
    "world": WorldSection,
    "model": ModelSection,
    "diffusion": DiffusionSection,
    "stage1": Stage1Section,
    "acc": AccSection,
    "cem": CemSection,
    "eval": EvalSection,
    "perceptual": PerceptualSection,
}


@dataclass(frozen=True)
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    stage1: Stage1Section = field(default_factory=Stage1Section)
    acc: AccSection = field(default_factory=AccSection)
    cem: CemSection = field(default_factory=CemSection)
    eval: EvalSection = field(default_factory=EvalSection)
    perceptual: PerceptualSection = field(default_factory=PerceptualSection)
    master_seed: int = 0
    out_dir: str = "runs/out"

    def stage1_config(self, seed: int) -> StageIConfig:
        s = self.stage1
        return StageIConfig(lr=s.lr, batch=s.batch, steps=s.steps, seed=seed)

    def acc_config(self, seed: int, **overrides) -> AccConfig:
        s = self.acc
        kw = dict(lr=s.lr, rollout_len=s.rollout_len, loss=s.loss,
                  context=s.context, steps=s.steps, batch=s.batch,
                  truncation_per=s.truncation_per, seed=seed)
        kw.update(overrides)
        return AccConfig(**kw)

    def cem_config(self, seed: int, **overrides) -> CEMConfig:
        c = self.cem
        kw = dict(horizon=c.horizon, samples=c.samples, iterations=c.iterations,
                  sims=c.sims, elite_frac=c.elite_frac, std_floor=c.std_floor,
                  init_std_frac=c.init_std_frac, success_radius=c.success_radius,
                  seed=seed)
        kw.update(overrides)
        return CEMConfig(**kw)


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {sorted(unknown)}")
    coerced = dict(data)
    for f in fields(cls):
        if f.name in coerced and isinstance(coerced[f.name], list):
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{name}] section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_allowed = set(_SECTIONS) | {"master_seed", "out_dir"}
    unknown = set(data) - top_allowed
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a mapping")
        kwargs[name] = _build_section(name, cls, section)
    if "master_seed" in data:
        kwargs["master_seed"] = int(data["master_seed"])
    if "out_dir" in data:
        kwargs["out_dir"] = str(data["out_dir"])
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return config_from_dict(data or {})


def config_to_dict(cfg: RunConfig) -> dict:
    out = {name: asdict(getattr(cfg, name)) for name in _SECTIONS}
    out["eval"]["horizons"] = list(cfg.eval.horizons)
    out["master_seed"] = cfg.master_seed
    out["out_dir"] = cfg.out_dir
    return out


def save_resolved_config(cfg: RunConfig, out_dir) -> Path:
    """Write the fully-resolved config next to the run outputs."""
    path = Path(out_dir) / "config.yaml"
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=True)
    return path


def config_hash(cfg: RunConfig) -> str:
    blob = yaml.safe_dump(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def substream_seed(master_seed: int, purpose: str) -> int:
    """Stable named substream: hash of (master seed, purpose string)."""
    digest = hashlib.sha256(f"{master_seed}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
