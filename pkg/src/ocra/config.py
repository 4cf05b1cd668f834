"""Versioned pipeline configuration with strict key checking.

The file is JSON. Every section is optional; missing keys take the module
defaults, unknown keys are rejected with their dotted path in the message.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass
class SynthSection:
    scene: str = "stack"            # "stack" or "sort"
    n_demos: int = 20
    n_steps: int = 16
    start_jitter: float = 0.03      # m, uniform in +-jitter on x and y
    recon_scale: float = 1.0        # reconstruction units = meters / recon_scale
    depth_noise: float = 0.0
    dropout: float = 0.0
    width: int = 320
    height: int = 240
    tactile_height: int = 48
    tactile_width: int = 64
    normal_rate: float = 0.01
    shear_rate: float = 1.0
    light: float = 0.5              # N, sort scene only
    heavy: float = 1.5


@dataclass
class ReconstructSection:
    voxel_size: float = 0.002
    scale_mode: str = "per_sequence"    # or "global"


@dataclass
class IcpSection:
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_corr_dist: float = 0.05
    trim_fraction: float = 0.1
    accelerate: bool = True
    trim_warmup: int = 10
    # the pipeline tracks with the plane metric: point-to-point is biased on
    # voxel-resampled clouds (see registration.icp_align)
    metric: str = "point_to_plane"
    normal_neighbors: int = 12


@dataclass
class DisSection:
    levels: int = 4
    patch_size: int = 8
    patch_stride: int = 4
    grad_descent_iters: int = 12
    variational_refine: bool = False
    variational_alpha: float = 0.05
    variational_outer: int = 3
    variational_inner: int = 20


@dataclass
class PolicySection:
    horizon: int = 8
    obs_horizon: int = 2
    force_dims: int = 1
    feature_dim: int = 64
    hidden: int = 128
    diffusion_steps: int = 100
    beta_start: float = 1e-2
    beta_end: float = 0.02
    reverse_variance: str = "beta"
    lr: float = 1e-4
    lr_schedule: str = "cosine"
    batch_size: int = 32
    fusion: str = "resfilm"
    parameterization: str = "sample"
    obs_noise: float = 0.0
    steps: int = 40000


@dataclass
class ControlSection:
    kp: float = 2.0
    ki: float = 8.0
    kd: float = 0.0
    lo: float = 0.0
    hi: float = 10.0
    plant_gain: float = 5.0
    dt: float = 0.01
    plant_noise: float = 0.0
    substeps: int = 20
    force_scale: float = 1.0
    extrinsic: dict | None = None   # robot <- camera, {"rotation", "translation"}


@dataclass
class RolloutSection:
    n_rollouts: int = 10
    execute_steps: int = 8
    start_jitter: float | None = None   # None: same as the dataset


@dataclass
class EvalSection:
    translation_threshold: float = 0.01
    rotation_threshold_deg: float = 2.0
    process_factor: float = 10.0
    mode_samples: int = 50          # per class, multi-class scenes only


_SECTIONS = {
    "synth": SynthSection, "reconstruct": ReconstructSection, "icp": IcpSection,
    "dis": DisSection, "policy": PolicySection, "control": ControlSection,
    "rollout": RolloutSection, "eval": EvalSection,
}


@dataclass
class PipelineConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    synth: SynthSection = field(default_factory=SynthSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    icp: IcpSection = field(default_factory=IcpSection)
    dis: DisSection = field(default_factory=DisSection)
    policy: PolicySection = field(default_factory=PolicySection)
    control: ControlSection = field(default_factory=ControlSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)


def _coerce(section: str, name: str, default, value):
    path = f"{section}.{name}"
    if default is None or isinstance(default, dict):
        if value is not None and not isinstance(value, dict):
            raise ConfigError(f"config key '{path}' must be an object or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{path}' must be true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{path}' must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{path}' must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{path}' must be a string")
        return value
    return value


def _build_section(name: str, cls, data) -> object:
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
    defaults = cls()
    kwargs = {k: _coerce(name, k, getattr(defaults, k), v) for k, v in data.items()}
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    for key in data:
        if key not in ("version", "seed") and key not in _SECTIONS:
            raise ConfigError(f"unknown config key '{key}'")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION})")
    seed = data.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError("config key 'seed' must be a non-negative integer")
    sections = {name: _build_section(name, cls, data.get(name, {})) for name, cls in _SECTIONS.items()}
    return PipelineConfig(version=version, seed=seed, **sections)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(data)
