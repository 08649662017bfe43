"""Declarative run configuration.

A run is described by one JSON document whose sections mirror the dataclasses
below. Unknown keys are rejected at every level, so a typo fails loudly
instead of silently falling back to a default.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Optional, Union

from .scene import TASKS

TASK_NAMES = {t.lower(): t for t in TASKS}
SAMPLER_CHOICES = ("full", "window", "active", "auto")
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeedConfig:
    data: int = 0
    train: int = 0
    eval: int = 0


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 800
    per_scene: int = 4
    fraction: float = 1.0
    pretrain_scenes: int = 800
    test_size: int = 100
    min_separation: float = 0.15
    position_range: tuple = (0.05, 0.95)
    depth_range: tuple = (0.05, 0.95)
    scale_range: tuple = (0.02, 0.2)


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (256, 256)
    init_seed: int = 0


@dataclass(frozen=True)
class FlowConfig:
    n_steps: int = 10
    noise_level: float = 1.0
    sigma_t_max: Optional[float] = None


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 8000
    stop_after: Optional[int] = None
    batch_size: int = 256
    lr: float = 2e-3
    min_lr: float = 1e-5
    max_grad_norm: float = 1.0


@dataclass(frozen=True)
class SamplerSection:
    mode: str = "active"
    exit_step: Union[int, str] = 4
    window: int = 4
    shift_every: int = 25


@dataclass(frozen=True)
class CalibrateConfig:
    probes: int = 4
    group_size: int = 32
    noise_level: Optional[float] = None


@dataclass(frozen=True)
class GRPOConfig:
    group_size: int = 16
    clip_eps: float = 2e-4
    inner_epochs: int = 1
    iterations: int = 300
    batch_conditions: int = 64
    lr: float = 1e-4
    max_grad_norm: float = 1.0
    checkpoint_every: int = 100
    eval_every: int = 25


@dataclass(frozen=True)
class RewardSection:
    lambda_id: float = 0.5
    lambda_bg: float = 0.5
    move_threshold: float = 0.05
    identity_tol: float = 0.1
    background_tol: float = 0.2
    rotation_tol_deg: float = 20.0
    resize_tol: float = 0.10


@dataclass(frozen=True)
class RunConfig:
    task: str = "translate"
    out: str = "runs/default"
    workers: int = 1
    log_wall_time: bool = False
    eval_checkpoint: str = "train"
    compare_strategies: tuple = ("full", "window", "active")
    seeds: SeedConfig = field(default_factory=SeedConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    grpo: GRPOConfig = field(default_factory=GRPOConfig)
    reward: RewardSection = field(default_factory=RewardSection)

    @property
    def task_name(self) -> str:
        return TASK_NAMES[self.task]

    @property
    def auto_exit(self) -> bool:
        return self.sampler.mode == "auto" or self.sampler.exit_step == "auto"

    def validate(self) -> "RunConfig":
        _check(self.task in TASK_NAMES, f"task must be one of {sorted(TASK_NAMES)}")
        _check(self.workers >= 1, "workers must be >= 1")
        _check(self.eval_checkpoint in ("train", "pretrain"), "eval_checkpoint must be 'train' or 'pretrain'")
        for s in self.compare_strategies:
            _check(s in ("full", "window", "active"), f"unknown comparison strategy {s!r}")
        d = self.data
        _check(d.n_scenes >= 1 and d.per_scene >= 1 and d.pretrain_scenes >= 1, "data sizes must be >= 1")
        _check(0.0 < d.fraction <= 1.0, "data.fraction must be in (0, 1]")
        _check(d.test_size >= 1, "data.test_size must be >= 1")
        _check(len(self.model.hidden) >= 1 and all(h >= 1 for h in self.model.hidden), "model.hidden must be positive")
        f = self.flow
        _check(f.n_steps >= 2, "flow.n_steps must be >= 2")
        _check(f.noise_level >= 0 and math.isfinite(f.noise_level), "flow.noise_level must be finite and >= 0")
        _check(f.sigma_t_max is None or 0 < f.sigma_t_max < 1, "flow.sigma_t_max must be in (0, 1)")
        p = self.pretrain
        _check(p.iterations >= 1 and p.batch_size >= 1 and p.lr > 0, "invalid pretrain settings")
        _check(p.stop_after is None or 1 <= p.stop_after <= p.iterations, "pretrain.stop_after must be in [1, iterations]")
        s = self.sampler
        _check(s.mode in SAMPLER_CHOICES, f"sampler.mode must be one of {SAMPLER_CHOICES}")
        if s.exit_step != "auto":
            _check(isinstance(s.exit_step, int) and 1 <= s.exit_step <= f.n_steps, "sampler.exit_step must be in [1, T] or 'auto'")
        _check(1 <= s.window <= f.n_steps, "sampler.window must be in [1, T]")
        _check(s.shift_every >= 1, "sampler.shift_every must be >= 1")
        c = self.calibrate
        if self.auto_exit:
            _check(c.probes >= 1 and c.group_size >= 2, "auto exit step needs calibrate.probes >= 1 and group_size >= 2")
        g = self.grpo
        _check(g.group_size >= 2, "grpo.group_size must be >= 2")
        _check(g.clip_eps > 0, "grpo.clip_eps must be positive")
        _check(1 <= g.inner_epochs <= 4, "grpo.inner_epochs must be in [1, 4]")
        _check(g.iterations >= 1 and g.batch_conditions >= 1, "grpo iterations and batch must be >= 1")
        _check(g.lr > 0 and g.max_grad_norm > 0, "grpo lr and max_grad_norm must be positive")
        _check(g.checkpoint_every >= 1 and g.eval_every >= 1, "grpo checkpoint/eval periods must be >= 1")
        for k, v in asdict(self.reward).items():
            _check(v > 0, f"reward.{k} must be positive")
        return self

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def with_overrides(self, **top) -> "RunConfig":
        return replace(self, **top)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown field(s) in {path or 'config'}: {', '.join(unknown)}")
    defaults = cls()
    kw = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        where = f"{path}.{name}" if path else name
        if is_dataclass(current):
            kw[name] = _build(type(current), value, where)
        elif isinstance(current, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where} must be a list")
            kw[name] = tuple(value)
        else:
            kw[name] = value
    return cls(**kw)


def config_from_dict(data: dict) -> RunConfig:
    """Build and validate a config; a manifest document is accepted too."""
    if isinstance(data, dict) and "manifest_version" in data:
        data = data.get("config", {})
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return config_from_dict(data)
