"""Spatial rewards and success criteria computed from decoded scenes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from .scene import (
    CANONICAL_DELTA,
    CH_D,
    CH_ROT,
    CH_S,
    CH_U,
    CH_V,
    DIRECTION_AXIS,
    N_MAX,
    SLOT_DIM,
    Instruction,
    SceneSpec,
    encode_scene,
    wrap_angle,
    AXES,
)

log = logging.getLogger(__name__)

# inclusive tolerance checks absorb float rounding (0.18 / 0.1 / 2 - 1 is not 0.1 exactly)
_TOL_SLACK = 1e-9

_ORIENT_CH = [c for ax in AXES for c in CH_ROT[ax]]
_IDENTITY_CHANNELS = {
    "Translate": _ORIENT_CH + [CH_S],
    "Rotate": [CH_U, CH_V, CH_D, CH_S],
    "Resize": [CH_U, CH_V, CH_D] + _ORIENT_CH,
}


@dataclass(frozen=True)
class RewardConfig:
    lambda_id: float = 0.5
    lambda_bg: float = 0.5
    move_threshold: float = 0.05
    identity_tol: float = 0.1
    background_tol: float = 0.2
    rotation_tol_deg: float = 20.0
    resize_tol: float = 0.10
    delta: float = CANONICAL_DELTA

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"reward config field {k} must be positive")


@dataclass
class RewardBreakdown:
    task: str
    task_score: float
    identity_penalty: float
    consistency_penalty: float
    total: float
    success: bool
    criteria: dict[str, bool]
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "task_score": self.task_score,
            "identity_penalty": self.identity_penalty,
            "consistency_penalty": self.consistency_penalty,
            "total": self.total,
            "success": self.success,
            "criteria": dict(self.criteria),
            "diagnostics": dict(self.diagnostics),
        }


def _slot(x, i):
    return x[i * SLOT_DIM : (i + 1) * SLOT_DIM]


def identity_penalty(ref_enc: np.ndarray, edit_enc: np.ndarray, target: int, task: str) -> float:
    """L1 over the target's channels that the task should leave alone, capped at 1."""
    ch = _IDENTITY_CHANNELS[task]
    d = np.abs(_slot(ref_enc, target)[ch] - _slot(edit_enc, target)[ch]).sum()
    return float(min(1.0, d))


def consistency_penalty(ref_enc: np.ndarray, edit_enc: np.ndarray, target: int, active_count: int) -> float:
    """Mean per-entity L1 over non-target active objects and the background, capped at 1.

    Each other active object and the background count as one entity.
    """
    total = 0.0
    entities = 1
    for i in range(active_count):
        if i == target:
            continue
        total += np.abs(_slot(ref_enc, i) - _slot(edit_enc, i)).sum()
        entities += 1
    total += np.abs(ref_enc[N_MAX * SLOT_DIM :] - edit_enc[N_MAX * SLOT_DIM :]).sum()
    return float(min(1.0, total / entities))


def _check(instr: Instruction, task: str):
    if instr.task != task:
        raise ValueError(f"{task} reward called with a {instr.task} instruction")


def _finish(task, score, ident, cons, cfg, criteria, diag) -> RewardBreakdown:
    total = score - cfg.lambda_id * ident - cfg.lambda_bg * cons
    return RewardBreakdown(task, float(score), ident, cons, float(total), all(criteria.values()), criteria, diag)


def translation_reward(ref: SceneSpec, edited: SceneSpec, instr: Instruction, cfg: RewardConfig = RewardConfig()):
    _check(instr, "Translate")
    k = instr.target
    axis, sign = DIRECTION_AXIS[instr.direction]
    dp = edited.objects[k].center - ref.objects[k].center
    along = sign * dp[axis]
    if axis == 2:
        orth = 0.0
    else:
        orth = abs(dp[1 - axis])
    score = float(np.clip(np.clip(along / cfg.delta, 0, 1) - 0.5 * np.clip(orth / cfg.delta, 0, 1), 0, 1))
    re, ee = encode_scene(ref), encode_scene(edited)
    ident = identity_penalty(re, ee, k, "Translate")
    cons = consistency_penalty(re, ee, k, ref.active_count)
    criteria = {
        "movement": bool(along > cfg.move_threshold and along > orth),
        "identity": ident < cfg.identity_tol,
        "preservation": cons <= cfg.background_tol + _TOL_SLACK,
        # duplication cannot happen with fixed object slots
        "no_duplication": True,
    }
    diag = {
        "along": float(along),
        "orth": float(orth),
        "displacement": float(np.linalg.norm(dp)),
        "depth_delta": float(dp[2]),
    }
    return _finish("Translate", score, ident, cons, cfg, criteria, diag)


def rotation_error(achieved_deg: float, target_deg: float) -> float:
    """Wrapped angular discrepancy normalized to [0, 1]."""
    return abs(float(wrap_angle(achieved_deg - target_deg))) / 180.0


def rotation_reward(ref: SceneSpec, edited: SceneSpec, instr: Instruction, cfg: RewardConfig = RewardConfig()):
    _check(instr, "Rotate")
    k = instr.target
    ax = AXES.index(instr.axis)
    achieved = float(wrap_angle(edited.objects[k].orientation[ax] - ref.objects[k].orientation[ax]))
    err = rotation_error(achieved, instr.signed_angle)
    re, ee = encode_scene(ref), encode_scene(edited)
    ident = identity_penalty(re, ee, k, "Rotate")
    cons = consistency_penalty(re, ee, k, ref.active_count)
    criteria = {
        "angle": err * 180.0 <= cfg.rotation_tol_deg + _TOL_SLACK,
        "preservation": cons <= cfg.background_tol + _TOL_SLACK,
    }
    diag = {"achieved_deg": achieved, "target_deg": instr.signed_angle, "rot_err": err}
    return _finish("Rotate", 1.0 - err, ident, cons, cfg, criteria, diag)


def resize_reward(ref: SceneSpec, edited: SceneSpec, instr: Instruction, cfg: RewardConfig = RewardConfig()):
    _check(instr, "Resize")
    k = instr.target
    s0 = ref.objects[k].scale
    if s0 <= 0:
        raise ValueError("reference scale must be positive")
    rho = edited.objects[k].scale / s0
    err = abs(rho - instr.ratio) / instr.ratio
    re, ee = encode_scene(ref), encode_scene(edited)
    ident = identity_penalty(re, ee, k, "Resize")
    cons = consistency_penalty(re, ee, k, ref.active_count)
    criteria = {
        "ratio": err <= cfg.resize_tol + _TOL_SLACK,
        "preservation": cons <= cfg.background_tol + _TOL_SLACK,
    }
    diag = {"achieved_ratio": float(rho), "scale_err": float(err), "abs_ratio_err": float(abs(rho - instr.ratio))}
    return _finish("Resize", 1.0 - min(err, 1.0), ident, cons, cfg, criteria, diag)


_DISPATCH = {"Translate": translation_reward, "Rotate": rotation_reward, "Resize": resize_reward}


def compute_reward(ref: SceneSpec, edited: SceneSpec, instr: Instruction, cfg: RewardConfig = RewardConfig()):
    try:
        fn = _DISPATCH[instr.task]
    except KeyError:
        raise ValueError(f"no reward for task {instr.task!r}") from None
    return fn(ref, edited, instr, cfg)
