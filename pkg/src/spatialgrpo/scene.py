"""Parametric scene world, edit templates, oracle edits and latent encodings.

A scene holds a fixed number of object slots (only the first ``active_count``
take part in instructions) plus a 4-d background descriptor. Scenes are
encoded to a 54-d latent vector, which is what the flow policy generates,
and paired with an instruction into an 82-d condition vector.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

N_MAX = 5
S_MIN, S_MAX = 0.02, 0.8
SLOT_DIM = 10
BG_DIM = 4
LATENT_DIM = N_MAX * SLOT_DIM + BG_DIM  # 54
CANONICAL_DELTA = 0.25

TASKS = ("Translate", "Rotate", "Resize")
DIRECTIONS = ("left", "right", "up", "down", "forward", "backward")
AXES = ("x", "y", "z")
ROT_DIRS = ("clockwise", "counterclockwise")
ANGLES = (45, 90, 135, 180)
RATIOS = (1.25, 1.5, 2.0, 3.0, 4.0)

COND_DIM = LATENT_DIM + len(TASKS) + N_MAX + len(DIRECTIONS) + len(AXES) + len(ROT_DIRS) + len(ANGLES) + len(RATIOS)

# (field index into (u, v, d), sign) for each translation direction
DIRECTION_AXIS = {
    "left": (0, -1.0),
    "right": (0, 1.0),
    "up": (1, -1.0),
    "down": (1, 1.0),
    "forward": (2, -1.0),
    "backward": (2, 1.0),
}

# channel offsets inside one encoded slot
CH_U, CH_V, CH_D = 0, 1, 2
CH_ROT = {"x": (3, 4), "y": (5, 6), "z": (7, 8)}
CH_S = 9

_LOG_SMIN, _LOG_SMAX = math.log(S_MIN), math.log(S_MAX)
EMPTY_SCALE = math.sqrt(S_MIN * S_MAX)


class SceneError(ValueError):
    pass


def wrap_angle(a):
    """Wrap degrees into [-180, 180)."""
    w = (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0
    # fmod of values a hair below a multiple of 360 can round up to +180
    w = np.where(w >= 180.0, w - 360.0, w)
    return w if np.ndim(a) else float(w)


@dataclass(frozen=True)
class ObjectState:
    index: int
    position: tuple[float, float]
    depth: float
    orientation: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        vals = (*self.position, self.depth, *self.orientation, self.scale)
        if not all(math.isfinite(x) for x in vals):
            raise SceneError(f"non-finite field in object {self.index}")
        if not (0 <= self.index < N_MAX):
            raise SceneError(f"slot index {self.index} out of range")
        if not all(0.0 <= x <= 1.0 for x in (*self.position, self.depth)):
            raise SceneError(f"position/depth out of [0,1] in object {self.index}")
        if not all(-180.0 <= a < 180.0 for a in self.orientation):
            raise SceneError(f"unwrapped angle in object {self.index}")
        if not (S_MIN - 1e-12 <= self.scale <= S_MAX + 1e-12):
            raise SceneError(f"scale {self.scale} out of [{S_MIN}, {S_MAX}]")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.depth])

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "position": list(self.position),
            "depth": self.depth,
            "orientation": list(self.orientation),
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectState":
        return cls(
            index=int(d["index"]),
            position=(float(d["position"][0]), float(d["position"][1])),
            depth=float(d["depth"]),
            orientation=tuple(float(a) for a in d["orientation"]),
            scale=float(d["scale"]),
        )


def empty_object(index: int) -> ObjectState:
    """Canonical placeholder for inactive slots (decodes from the all-zero slot)."""
    return ObjectState(index, (0.5, 0.5), 0.5, (0.0, 0.0, 0.0), EMPTY_SCALE)


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[ObjectState, ...]
    active_count: int
    background: tuple[float, float, float, float]

    def __post_init__(self):
        if len(self.objects) != N_MAX:
            raise SceneError(f"expected {N_MAX} object slots, got {len(self.objects)}")
        if not (2 <= self.active_count <= N_MAX):
            raise SceneError(f"active_count {self.active_count} not in [2, {N_MAX}]")
        if [o.index for o in self.objects] != list(range(N_MAX)):
            raise SceneError("object slot indices must be 0..N_MAX-1 in order")
        if len(self.background) != BG_DIM or not all(0.0 <= b <= 1.0 for b in self.background):
            raise SceneError("background must be 4 values in [0,1]")

    def with_object(self, obj: ObjectState) -> "SceneSpec":
        objs = list(self.objects)
        objs[obj.index] = obj
        return replace(self, objects=tuple(objs))

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "active_count": self.active_count,
            "background": list(self.background),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            objects=tuple(ObjectState.from_dict(o) for o in d["objects"]),
            active_count=int(d["active_count"]),
            background=tuple(float(b) for b in d["background"]),
        )


@dataclass(frozen=True)
class Instruction:
    task: str
    target: int
    direction: Optional[str] = None
    axis: Optional[str] = None
    rot_dir: Optional[str] = None
    angle_deg: Optional[int] = None
    ratio: Optional[float] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise SceneError(f"unknown task {self.task!r}")
        if not (0 <= self.target < N_MAX):
            raise SceneError(f"target {self.target} out of range")
        populated = {
            "Translate": ("direction",),
            "Rotate": ("axis", "rot_dir", "angle_deg"),
            "Resize": ("ratio",),
        }[self.task]
        for name in ("direction", "axis", "rot_dir", "angle_deg", "ratio"):
            val = getattr(self, name)
            if (name in populated) != (val is not None):
                raise SceneError(f"field {name!r} must {'be set' if name in populated else 'be empty'} for {self.task}")
        if self.direction is not None and self.direction not in DIRECTIONS:
            raise SceneError(f"bad direction {self.direction!r}")
        if self.axis is not None and self.axis not in AXES:
            raise SceneError(f"bad axis {self.axis!r}")
        if self.rot_dir is not None and self.rot_dir not in ROT_DIRS:
            raise SceneError(f"bad rot_dir {self.rot_dir!r}")
        if self.angle_deg is not None and self.angle_deg not in ANGLES:
            raise SceneError(f"bad angle {self.angle_deg!r}")
        if self.ratio is not None and self.ratio not in RATIOS:
            raise SceneError(f"bad ratio {self.ratio!r}")

    @property
    def signed_angle(self) -> float:
        """Counterclockwise is positive."""
        return float(self.angle_deg) if self.rot_dir == "counterclockwise" else -float(self.angle_deg)

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "target": self.target,
            "direction": self.direction,
            "axis": self.axis,
            "rot_dir": self.rot_dir,
            "angle_deg": self.angle_deg,
            "ratio": self.ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Instruction":
        ratio = d.get("ratio")
        angle = d.get("angle_deg")
        return cls(
            task=d["task"],
            target=int(d["target"]),
            direction=d.get("direction"),
            axis=d.get("axis"),
            rot_dir=d.get("rot_dir"),
            angle_deg=None if angle is None else int(angle),
            ratio=None if ratio is None else float(ratio),
        )


@dataclass(frozen=True)
class SceneConfig:
    """Bounds for random scene generation."""

    min_separation: float = 0.15
    position_range: tuple[float, float] = (0.05, 0.95)
    depth_range: tuple[float, float] = (0.05, 0.95)
    scale_range: tuple[float, float] = (0.02, 0.2)
    max_attempts: int = 1000

    def validate(self) -> None:
        lo, hi = self.position_range
        if not (0.0 <= lo < hi <= 1.0):
            raise SceneError("position_range must lie in [0,1]")
        lo, hi = self.depth_range
        if not (0.0 <= lo < hi <= 1.0):
            raise SceneError("depth_range must lie in [0,1]")
        lo, hi = self.scale_range
        if not (S_MIN <= lo < hi <= S_MAX):
            raise SceneError("scale_range must lie in [S_MIN, S_MAX]")
        if self.min_separation < 0:
            raise SceneError("min_separation must be non-negative")


# Seed namespaces keep data, training and evaluation streams disjoint.
NAMESPACES = ("data", "train", "eval", "calib", "probe")


def seed_sequence(namespace: str, *keys: int) -> np.random.SeedSequence:
    """Deterministic SeedSequence for a named stream plus integer keys."""
    tag = int.from_bytes(hashlib.sha256(namespace.encode()).digest()[:8], "little")
    return np.random.SeedSequence([tag, *[int(k) for k in keys]])


def make_rng(namespace: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(namespace, *keys))


def sample_scene(rng_seed: int, config: SceneConfig = SceneConfig(), namespace: str = "data") -> SceneSpec:
    config.validate()
    rng = make_rng(namespace, rng_seed, 0)
    active = int(rng.integers(2, N_MAX + 1))
    lo, hi = config.position_range
    positions: list[np.ndarray] = []
    attempts = 0
    while len(positions) < active:
        attempts += 1
        if attempts > config.max_attempts:
            raise SceneError(
                f"could not place {active} objects with separation {config.min_separation} in {config.max_attempts} attempts"
            )
        p = rng.uniform(lo, hi, size=2)
        if all(np.hypot(*(p - q)) >= config.min_separation for q in positions):
            positions.append(p)
    objs = []
    for i in range(N_MAX):
        if i >= active:
            objs.append(empty_object(i))
            continue
        depth = rng.uniform(*config.depth_range)
        orient = wrap_angle(rng.uniform(-180.0, 180.0, size=3))
        scale = rng.uniform(*config.scale_range)
        objs.append(
            ObjectState(
                i,
                (float(positions[i][0]), float(positions[i][1])),
                float(depth),
                tuple(float(a) for a in orient),
                float(scale),
            )
        )
    bg = tuple(float(b) for b in rng.uniform(0.0, 1.0, size=BG_DIM))
    return SceneSpec(tuple(objs), active, bg)


def translate_allowed(obj: ObjectState, direction: str, delta: float = CANONICAL_DELTA, bounds=(0.05, 0.95)) -> bool:
    axis, sign = DIRECTION_AXIS[direction]
    new = obj.center[axis] + sign * delta
    return bounds[0] <= new <= bounds[1]


def instruction_grid(scene: SceneSpec, task: str, target: int, delta: float = CANONICAL_DELTA) -> list[Instruction]:
    """All template instructions for one task and target."""
    if task == "Translate":
        obj = scene.objects[target]
        return [Instruction("Translate", target, direction=d) for d in DIRECTIONS if translate_allowed(obj, d, delta)]
    if task == "Rotate":
        return [
            Instruction("Rotate", target, axis=ax, rot_dir=rd, angle_deg=ang)
            for ax in AXES
            for rd in ROT_DIRS
            for ang in ANGLES
        ]
    if task == "Resize":
        return [Instruction("Resize", target, ratio=r) for r in RATIOS]
    raise SceneError(f"unknown task {task!r}")


def sample_instruction(
    rng_seed: int, scene: SceneSpec, task: Optional[str] = None, namespace: str = "data"
) -> Instruction:
    rng = make_rng(namespace, rng_seed, 1)
    if task is None:
        task = TASKS[int(rng.integers(len(TASKS)))]
    elif task not in TASKS:
        raise SceneError(f"unknown task {task!r}")
    target = int(rng.integers(scene.active_count))
    grid = instruction_grid(scene, task, target)
    return grid[int(rng.integers(len(grid)))]


def apply_oracle_edit(scene: SceneSpec, instr: Instruction, delta: float = CANONICAL_DELTA) -> SceneSpec:
    if instr.target >= scene.active_count:
        raise SceneError(f"target {instr.target} is not an active object")
    obj = scene.objects[instr.target]
    if instr.task == "Translate":
        axis, sign = DIRECTION_AXIS[instr.direction]
        c = obj.center
        c[axis] = min(1.0, max(0.0, c[axis] + sign * delta))
        new = replace(obj, position=(float(c[0]), float(c[1])), depth=float(c[2]))
    elif instr.task == "Rotate":
        k = AXES.index(instr.axis)
        ang = list(obj.orientation)
        ang[k] = wrap_angle(ang[k] + instr.signed_angle)
        new = replace(obj, orientation=tuple(ang))
    else:
        new = replace(obj, scale=min(S_MAX, obj.scale * instr.ratio))
    return scene.with_object(new)


def _to_unit(x):
    return 2.0 * x - 1.0


def _from_unit(r):
    return (np.clip(r, -1.0, 1.0) + 1.0) / 2.0


def _scale_to_raw(s):
    return 2.0 * (math.log(s) - _LOG_SMIN) / (_LOG_SMAX - _LOG_SMIN) - 1.0


def _raw_to_scale(r):
    r = min(1.0, max(-1.0, float(r)))
    s = math.exp(_LOG_SMIN + (r + 1.0) / 2.0 * (_LOG_SMAX - _LOG_SMIN))
    return min(S_MAX, max(S_MIN, s))


def encode_object(obj: ObjectState) -> np.ndarray:
    rad = np.deg2rad(obj.orientation)
    out = np.empty(SLOT_DIM)
    out[CH_U] = _to_unit(obj.position[0])
    out[CH_V] = _to_unit(obj.position[1])
    out[CH_D] = _to_unit(obj.depth)
    out[3:9:2] = np.cos(rad)
    out[4:9:2] = np.sin(rad)
    out[CH_S] = _scale_to_raw(obj.scale)
    return out


def encode_scene(scene: SceneSpec) -> np.ndarray:
    x = np.zeros(LATENT_DIM)
    for obj in scene.objects[: scene.active_count]:
        x[obj.index * SLOT_DIM : (obj.index + 1) * SLOT_DIM] = encode_object(obj)
    x[N_MAX * SLOT_DIM :] = _to_unit(np.asarray(scene.background))
    return x


def _decode_angle(c: float, s: float) -> float:
    if math.hypot(c, s) < 1e-6:
        return 0.0
    return float(wrap_angle(math.degrees(math.atan2(s, c))))


def decode_latent(x: np.ndarray, template: SceneSpec) -> SceneSpec:
    """Total inverse of :func:`encode_scene`; inactive slots come from ``template``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (LATENT_DIM,):
        raise SceneError(f"latent must have shape ({LATENT_DIM},), got {x.shape}")
    objs = []
    for i in range(N_MAX):
        if i >= template.active_count:
            objs.append(template.objects[i])
            continue
        sl = x[i * SLOT_DIM : (i + 1) * SLOT_DIM]
        u, v, d = (float(a) for a in _from_unit(sl[:3]))
        angles = tuple(_decode_angle(sl[3 + 2 * k], sl[4 + 2 * k]) for k in range(3))
        objs.append(ObjectState(i, (u, v), d, angles, _raw_to_scale(sl[CH_S])))
    bg = tuple(float(b) for b in _from_unit(x[N_MAX * SLOT_DIM :]))
    return SceneSpec(tuple(objs), template.active_count, bg)


def _one_hot(n: int, k: Optional[int]) -> np.ndarray:
    v = np.zeros(n)
    if k is not None:
        v[k] = 1.0
    return v


def encode_instruction(instr: Instruction) -> np.ndarray:
    def idx(seq, val):
        return None if val is None else seq.index(val)

    return np.concatenate(
        [
            _one_hot(len(TASKS), TASKS.index(instr.task)),
            _one_hot(N_MAX, instr.target),
            _one_hot(len(DIRECTIONS), idx(DIRECTIONS, instr.direction)),
            _one_hot(len(AXES), idx(AXES, instr.axis)),
            _one_hot(len(ROT_DIRS), idx(ROT_DIRS, instr.rot_dir)),
            _one_hot(len(ANGLES), idx(ANGLES, instr.angle_deg)),
            _one_hot(len(RATIOS), idx(RATIOS, instr.ratio)),
        ]
    )


def encode_condition(scene: SceneSpec, instr: Instruction) -> np.ndarray:
    return np.concatenate([encode_scene(scene), encode_instruction(instr)])


# Condition layout: name -> slice, useful for tests and debugging.
COND_BLOCKS: dict[str, slice] = {}
_off = 0
for _name, _n in (
    ("scene", LATENT_DIM),
    ("task", len(TASKS)),
    ("target", N_MAX),
    ("direction", len(DIRECTIONS)),
    ("axis", len(AXES)),
    ("rot_dir", len(ROT_DIRS)),
    ("angle", len(ANGLES)),
    ("ratio", len(RATIOS)),
):
    COND_BLOCKS[_name] = slice(_off, _off + _n)
    _off += _n
del _off, _name, _n


@dataclass(frozen=True)
class EditExample:
    """One dataset line: reference scene, instruction and the seeds that made them."""

    scene: SceneSpec
    instruction: Instruction
    scene_seed: int
    instruction_seed: int
    target: Optional[SceneSpec] = field(default=None, compare=False)

    def condition(self) -> np.ndarray:
        return encode_condition(self.scene, self.instruction)

    def to_dict(self) -> dict:
        d = {
            "scene_seed": self.scene_seed,
            "instruction_seed": self.instruction_seed,
            "scene": self.scene.to_dict(),
            "instruction": self.instruction.to_dict(),
        }
        if self.target is not None:
            d["target"] = self.target.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EditExample":
        return cls(
            scene=SceneSpec.from_dict(d["scene"]),
            instruction=Instruction.from_dict(d["instruction"]),
            scene_seed=int(d["scene_seed"]),
            instruction_seed=int(d["instruction_seed"]),
            target=SceneSpec.from_dict(d["target"]) if d.get("target") is not None else None,
        )


def write_jsonl(path, examples: Iterable[EditExample]) -> int:
    n = 0
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), sort_keys=True) + "\n")
            n += 1
    return n


def read_jsonl(path) -> list[EditExample]:
    with open(path) as fh:
        return [EditExample.from_dict(json.loads(line)) for line in fh if line.strip()]


def make_examples(
    scene_seeds: Sequence[int],
    per_scene: int,
    task: Optional[str],
    config: SceneConfig = SceneConfig(),
    namespace: str = "data",
    with_targets: bool = False,
) -> list[EditExample]:
    out = []
    for s in scene_seeds:
        scene = sample_scene(s, config, namespace)
        for j in range(per_scene):
            iseed = s * 1000 + j
            instr = sample_instruction(iseed, scene, task, namespace)
            tgt = apply_oracle_edit(scene, instr) if with_targets else None
            out.append(EditExample(scene, instr, s, iseed, tgt))
    return out
