"""Dense feed-forward network with hand-written reverse mode and Adam.

Everything works on a single vector or on a batch (rows are samples). For a
batch, ``backward`` sums parameter gradients over rows.
"""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spatialgrpo-mlp"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when gradients or losses stop being finite."""


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "silu"

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation != "silu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(int(h) for h in d["hidden"]), int(d["output_dim"]), d.get("activation", "silu"))


@dataclass
class MlpParams:
    """Layer weights (out x in) and biases. Treated as immutable by the library."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "MlpParams":
        return MlpParams(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams(self.arch, [np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "MlpParams":
        vec = np.asarray(vec, dtype=float)
        arrays, off = [], 0
        for a in self.arrays():
            arrays.append(vec[off : off + a.size].reshape(a.shape).copy())
            off += a.size
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {off}")
        return MlpParams(self.arch, arrays[0::2], arrays[1::2])

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


# Gradients share the parameter layout.
GradientBuffer = MlpParams


def init_params(rng_seed: int, arch: Architecture) -> MlpParams:
    """Kaiming-normal weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(rng_seed)
    dims = arch.dims
    weights = [rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
    biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
    return MlpParams(arch, weights, biases)


def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)  # input to each layer
    preacts: list[np.ndarray] = field(default_factory=list)  # pre-activations of hidden layers
    batched: bool = False


def forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != params.arch.input_dim:
        raise ValueError(f"input has {h.shape[1]} features, network expects {params.arch.input_dim}")
    tape = Tape(batched=batched)
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        tape.inputs.append(h)
        z = h @ w.T + b
        if i < n - 1:
            tape.preacts.append(z)
            h = silu(z)
        else:
            h = z
    return (h if batched else h[0]), tape


def backward(params: MlpParams, tape: Tape, cotangent: np.ndarray) -> tuple[GradientBuffer, np.ndarray]:
    """Vector-Jacobian product for parameters and input."""
    g = np.asarray(cotangent, dtype=float)
    g = g if tape.batched else g[None, :]
    if g.shape != (tape.inputs[0].shape[0], params.arch.output_dim):
        raise ValueError(f"cotangent shape {g.shape} does not match forward output")
    n = len(params.weights)
    dws: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    dbs: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        dws[i] = g.T @ tape.inputs[i]
        dbs[i] = g.sum(axis=0)
        g = g @ params.weights[i]
        if i > 0:
            g = g * silu_grad(tape.preacts[i - 1])
    return MlpParams(params.arch, dws, dbs), (g if tape.batched else g[0])


def global_norm(grads: GradientBuffer) -> float:
    return float(np.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays())))


def clip_by_global_norm(grads: GradientBuffer, max_norm: float) -> tuple[GradientBuffer, float]:
    norm = global_norm(grads)
    if not np.isfinite(norm) or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return MlpParams(grads.arch, [w * s for w in grads.weights], [b * s for b in grads.biases]), norm


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(params.zeros_like(), params.zeros_like(), 0, lr, beta1, beta2, eps)


def adam_step(params: MlpParams, grads: GradientBuffer, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Returns new objects; inputs are untouched."""
    if not grads.all_finite():
        raise NonFiniteError("non-finite gradient passed to adam_step")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps))
        new_m.append(m2)
        new_v.append(v2)
    arch = params.arch
    return (
        MlpParams(arch, new_p[0::2], new_p[1::2]),
        AdamState(
            MlpParams(arch, new_m[0::2], new_m[1::2]),
            MlpParams(arch, new_v[0::2], new_v[1::2]),
            t,
            state.lr,
            b1,
            b2,
            state.eps,
        ),
    )


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(float)


def params_to_dict(params: MlpParams, extra: Optional[dict] = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.arch.to_dict(),
        "layers": [{"W": _encode_array(w), "b": _encode_array(b)} for w, b in zip(params.weights, params.biases)],
        "extra": extra or {},
    }


def params_from_dict(d: dict) -> MlpParams:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    arch = Architecture.from_dict(d["architecture"])
    ws = [_decode_array(l["W"]) for l in d["layers"]]
    bs = [_decode_array(l["b"]) for l in d["layers"]]
    dims = arch.dims
    for i, (w, b) in enumerate(zip(ws, bs)):
        if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
            raise ValueError(f"layer {i} shape mismatch with architecture")
    return MlpParams(arch, ws, bs)


def save_checkpoint(path, params: MlpParams, extra: Optional[dict] = None) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(params, extra), fh, sort_keys=True)


def load_checkpoint(path) -> tuple[MlpParams, dict]:
    with open(path) as fh:
        d = json.load(fh)
    return params_from_dict(d), d.get("extra", {})


def flat_numeric_grad(fn, params: MlpParams, h: float = 1e-5, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central finite differences of scalar ``fn(params)``; testing aid."""
    base = params.flat()
    idx = range(base.size) if indices is None else indices
    out = np.zeros(base.size)
    for i in idx:
        e = base.copy()
        e[i] += h
        fp = fn(params.with_flat(e))
        e[i] -= 2 * h
        fm = fn(params.with_flat(e))
        out[i] = (fp - fm) / (2 * h)
    return out
