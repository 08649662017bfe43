"""GRPO fine-tuning of a rectified-flow policy on parametric scene edits.

The package is a small, dependency-light testbed: scenes are a handful of
objects with position, depth, orientation and scale; a conditional flow
policy edits their latent encoding; rule-based spatial rewards score the
edit; and a group-relative policy-gradient trainer improves the policy,
optionally perturbing only the first few denoising steps and jumping to the
final sample with a one-step shortcut.
"""

__version__ = "0.1.0"

from .scene import EditExample, Instruction, ObjectState, SceneConfig, SceneSpec  # noqa: E402
from .flow import FlowPolicy, SamplerConfig  # noqa: E402
from .rewards import RewardConfig, compute_reward  # noqa: E402
from .grpo import TrainState, train_iteration  # noqa: E402

__all__ = [
    "__version__",
    "EditExample",
    "FlowPolicy",
    "Instruction",
    "ObjectState",
    "RewardConfig",
    "SamplerConfig",
    "SceneConfig",
    "SceneSpec",
    "TrainState",
    "compute_reward",
    "train_iteration",
]
