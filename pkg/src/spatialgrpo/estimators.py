"""scikit-learn style wrappers around the encoder, the flow policy and the RL loop.

These follow the usual estimator conventions: hyper-parameters are plain
constructor arguments (so ``get_params``/``set_params``/``clone`` work),
learned state carries a trailing underscore, and inputs are validated with
``sklearn.utils.validation`` helpers.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import nn
from .evaluation import evaluate_policy, initial_noise
from .flow import FlowPolicy, SamplerConfig, default_architecture, pretrain, sample_with_sampler
from .grpo import TrainState, train_iteration
from .rewards import RewardConfig
from .scene import COND_DIM, LATENT_DIM, EditExample, decode_latent, encode_scene, make_rng


def check_conditions(X) -> np.ndarray:
    """2-d float array with one encoded condition per row."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if X.shape[1] != COND_DIM:
        raise ValueError(f"expected {COND_DIM} condition features, got {X.shape[1]}")
    return X


def check_latents(Y, n_rows: Optional[int] = None) -> np.ndarray:
    Y = check_array(Y, dtype=np.float64, ensure_all_finite=True)
    if Y.shape[1] != LATENT_DIM:
        raise ValueError(f"expected {LATENT_DIM} latent features, got {Y.shape[1]}")
    if n_rows is not None and Y.shape[0] != n_rows:
        raise ValueError(f"got {Y.shape[0]} targets for {n_rows} conditions")
    return Y


def check_examples(examples) -> list[EditExample]:
    examples = list(examples)
    if not examples:
        raise ValueError("need at least one example")
    bad = [type(e).__name__ for e in examples if not isinstance(e, EditExample)]
    if bad:
        raise TypeError(f"expected EditExample items, got {bad[0]}")
    return examples


class ConditionEncoder(TransformerMixin, BaseEstimator):
    """Maps edit examples to the fixed-width condition vectors the policy reads."""

    def fit(self, X, y=None):
        check_examples(X)
        self.n_features_out_ = COND_DIM
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_features_out_")
        return np.stack([ex.condition() for ex in check_examples(X)])


class FlowEditor(BaseEstimator):
    """Conditional flow policy fitted by flow matching on (condition, target latent) pairs.

    ``predict`` integrates the deterministic ODE from seeded noise, so the
    same inputs always give the same latents.
    """

    def __init__(
        self,
        hidden: Sequence[int] = (256, 256),
        n_steps: int = 10,
        iterations: int = 8000,
        batch_size: int = 256,
        lr: float = 2e-3,
        min_lr: float = 1e-5,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.n_steps = n_steps
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.min_lr = min_lr
        self.random_state = random_state

    def fit(self, X, y):
        X = check_conditions(X)
        Y = check_latents(y, X.shape[0])
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        policy = FlowPolicy(nn.init_params(self.random_state, default_architecture(tuple(self.hidden))), self.n_steps)
        policy, _, losses = pretrain(
            policy, X, Y, self.iterations, batch_size=self.batch_size, lr=self.lr, seed=self.random_state, min_lr=self.min_lr
        )
        self.policy_ = policy
        self.loss_curve_ = losses
        self.n_features_in_ = COND_DIM
        return self

    @classmethod
    def from_policy(cls, policy: FlowPolicy, **kw) -> "FlowEditor":
        est = cls(n_steps=policy.n_steps, **kw)
        est.policy_ = policy
        est.loss_curve_ = np.array([])
        est.n_features_in_ = COND_DIM
        return est

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "policy_")
        X = check_conditions(X)
        sampler = SamplerConfig("full", n_steps=self.policy_.n_steps, noise_level=0.0)
        noise = initial_noise(X.shape[0], self.random_state)
        return sample_with_sampler(self.policy_.params, X, noise, sampler, None).final

    def score(self, X, y) -> float:
        """Negative mean squared latent error of ``predict(X)`` against ``y``."""
        Y = check_latents(y, np.asarray(X).shape[0])
        return -float(np.mean(np.sum((self.predict(X) - Y) ** 2, axis=1)))


class GRPOFineTuner(BaseEstimator):
    """Group-relative policy-gradient fine-tuning of a fitted :class:`FlowEditor`.

    ``fit`` takes unlabeled edit examples: rewards come from the rule-based
    spatial checks, not from targets.
    """

    def __init__(
        self,
        editor: Optional[FlowEditor] = None,
        mode: str = "active",
        exit_step: int = 4,
        window: int = 4,
        noise_level: float = 1.0,
        group_size: int = 16,
        clip_eps: float = 2e-4,
        inner_epochs: int = 1,
        iterations: int = 300,
        batch_conditions: int = 64,
        lr: float = 1e-4,
        random_state: int = 0,
    ):
        self.editor = editor
        self.mode = mode
        self.exit_step = exit_step
        self.window = window
        self.noise_level = noise_level
        self.group_size = group_size
        self.clip_eps = clip_eps
        self.inner_epochs = inner_epochs
        self.iterations = iterations
        self.batch_conditions = batch_conditions
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        examples = check_examples(X)
        if self.editor is None:
            raise ValueError("GRPOFineTuner needs a fitted FlowEditor")
        check_is_fitted(self.editor, "policy_")
        policy = self.editor.policy_
        sampler = SamplerConfig(
            self.mode,
            n_steps=policy.n_steps,
            noise_level=self.noise_level,
            window=self.window,
            exit_step=self.exit_step,
        )
        state = TrainState.create(
            policy,
            sampler,
            lr=self.lr,
            group_size=self.group_size,
            clip_eps=self.clip_eps,
            inner_epochs=self.inner_epochs,
            seed=self.random_state,
        )
        rng = make_rng("train", self.random_state, 1)
        b = min(self.batch_conditions, len(examples))
        for _ in range(self.iterations):
            idx = rng.choice(len(examples), size=b, replace=False)
            train_iteration(state, [examples[i] for i in idx])
        self.policy_ = state.policy
        self.log_ = state.log
        return self

    def _editor(self) -> FlowEditor:
        check_is_fitted(self, "policy_")
        return FlowEditor.from_policy(self.policy_, random_state=self.random_state)

    def predict(self, X) -> list:
        """Edited scenes decoded from the deterministic ODE sample."""
        examples = check_examples(X)
        lat = self._editor().predict(np.stack([e.condition() for e in examples]))
        return [decode_latent(x, e.scene) for x, e in zip(lat, examples)]

    def score(self, X, y=None) -> float:
        """Edit accuracy (fraction passing every task criterion)."""
        check_is_fitted(self, "policy_")
        return evaluate_policy(self.policy_, check_examples(X), seed=self.random_state, reward_cfg=RewardConfig()).accuracy


def oracle_latents(examples: Sequence[EditExample]) -> np.ndarray:
    """Encoded oracle targets, the regression targets for :class:`FlowEditor`."""
    examples = check_examples(examples)
    if any(e.target is None for e in examples):
        raise ValueError("examples need oracle targets (make_examples(..., with_targets=True))")
    return np.stack([encode_scene(e.target) for e in examples])
