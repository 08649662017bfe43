"""Group-relative policy optimization over flow rollouts.

A group is G rollouts that share one condition and one initial noise
sample; only the per-step perturbations differ. Rewards are standardized
within the group and broadcast to every optimized step of a rollout.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .flow import (
    FlowError,
    FlowPolicy,
    RolloutBatch,
    SamplerConfig,
    Trajectory,
    rollout_batch,
    default_sigma_t_max,
    sample_with_sampler,
    trajectories_from_batch,
    transition_logprob_backward,
    transition_logprob_forward,
)
from .rewards import RewardBreakdown, RewardConfig, compute_reward
from .scene import LATENT_DIM, EditExample, decode_latent, make_rng

log = logging.getLogger(__name__)

DEFAULT_GROUP_SIZE = 16
DEFAULT_CLIP = 2e-4
ADV_EPS = 1e-8

LOG_COLUMNS = (
    "iteration",
    "mean_reward",
    "reward_std",
    "accuracy",
    "trans_dist_or_err",
    "nfe_old",
    "nfe_train",
    "wall_ms",
)


class GRPOError(RuntimeError):
    pass


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise GRPOError("a group needs at least 2 rollouts")
    if np.all(r == r[0]):
        # the rounded mean of equal values can differ from them by an ulp
        return np.zeros_like(r)
    adv = (r - r.mean()) / (r.std() + ADV_EPS)
    # re-centre so the zero-mean property survives rounding when std is tiny
    return adv - adv.mean()


def task_metric(bd: RewardBreakdown) -> float:
    """Displacement for Translate, normalized error for Rotate/Resize."""
    if bd.task == "Translate":
        return bd.diagnostics["displacement"]
    if bd.task == "Rotate":
        return bd.diagnostics["rot_err"]
    return bd.diagnostics["scale_err"]


def score_latents(finals: np.ndarray, example: EditExample, cfg: RewardConfig) -> list[RewardBreakdown]:
    return [compute_reward(example.scene, decode_latent(x, example.scene), example.instruction, cfg) for x in finals]


@dataclass
class RolloutGroup:
    example: EditExample
    condition: np.ndarray
    x_init: np.ndarray
    batch: RolloutBatch
    rewards: np.ndarray
    advantages: np.ndarray
    breakdowns: list[RewardBreakdown]
    optimize: np.ndarray  # (n,) bool, steps that enter the objective

    @property
    def size(self) -> int:
        return self.batch.size

    @property
    def trajectories(self) -> list[Trajectory]:
        return trajectories_from_batch(self.batch, [self.example.scene] * self.size)

    @property
    def nfe_sample(self) -> int:
        return int(self.batch.nfe.sum())


def generate_group(
    old_params: nn.MlpParams,
    example: EditExample,
    G: int,
    sampler: SamplerConfig,
    rng: np.random.Generator,
    reward_cfg: RewardConfig = RewardConfig(),
) -> RolloutGroup:
    if G < 2:
        raise GRPOError("G must be >= 2")
    c = example.condition()
    x0 = rng.standard_normal(LATENT_DIM)
    streams = rng.spawn(G)
    noise = np.stack([s.standard_normal((sampler.n_sampled, LATENT_DIM)) for s in streams])
    batch = sample_with_sampler(old_params, c[None, :], np.repeat(x0[None, :], G, axis=0), sampler, noise)
    bds = score_latents(batch.final, example, reward_cfg)
    rewards = np.array([b.total for b in bds])
    return RolloutGroup(
        example=example,
        condition=c,
        x_init=x0,
        batch=batch,
        rewards=rewards,
        advantages=compute_advantages(rewards),
        breakdowns=bds,
        optimize=sampler.optimize_mask() & batch.perturbed,
    )


@dataclass
class ObjectiveResult:
    loss: float
    grads: nn.GradientBuffer
    ratios: np.ndarray
    clipped_fraction: float
    n_terms: int
    nfe: int


def grpo_objective(
    params: nn.MlpParams,
    groups: Sequence[RolloutGroup],
    clip_eps: float = DEFAULT_CLIP,
    old_log_probs: Optional[Sequence[np.ndarray]] = None,
) -> ObjectiveResult:
    """Clipped surrogate loss averaged over groups, with its exact gradient.

    Each group contributes ``-(1/(G*|S|)) * sum min(r A, clip(r) A)`` over its
    rollouts and optimized steps S. ``old_log_probs`` overrides the stored
    behaviour log-probs (one (G, n) array per group); used in tests.
    """
    if not groups:
        raise GRPOError("no groups")
    xs_from, xs_to, ts, cs, advs, olds, weights = [], [], [], [], [], [], []
    for gi, g in enumerate(groups):
        steps = np.flatnonzero(g.optimize)
        if steps.size == 0:
            raise GRPOError("no perturbed steps in the optimized set; check the sampler configuration")
        b = g.batch
        G = g.size
        lp_old = b.log_probs if old_log_probs is None else np.asarray(old_log_probs[gi])
        for i in steps:
            xs_from.append(b.states[:, i])
            xs_to.append(b.states[:, i + 1])
            ts.append(np.full(G, b.times[i]))
            cs.append(np.repeat(g.condition[None, :], G, axis=0))
            advs.append(g.advantages)
            olds.append(lp_old[:, i])
            weights.append(np.full(G, 1.0 / (G * steps.size * len(groups))))
    X0 = np.concatenate(xs_from)
    X1 = np.concatenate(xs_to)
    T = np.concatenate(ts)
    C = np.concatenate(cs)
    A = np.concatenate(advs)
    LP0 = np.concatenate(olds)
    W = np.concatenate(weights)
    b0 = groups[0].batch
    for g in groups[1:]:
        if g.batch.noise_level != b0.noise_level or g.batch.dt != b0.dt or g.batch.sigma_t_max != b0.sigma_t_max:
            raise GRPOError("groups disagree on the sampler")

    lp, ctx = transition_logprob_forward(params, X0, X1, T, b0.dt, b0.noise_level, C, b0.sigma_t_max)
    ratio = np.exp(lp - LP0)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_term = ratio * A
    clipped_term = clipped * A
    use_unclipped = unclipped_term <= clipped_term
    terms = np.where(use_unclipped, unclipped_term, clipped_term)
    loss = -float(np.sum(W * terms))
    # d term / d logp = r A on the unclipped branch, 0 on the clipped one
    cot = np.where(use_unclipped, -W * unclipped_term, 0.0)
    grads = transition_logprob_backward(params, ctx, cot)
    return ObjectiveResult(
        loss=loss,
        grads=grads,
        ratios=ratio,
        clipped_fraction=float(np.mean(~use_unclipped & (A != 0))),
        n_terms=int(A.size),
        nfe=int(A.size),
    )


def nfe_accounting(sampler: SamplerConfig, G: int = 1, inner_epochs: int = 1) -> dict:
    """Velocity evaluations per rollout and per group, for sampling and training.

    Active mode needs one extra sampling evaluation for the shortcut unless
    the exit step is the last step.
    """
    T = sampler.n_steps
    if sampler.mode == "full":
        old, train = T, T * inner_epochs
    elif sampler.mode == "window":
        old, train = T, sampler.window * inner_epochs
    else:
        K = sampler.exit_step
        old, train = K + (1 if K < T else 0), K * inner_epochs
    return {"nfe_old": old, "nfe_train": train, "group_nfe_old": old * G, "group_nfe_train": train * G}


@dataclass
class TrainState:
    params: nn.MlpParams
    old_params: nn.MlpParams
    adam: nn.AdamState
    sampler: SamplerConfig
    n_steps: int
    group_size: int = DEFAULT_GROUP_SIZE
    clip_eps: float = DEFAULT_CLIP
    inner_epochs: int = 1
    max_grad_norm: float = 1.0
    seed: int = 0
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    workers: int = 1
    iteration: int = 0
    log: list[dict] = field(default_factory=list)
    nfe_sample_total: int = 0
    nfe_train_total: int = 0
    skipped: int = 0

    @classmethod
    def create(
        cls,
        policy: FlowPolicy,
        sampler: SamplerConfig,
        lr: float = 1e-4,
        **kw,
    ) -> "TrainState":
        if sampler.n_steps != policy.n_steps:
            raise FlowError("sampler and policy disagree on n_steps")
        if kw.get("clip_eps", DEFAULT_CLIP) <= 0:
            raise GRPOError("clip range must be positive")
        return cls(
            params=policy.params,
            old_params=policy.params,
            adam=nn.AdamState.for_params(policy.params, lr=lr),
            sampler=sampler,
            n_steps=policy.n_steps,
            **kw,
        )

    @property
    def policy(self) -> FlowPolicy:
        return FlowPolicy(self.params, self.n_steps)


def _make_groups(state: TrainState, examples: Sequence[EditExample]) -> list[RolloutGroup]:
    def one(j):
        rng = make_rng("train", state.seed, state.iteration, j)
        return generate_group(state.old_params, examples[j], state.group_size, state.sampler, rng, state.reward_cfg)

    if state.workers > 1:
        with ThreadPoolExecutor(max_workers=state.workers) as ex:
            return list(ex.map(one, range(len(examples))))
    return [one(j) for j in range(len(examples))]


def train_iteration(state: TrainState, examples: Sequence[EditExample]) -> dict:
    """One sampling phase plus ``inner_epochs`` clipped updates. Mutates ``state``."""
    t0 = time.perf_counter()
    state.sampler = state.sampler.advance_window(state.iteration)
    state.old_params = state.params
    groups = _make_groups(state, examples)
    t1 = time.perf_counter()
    nfe_old = sum(g.nfe_sample for g in groups)
    nfe_train = 0
    losses = []
    # without perturbed steps (noise level 0) there is no likelihood to optimize
    epochs = state.inner_epochs if any(g.optimize.any() for g in groups) else 0
    for _ in range(epochs):
        res = grpo_objective(state.params, groups, state.clip_eps)
        nfe_train += res.nfe
        losses.append(res.loss)
        if not math.isfinite(res.loss):
            log.warning("iteration %d: non-finite loss, update skipped", state.iteration)
            state.skipped += 1
            break
        grads, _ = nn.clip_by_global_norm(res.grads, state.max_grad_norm)
        try:
            state.params, state.adam = nn.adam_step(state.params, grads, state.adam)
        except nn.NonFiniteError:
            log.warning("iteration %d: non-finite gradient, update skipped", state.iteration)
            state.skipped += 1
            break
    rewards = np.concatenate([g.rewards for g in groups])
    bds = [b for g in groups for b in g.breakdowns]
    state.nfe_sample_total += nfe_old
    state.nfe_train_total += nfe_train
    row = {
        "iteration": state.iteration,
        "mean_reward": float(rewards.mean()),
        "reward_std": float(np.mean([g.rewards.std() for g in groups])),
        "accuracy": float(np.mean([b.success for b in bds])),
        "trans_dist_or_err": float(np.mean([task_metric(b) for b in bds])),
        "nfe_old": nfe_old,
        "nfe_train": nfe_train,
        "wall_ms": (time.perf_counter() - t0) * 1000.0,
        "sample_ms": (t1 - t0) * 1000.0,
        "train_ms": (time.perf_counter() - t1) * 1000.0,
        "loss": float(np.mean(losses)) if losses else float("nan"),
    }
    state.log.append(row)
    state.iteration += 1
    return row


@dataclass
class StepImportanceProfile:
    task: str
    n_probes: int
    n_steps: int
    noise_level: float
    group_size: int
    means: np.ndarray  # (T+1,)
    variances: np.ndarray  # (T+1,)
    selected_k: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "T": self.n_steps,
            "a": self.noise_level,
            "G": self.group_size,
            "n_probes": self.n_probes,
            "variances": [float(v) for v in self.variances],
            "means": [float(m) for m in self.means],
            "selected_K": self.selected_k,
        }


RewardFn = Callable[[np.ndarray, EditExample], np.ndarray]


def default_reward_fn(cfg: RewardConfig = RewardConfig()) -> RewardFn:
    def fn(finals, example):
        return np.array([b.total for b in score_latents(finals, example, cfg)])

    return fn


def off_policy_step_eval(
    policy: FlowPolicy,
    probes: Sequence[EditExample],
    group_size: int = 32,
    noise_level: float = 1.0,
    seed: int = 0,
    reward_fn: Optional[RewardFn] = None,
    sigma_t_max: Optional[float] = None,
    enforce_probe_count: bool = True,
) -> StepImportanceProfile:
    """Reward variance when only the first k steps are perturbed, k = 0..T.

    Later steps are deterministic and no shortcut is taken. Each probe keeps
    one initial noise sample for all k, so k = 0 has zero variance.
    """
    if enforce_probe_count and not (2 <= len(probes) <= 4):
        raise GRPOError("calibration expects 2-4 probe conditions")
    if not probes:
        raise GRPOError("no probe conditions")
    if group_size < 2:
        raise GRPOError("group_size must be >= 2")
    reward_fn = reward_fn or default_reward_fn()
    T = policy.n_steps
    dt = policy.dt
    times = policy.times[:-1]
    extra = {"sigma_t_max": default_sigma_t_max(T) if sigma_t_max is None else sigma_t_max}
    var = np.zeros((len(probes), T + 1))
    mean = np.zeros((len(probes), T + 1))
    for p, ex in enumerate(probes):
        c = ex.condition()
        rng = make_rng("calib", seed, p)
        x0 = rng.standard_normal(LATENT_DIM)
        X0 = np.repeat(x0[None, :], group_size, axis=0)
        for k in range(T + 1):
            perturb = np.arange(T) < k
            streams = make_rng("calib", seed, p, k).spawn(group_size)
            noise = np.stack([s.standard_normal((T, LATENT_DIM)) for s in streams])
            batch = rollout_batch(policy.params, c[None, :], X0, times, dt, perturb, noise_level, noise, False, **extra)
            r = np.asarray(reward_fn(batch.final, ex), dtype=float)
            var[p, k] = r.var() if k > 0 and noise_level > 0 else 0.0
            mean[p, k] = r.mean()
    task = probes[0].instruction.task
    prof = StepImportanceProfile(task, len(probes), T, noise_level, group_size, mean.mean(axis=0), var.mean(axis=0))
    if np.any(prof.variances[1:] > 0):
        prof.selected_k = select_exit_step(prof)
    return prof


def select_exit_step(profile) -> int:
    """Largest k in 1..T whose variance attains the maximum."""
    v = np.asarray(profile.variances if isinstance(profile, StepImportanceProfile) else profile, dtype=float)
    tail = v[1:]
    if tail.size == 0 or not np.any(tail > 0):
        raise GRPOError("calibration without noise: reward variance profile is all zero")
    best = tail.max()
    return int(np.flatnonzero(tail == best)[-1]) + 1
