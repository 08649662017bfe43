"""Benchmark harness: seeded test sets, task metrics and sampler comparison."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .flow import FlowPolicy, SamplerConfig, sample_with_sampler
from .grpo import TrainState, nfe_accounting, train_iteration
from .rewards import RewardConfig, compute_reward
from .scene import LATENT_DIM, TASKS, EditExample, SceneConfig, decode_latent, make_examples, make_rng

DEFAULT_TEST_SIZE = 100
TEST_SEED_STRIDE = 1_000_000


@dataclass
class MetricsReport:
    task: str
    n_samples: int
    accuracy: float
    trans_dist: Optional[float]
    rot_err: Optional[float]
    scale_err: Optional[float]
    consistency_l1: float
    mean_reward: float
    records: list[dict] = field(default_factory=list)

    def to_dict(self, with_records: bool = True) -> dict:
        d = {
            "task": self.task,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "trans_dist": self.trans_dist,
            "rot_err": self.rot_err,
            "scale_err": self.scale_err,
            "consistency_l1": self.consistency_l1,
            "mean_reward": self.mean_reward,
        }
        if with_records:
            d["records"] = self.records
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def build_test_set(task: str, n: int = DEFAULT_TEST_SIZE, seed: int = 0, config: SceneConfig = SceneConfig()):
    """Seeded test pairs from the ``eval`` namespace (disjoint from training data)."""
    if n < 1:
        raise ValueError("test set needs n >= 1")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    base = seed * TEST_SEED_STRIDE
    return make_examples(range(base, base + n), 1, task, config, namespace="eval")


def initial_noise(n: int, seed: int = 0) -> np.ndarray:
    return np.stack([make_rng("eval", seed, i).standard_normal(LATENT_DIM) for i in range(n)])


def evaluate_policy(
    policy: FlowPolicy,
    test_set: Sequence[EditExample],
    sampler: Optional[SamplerConfig] = None,
    seed: int = 0,
    reward_cfg: RewardConfig = RewardConfig(),
) -> MetricsReport:
    """One deterministic rollout per test item (noise level forced to 0)."""
    if not test_set:
        raise ValueError("empty test set")
    sampler = (sampler or SamplerConfig("full", n_steps=policy.n_steps)).deterministic()
    C = np.stack([ex.condition() for ex in test_set])
    batch = sample_with_sampler(policy.params, C, initial_noise(len(test_set), seed), sampler, None)
    records = []
    bds = []
    for i, (ex, x) in enumerate(zip(test_set, batch.final)):
        bd = compute_reward(ex.scene, decode_latent(x, ex.scene), ex.instruction, reward_cfg)
        bds.append(bd)
        records.append(
            {
                "index": i,
                "scene_seed": ex.scene_seed,
                "instruction_seed": ex.instruction_seed,
                "task": ex.instruction.task,
                "success": bd.success,
                "total": bd.total,
                "task_score": bd.task_score,
                "identity_penalty": bd.identity_penalty,
                "consistency_penalty": bd.consistency_penalty,
                "criteria": bd.criteria,
                "diagnostics": bd.diagnostics,
            }
        )

    def mean_of(task, key):
        vals = [b.diagnostics[key] for b in bds if b.task == task]
        return float(np.mean(vals)) if vals else None

    tasks = {ex.instruction.task for ex in test_set}
    return MetricsReport(
        task=tasks.pop() if len(tasks) == 1 else "mixed",
        n_samples=len(test_set),
        accuracy=float(np.mean([b.success for b in bds])),
        trans_dist=mean_of("Translate", "displacement"),
        rot_err=mean_of("Rotate", "rot_err"),
        scale_err=mean_of("Resize", "scale_err"),
        consistency_l1=float(np.mean([b.consistency_penalty for b in bds])),
        mean_reward=float(np.mean([b.total for b in bds])),
        records=records,
    )


def condition_stream(n_examples: int, iterations: int, batch_size: int, seed: int) -> np.ndarray:
    """Indices of the training examples used at each iteration, shape (iterations, batch)."""
    rng = make_rng("train", seed, 7)
    return np.stack([rng.choice(n_examples, size=min(batch_size, n_examples), replace=False) for _ in range(iterations)])


def stream_digest(stream: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(stream, dtype="<i8").tobytes()).hexdigest()


@dataclass
class StrategyResult:
    name: str
    sampler: SamplerConfig
    nfe_old: int
    nfe_train: int
    cumulative_nfe_old: int
    cumulative_nfe_train: int
    sample_s: float
    train_s: float
    initial: MetricsReport
    final: MetricsReport
    log: list[dict]
    eval_curve: list[dict]
    stream_digest: str
    params: Optional[nn.MlpParams] = None

    @property
    def total_s(self) -> float:
        return self.sample_s + self.train_s


@dataclass
class SamplerComparison:
    task: str
    iterations: int
    seed: int
    results: list[StrategyResult]

    def table_rows(self) -> list[dict]:
        rows = []
        for r in self.results:
            rows.append(
                {
                    "sampling": r.name,
                    "nfe_old": r.nfe_old,
                    "nfe_train": r.nfe_train,
                    "cum_nfe_old": r.cumulative_nfe_old,
                    "cum_nfe_train": r.cumulative_nfe_train,
                    "sample_s": round(r.sample_s, 3),
                    "train_s": round(r.train_s, 3),
                    "total_s": round(r.total_s, 3),
                    "trans_dist_or_err": _headline(r.final),
                    "accuracy": r.final.accuracy,
                    "mean_reward": r.final.mean_reward,
                }
            )
        return rows

    def write_table(self, path, timing: bool = True) -> None:
        rows = self.table_rows()
        if not timing:
            for row in rows:
                for k in ("sample_s", "train_s", "total_s"):
                    row[k] = ""
        _write_csv(path, rows)

    def write_curves(self, path) -> None:
        """Long-format eval reward curves: iteration, strategy, mean_reward, accuracy."""
        rows = [
            {"iteration": p["iteration"], "strategy": r.name, "mean_reward": p["mean_reward"], "accuracy": p["accuracy"]}
            for r in self.results
            for p in r.eval_curve
        ]
        _write_csv(path, rows)


def _headline(rep: MetricsReport):
    if rep.task == "Translate":
        return rep.trans_dist
    if rep.task == "Rotate":
        return rep.rot_err
    if rep.task == "Resize":
        return rep.scale_err
    return None


def _write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def run_strategy(
    name: str,
    policy: FlowPolicy,
    sampler: SamplerConfig,
    train_set: Sequence[EditExample],
    test_set: Sequence[EditExample],
    iterations: int,
    batch_size: int,
    seed: int = 0,
    eval_every: int = 25,
    eval_seed: int = 0,
    callback: Optional[Callable[[TrainState], None]] = None,
    **train_kw,
) -> StrategyResult:
    """Train one strategy from ``policy`` and track test metrics along the way.

    ``callback(state)`` runs after every iteration (used for periodic
    checkpoints). Test evaluation always uses the deterministic full ODE.
    """
    reward_cfg = train_kw.get("reward_cfg", RewardConfig())
    eval_sampler = SamplerConfig("full", n_steps=sampler.n_steps, sigma_t_max=sampler.sigma_t_max)

    def evaluate(p):
        return evaluate_policy(p, test_set, eval_sampler, eval_seed, reward_cfg)

    state = TrainState.create(policy, sampler, seed=seed, **train_kw)
    stream = condition_stream(len(train_set), iterations, batch_size, seed)
    initial = evaluate(policy)
    curve = [{"iteration": 0, "mean_reward": initial.mean_reward, "accuracy": initial.accuracy}]
    final = initial
    for it in range(iterations):
        train_iteration(state, [train_set[j] for j in stream[it]])
        if callback is not None:
            callback(state)
        if (it + 1) % eval_every == 0 or it + 1 == iterations:
            final = evaluate(state.policy)
            curve.append({"iteration": it + 1, "mean_reward": final.mean_reward, "accuracy": final.accuracy})
    acct = nfe_accounting(state.sampler, 1, state.inner_epochs)
    return StrategyResult(
        name=name,
        sampler=sampler,
        nfe_old=acct["nfe_old"],
        nfe_train=acct["nfe_train"],
        cumulative_nfe_old=state.nfe_sample_total,
        cumulative_nfe_train=state.nfe_train_total,
        sample_s=sum(r["sample_ms"] for r in state.log) / 1000.0,
        train_s=sum(r["train_ms"] for r in state.log) / 1000.0,
        initial=initial,
        final=final,
        log=state.log,
        eval_curve=curve,
        stream_digest=stream_digest(stream),
        params=state.params,
    )


def compare_samplers(
    task: str,
    policy: FlowPolicy,
    strategies: dict[str, SamplerConfig],
    train_set: Sequence[EditExample],
    test_set: Sequence[EditExample],
    iterations: int,
    batch_size: int,
    seed: int = 0,
    **kw,
) -> SamplerComparison:
    """Train every strategy from the same policy on the same condition stream."""
    results = [
        run_strategy(name, policy, s, train_set, test_set, iterations, batch_size, seed, **kw)
        for name, s in strategies.items()
    ]
    if len({r.stream_digest for r in results}) != 1:
        raise RuntimeError("strategies saw different condition streams")
    return SamplerComparison(task, iterations, seed, results)


def nfe_to_reach(result: StrategyResult, target_reward: float) -> Optional[int]:
    """Cumulative training NFE at the first eval point whose reward reaches ``target_reward``."""
    per_iter = np.cumsum([r["nfe_train"] for r in result.log])
    for p in result.eval_curve:
        if p["mean_reward"] >= target_reward:
            it = p["iteration"]
            return 0 if it == 0 else int(per_iter[it - 1])
    return None
