"""Command-line pipeline: gen-data, pretrain, calibrate, train, eval, compare.

Every command reads a :class:`RunConfig`, writes its artifacts under
``<out>/<command>/`` and leaves a ``manifest.json`` next to them. Passing a
manifest back through ``--config`` reruns the command with the same
settings, and the JSONL/CSV artifacts come out byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, nn
from .config import ConfigError, MANIFEST_VERSION, RunConfig, config_from_dict, load_config
from .evaluation import build_test_set, compare_samplers, evaluate_policy, run_strategy
from .flow import FlowPolicy, SamplerConfig, default_architecture, pretrain
from .grpo import LOG_COLUMNS, StepImportanceProfile, off_policy_step_eval, select_exit_step
from .rewards import RewardConfig
from .scene import SceneConfig, encode_scene, make_examples, read_jsonl, write_jsonl

log = logging.getLogger("spatialgrpo")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PREREQ = 3
EXIT_NUMERIC = 4

COMMANDS = ("gen-data", "pretrain", "calibrate", "train", "eval", "compare")


class PrerequisiteError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def scene_config(cfg: RunConfig) -> SceneConfig:
    d = cfg.data
    return SceneConfig(
        min_separation=d.min_separation,
        position_range=tuple(d.position_range),
        depth_range=tuple(d.depth_range),
        scale_range=tuple(d.scale_range),
    )


def reward_config(cfg: RunConfig) -> RewardConfig:
    r = cfg.reward
    return RewardConfig(
        lambda_id=r.lambda_id,
        lambda_bg=r.lambda_bg,
        move_threshold=r.move_threshold,
        identity_tol=r.identity_tol,
        background_tol=r.background_tol,
        rotation_tol_deg=r.rotation_tol_deg,
        resize_tol=r.resize_tol,
    )


def _dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / name


def _mkdir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {path}: {e}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"missing {path}; run `spatialgrpo {producer}` with the same --out first")
    return path


def write_manifest(cfg: RunConfig, command: str, outdir: Path, extra: Optional[dict] = None) -> None:
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "command": command,
        "code_version": code_version(),
        "seeds": {"data": cfg.seeds.data, "train": cfg.seeds.train, "eval": cfg.seeds.eval},
        "workers": cfg.workers,
        "config": cfg.to_dict(),
    }
    if extra:
        doc.update(extra)
    _write_json(outdir / "manifest.json", doc)


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in header})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


def training_rows(log_rows: Sequence[dict], wall_time: bool) -> list[dict]:
    """Log rows for CSV output; wall time is blanked unless explicitly requested."""
    out = []
    for r in log_rows:
        row = {k: r[k] for k in LOG_COLUMNS}
        if not wall_time:
            row["wall_ms"] = None
        out.append(row)
    return out


def _load_policy(path: Path, cfg: RunConfig) -> FlowPolicy:
    params, _ = nn.load_checkpoint(path)
    return FlowPolicy(params, cfg.flow.n_steps)


def _sampler(cfg: RunConfig, mode: str, exit_step: Optional[int] = None) -> SamplerConfig:
    s = cfg.sampler
    k = exit_step if exit_step is not None else (s.exit_step if s.exit_step != "auto" else 1)
    return SamplerConfig(
        mode=mode,
        n_steps=cfg.flow.n_steps,
        noise_level=cfg.flow.noise_level,
        window=s.window,
        shift_every=s.shift_every,
        exit_step=k,
        sigma_t_max=cfg.flow.sigma_t_max,
    )


def probe_set(cfg: RunConfig):
    return make_examples(range(cfg.calibrate.probes), 1, cfg.task_name, scene_config(cfg), namespace="probe")


def _train_examples(cfg: RunConfig):
    return read_jsonl(_require(_dir(cfg, "data") / "train.jsonl", "gen-data"))


def _test_examples(cfg: RunConfig):
    return read_jsonl(_require(_dir(cfg, "data") / "test.jsonl", "gen-data"))


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> dict:
    out = _mkdir(_dir(cfg, "data"))
    d = cfg.data
    sc = scene_config(cfg)
    base = cfg.seeds.data * 1_000_000
    n_train_scenes = max(1, int(round(d.n_scenes * d.fraction)))
    train = make_examples(range(base, base + n_train_scenes), d.per_scene, cfg.task_name, sc)
    # oracle pairs use scenes after the RL inputs so the two splits never share a scene seed
    pre_base = base + d.n_scenes
    pre = make_examples(range(pre_base, pre_base + d.pretrain_scenes), 1, cfg.task_name, sc, with_targets=True)
    test = build_test_set(cfg.task_name, d.test_size, cfg.seeds.eval, sc)
    counts = {
        "train": write_jsonl(out / "train.jsonl", train),
        "pretrain": write_jsonl(out / "pretrain.jsonl", pre),
        "test": write_jsonl(out / "test.jsonl", test),
    }
    log.info("gen-data: %s", counts)
    write_manifest(cfg, "gen-data", out, {"counts": counts})
    return counts


def cmd_pretrain(cfg: RunConfig) -> dict:
    pairs = read_jsonl(_require(_dir(cfg, "data") / "pretrain.jsonl", "gen-data"))
    if any(ex.target is None for ex in pairs):
        raise PrerequisiteError("pretrain.jsonl has rows without oracle targets; rerun `spatialgrpo gen-data`")
    out = _mkdir(_dir(cfg, "pretrain"))
    p = cfg.pretrain
    C = np.stack([ex.condition() for ex in pairs])
    Y = np.stack([encode_scene(ex.target) for ex in pairs])
    arch = default_architecture(cfg.model.hidden)
    policy = FlowPolicy(nn.init_params(cfg.model.init_seed, arch), cfg.flow.n_steps)
    run_for = p.stop_after or p.iterations
    policy, _, losses = pretrain(
        policy,
        C,
        Y,
        run_for,
        batch_size=p.batch_size,
        lr=p.lr,
        seed=cfg.seeds.train,
        max_grad_norm=p.max_grad_norm,
        total_iterations=p.iterations,
        min_lr=p.min_lr,
    )
    nn.save_checkpoint(out / "checkpoint.json", policy.params, {"iterations": run_for, "schedule": p.iterations})
    _write_csv(out / "loss.csv", ["iteration", "loss"], [{"iteration": i, "loss": float(v)} for i, v in enumerate(losses)])
    summary = {"iterations": run_for, "first_loss": float(losses[0]), "final_loss": float(losses[-1])}
    log.info("pretrain: %s", summary)
    write_manifest(cfg, "pretrain", out, {"summary": summary})
    return summary


def _calibrate(cfg: RunConfig, policy: FlowPolicy) -> StepImportanceProfile:
    a = cfg.calibrate.noise_level if cfg.calibrate.noise_level is not None else cfg.flow.noise_level
    if a <= 0:
        raise ConfigError("calibration without noise: set flow.noise_level (or calibrate.noise_level) > 0")
    prof = off_policy_step_eval(
        policy,
        probe_set(cfg),
        group_size=cfg.calibrate.group_size,
        noise_level=a,
        seed=cfg.seeds.train,
        reward_fn=None,
        sigma_t_max=cfg.flow.sigma_t_max,
        enforce_probe_count=False,
    )
    if prof.selected_k is None:
        select_exit_step(prof)  # raises with the all-zero diagnostic
    return prof


def cmd_calibrate(cfg: RunConfig) -> dict:
    policy = _load_policy(_require(_dir(cfg, "pretrain") / "checkpoint.json", "pretrain"), cfg)
    out = _mkdir(_dir(cfg, "calibrate"))
    prof = _calibrate(cfg, policy).to_dict()
    _write_json(out / "profile.json", prof)
    _write_csv(
        out / "profile.csv",
        ["k", "mean", "variance"],
        [{"k": k, "mean": float(m), "variance": float(v)} for k, (m, v) in enumerate(zip(prof["means"], prof["variances"]))],
    )
    log.info("calibrate: selected K = %d", prof["selected_K"])
    write_manifest(cfg, "calibrate", out)
    return prof


def resolve_exit_step(cfg: RunConfig, policy: FlowPolicy) -> tuple[int, str]:
    """Exit step for Active runs: the configured K, or the calibrated one for 'auto'."""
    if not cfg.auto_exit:
        return int(cfg.sampler.exit_step), "config"
    path = _dir(cfg, "calibrate") / "profile.json"
    if path.exists():
        with open(path) as fh:
            prof = json.load(fh)
        if prof.get("T") == cfg.flow.n_steps and prof.get("task") == cfg.task_name:
            return int(prof["selected_K"]), str(path)
    return select_exit_step(_calibrate(cfg, policy)), "inline-calibration"


def cmd_train(cfg: RunConfig) -> dict:
    policy = _load_policy(_require(_dir(cfg, "pretrain") / "checkpoint.json", "pretrain"), cfg)
    train = _train_examples(cfg)
    test = _test_examples(cfg)
    out = _mkdir(_dir(cfg, "train"))
    mode = "active" if cfg.sampler.mode == "auto" else cfg.sampler.mode
    k, k_source = resolve_exit_step(cfg, policy) if mode == "active" else (None, "unused")
    sampler = _sampler(cfg, mode, k)
    g = cfg.grpo
    ck_dir = _mkdir(out / "checkpoints")

    def on_iteration(state):
        if state.iteration % g.checkpoint_every == 0:
            nn.save_checkpoint(ck_dir / f"iter_{state.iteration:05d}.json", state.params, {"iteration": state.iteration})

    res = run_strategy(
        mode,
        policy,
        sampler,
        train,
        test,
        g.iterations,
        g.batch_conditions,
        seed=cfg.seeds.train,
        eval_every=g.eval_every,
        eval_seed=cfg.seeds.eval,
        lr=g.lr,
        group_size=g.group_size,
        clip_eps=g.clip_eps,
        inner_epochs=g.inner_epochs,
        max_grad_norm=g.max_grad_norm,
        reward_cfg=reward_config(cfg),
        workers=cfg.workers,
        callback=on_iteration,
    )
    nn.save_checkpoint(out / "checkpoint.json", res.params, {"iterations": g.iterations, "sampler": sampler.to_dict()})
    _write_csv(out / "log.csv", LOG_COLUMNS, training_rows(res.log, cfg.log_wall_time))
    _write_csv(out / "eval_curve.csv", ["iteration", "mean_reward", "accuracy"], res.eval_curve)
    _write_json(out / "timing.json", {"sample_s": res.sample_s, "train_s": res.train_s, "total_s": res.total_s})
    summary = {
        "sampler": sampler.to_dict(),
        "exit_step_source": k_source,
        "initial_accuracy": res.initial.accuracy,
        "final_accuracy": res.final.accuracy,
        "initial_mean_reward": res.initial.mean_reward,
        "final_mean_reward": res.final.mean_reward,
        "cumulative_nfe_old": res.cumulative_nfe_old,
        "cumulative_nfe_train": res.cumulative_nfe_train,
        "stream_digest": res.stream_digest,
    }
    log.info("train: accuracy %.3f -> %.3f", res.initial.accuracy, res.final.accuracy)
    write_manifest(cfg, "train", out, {"summary": summary})
    return summary


def cmd_eval(cfg: RunConfig) -> dict:
    producer = "train" if cfg.eval_checkpoint == "train" else "pretrain"
    policy = _load_policy(_require(_dir(cfg, producer) / "checkpoint.json", producer), cfg)
    test = _test_examples(cfg)
    out = _mkdir(_dir(cfg, "eval"))
    rep = evaluate_policy(policy, test, _sampler(cfg, "full"), seed=cfg.seeds.eval, reward_cfg=reward_config(cfg))
    rep.to_json(out / "report.json")
    _write_csv(
        out / "metrics.csv",
        ["task", "n_samples", "trans_dist", "accuracy", "rot_err", "scale_err", "consistency_l1", "mean_reward"],
        [rep.to_dict(with_records=False)],
    )
    with open(out / "records.jsonl", "w") as fh:
        for r in rep.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("eval: accuracy %.3f on %d samples", rep.accuracy, rep.n_samples)
    write_manifest(cfg, "eval", out, {"checkpoint": producer})
    return rep.to_dict(with_records=False)


def cmd_compare(cfg: RunConfig) -> dict:
    policy = _load_policy(_require(_dir(cfg, "pretrain") / "checkpoint.json", "pretrain"), cfg)
    train = _train_examples(cfg)
    test = _test_examples(cfg)
    out = _mkdir(_dir(cfg, "compare"))
    strategies = {}
    for name in cfg.compare_strategies:
        if name == "active":
            k, _ = resolve_exit_step(cfg, policy)
            strategies[name] = _sampler(cfg, "active", k)
        else:
            strategies[name] = _sampler(cfg, name)
    g = cfg.grpo
    cmp = compare_samplers(
        cfg.task_name,
        policy,
        strategies,
        train,
        test,
        g.iterations,
        g.batch_conditions,
        seed=cfg.seeds.train,
        eval_every=g.eval_every,
        eval_seed=cfg.seeds.eval,
        lr=g.lr,
        group_size=g.group_size,
        clip_eps=g.clip_eps,
        inner_epochs=g.inner_epochs,
        max_grad_norm=g.max_grad_norm,
        reward_cfg=reward_config(cfg),
        workers=cfg.workers,
    )
    cmp.write_table(out / "table.csv", timing=cfg.log_wall_time)
    cmp.write_curves(out / "curves.csv")
    for r in cmp.results:
        _write_csv(out / f"log_{r.name}.csv", LOG_COLUMNS, training_rows(r.log, cfg.log_wall_time))
    _write_json(out / "timing.json", {r.name: {"sample_s": r.sample_s, "train_s": r.train_s} for r in cmp.results})
    rows = cmp.table_rows()
    write_manifest(cfg, "compare", out, {"strategies": {k: v.to_dict() for k, v in strategies.items()}})
    return {"rows": rows}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spatialgrpo", description="GRPO fine-tuning of a flow policy on parametric scene edits.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config or a manifest from an earlier run")
        p.add_argument("--seed", type=int, help="sets the data, train and eval seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--task", choices=("translate", "rotate", "resize"))
        p.add_argument("--sampler", choices=("full", "window", "active", "auto"))
        p.add_argument("--workers", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then command-line flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    top = {}
    if args.out is not None:
        top["out"] = args.out
    if args.task is not None:
        top["task"] = args.task
    if args.workers is not None:
        top["workers"] = args.workers
    if args.seed is not None:
        top["seeds"] = replace(cfg.seeds, data=args.seed, train=args.seed, eval=args.seed)
    if args.sampler is not None:
        top["sampler"] = replace(cfg.sampler, mode=args.sampler)
    return config_from_dict(replace(cfg, **top).to_dict())


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        result = HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
