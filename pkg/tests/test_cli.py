import csv
import json
import shutil
from pathlib import Path

import pytest

from spatialgrpo import cli
from spatialgrpo.config import ConfigError, RunConfig, config_from_dict, load_config

TINY = {
    "task": "translate",
    "data": {"n_scenes": 6, "per_scene": 2, "pretrain_scenes": 8, "test_size": 4},
    "model": {"hidden": [8]},
    "pretrain": {"iterations": 20, "stop_after": 10, "batch_size": 8},
    "sampler": {"mode": "auto"},
    "calibrate": {"probes": 2, "group_size": 3},
    "grpo": {"group_size": 2, "iterations": 3, "batch_conditions": 2, "checkpoint_every": 2, "eval_every": 2},
    "compare_strategies": ["full", "active"],
}

PIPELINE = ("gen-data", "pretrain", "calibrate", "train", "eval", "compare")


def write_config(path: Path, out: Path, **overrides) -> Path:
    doc = json.loads(json.dumps(TINY))
    doc["out"] = str(out)
    for k, v in overrides.items():
        if isinstance(v, dict):
            doc.setdefault(k, {}).update(v)
        else:
            doc[k] = v
    path.write_text(json.dumps(doc))
    return path


def run(*argv) -> int:
    return cli.main(list(argv))


def artifacts(root: Path) -> dict:
    """Bytes of every JSONL/CSV file under ``root``."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.suffix in (".jsonl", ".csv")}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    out = base / "run"
    cfg = write_config(base / "cfg.json", out)
    codes = {cmd: run(cmd, "--config", str(cfg)) for cmd in PIPELINE}
    return out, cfg, codes


# ------------------------------------------------------------ config


def test_default_config_is_valid_and_round_trips():
    cfg = RunConfig().validate()
    assert config_from_dict(cfg.to_dict()) == cfg
    assert (cfg.flow.n_steps, cfg.flow.noise_level, cfg.grpo.clip_eps, cfg.grpo.group_size) == (10, 1.0, 2e-4, 16)


def test_unknown_fields_are_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"grpo": {"group_sise": 4}})
    with pytest.raises(ConfigError, match="unknown"):
        config_from_dict({"colour": "red"})


@pytest.mark.parametrize(
    "doc",
    [
        {"task": "fly"},
        {"flow": {"n_steps": 1}},
        {"sampler": {"exit_step": 11}},
        {"grpo": {"clip_eps": 0}},
        {"data": {"fraction": 0}},
        {"pretrain": {"iterations": 10, "stop_after": 20}},
    ],
)
def test_invalid_values_are_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", tmp_path / "from_config", seeds={"data": 1, "train": 2, "eval": 3})
    args = cli.build_parser().parse_args(
        ["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "flag"), "--task", "rotate", "--sampler", "full", "--workers", "2"]
    )
    rc = cli.resolve_config(args)
    assert rc.out == str(tmp_path / "flag")
    assert (rc.seeds.data, rc.seeds.train, rc.seeds.eval) == (7, 7, 7)
    assert (rc.task_name, rc.sampler.mode, rc.workers) == ("Rotate", "full", 2)
    # values not given as flags come from the file, the rest from defaults
    assert rc.data.n_scenes == 6 and rc.grpo.clip_eps == 2e-4
    plain = cli.resolve_config(cli.build_parser().parse_args(["train", "--config", str(cfg)]))
    assert (plain.seeds.data, plain.seeds.train, plain.seeds.eval) == (1, 2, 3)


# ------------------------------------------------------------ exit codes


def test_unknown_field_exits_2(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"grpo": {"bogus": 1}}))
    assert run("gen-data", "--config", str(p)) == cli.EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err


def test_missing_prerequisite_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "empty")
    assert run("train", "--config", str(cfg)) == cli.EXIT_PREREQ
    assert "spatialgrpo pretrain" in capsys.readouterr().err
    assert run("pretrain", "--config", str(cfg)) == cli.EXIT_PREREQ
    assert "spatialgrpo gen-data" in capsys.readouterr().err


def test_calibration_without_noise_exits_2(pipeline, tmp_path, capsys):
    out, _, _ = pipeline
    work = tmp_path / "w"
    shutil.copytree(out, work)
    cfg = write_config(tmp_path / "c.json", work, flow={"noise_level": 0.0})
    assert run("calibrate", "--config", str(cfg)) == cli.EXIT_CONFIG
    assert "without noise" in capsys.readouterr().err


def test_non_finite_training_exits_4(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "nan", pretrain={"lr": 1e300, "iterations": 5, "stop_after": None})
    assert run("gen-data", "--config", str(cfg)) == 0
    with pytest.warns(RuntimeWarning):
        assert run("pretrain", "--config", str(cfg)) == cli.EXIT_NUMERIC
    assert "numerical failure" in capsys.readouterr().err


# ------------------------------------------------------------ pipeline


def test_pipeline_exit_codes(pipeline):
    _, _, codes = pipeline
    assert codes == {cmd: 0 for cmd in PIPELINE}


def test_pipeline_artifacts(pipeline):
    out, _, _ = pipeline
    for sub, names in {
        "data": ["train.jsonl", "pretrain.jsonl", "test.jsonl"],
        "pretrain": ["checkpoint.json", "loss.csv"],
        "calibrate": ["profile.json", "profile.csv"],
        "train": ["checkpoint.json", "log.csv", "eval_curve.csv", "timing.json", "checkpoints/iter_00002.json"],
        "eval": ["report.json", "metrics.csv", "records.jsonl"],
        "compare": ["table.csv", "curves.csv", "log_full.csv", "log_active.csv"],
    }.items():
        for n in names + ["manifest.json"]:
            assert (out / sub / n).exists(), f"{sub}/{n}"
    assert len((out / "data" / "train.jsonl").read_text().splitlines()) == 12
    assert len((out / "pretrain" / "loss.csv").read_text().splitlines()) == 1 + 10


def test_training_log_format(pipeline):
    out, _, _ = pipeline
    with open(out / "train" / "log.csv") as fh:
        header = fh.readline().strip()
        rows = list(csv.reader(fh))
    assert header == "iteration,mean_reward,reward_std,accuracy,trans_dist_or_err,nfe_old,nfe_train,wall_ms"
    assert [r[0] for r in rows] == ["0", "1", "2"]
    assert all(r[-1] == "" for r in rows)  # wall time is opt-in


def test_calibration_profile_document(pipeline):
    out, _, _ = pipeline
    prof = json.loads((out / "calibrate" / "profile.json").read_text())
    assert set(prof) == {"task", "T", "a", "G", "n_probes", "variances", "means", "selected_K"}
    assert prof["variances"][0] == 0.0 and len(prof["variances"]) == prof["T"] + 1
    assert 1 <= prof["selected_K"] <= prof["T"]
    manifest = json.loads((out / "train" / "manifest.json").read_text())
    assert manifest["summary"]["sampler"]["exit_step"] == prof["selected_K"]
    assert manifest["summary"]["exit_step_source"].endswith("profile.json")


def test_manifest_contents(pipeline):
    out, _, _ = pipeline
    m = json.loads((out / "train" / "manifest.json").read_text())
    assert m["manifest_version"] == 1 and m["command"] == "train"
    assert m["seeds"] == {"data": 0, "train": 0, "eval": 0} and m["workers"] == 1
    assert m["code_version"] == cli.code_version()
    assert config_from_dict(m) == config_from_dict(m["config"])


def test_rerun_from_manifests_is_byte_identical(pipeline, tmp_path):
    out, _, _ = pipeline
    work = tmp_path / "rerun"
    shutil.copytree(out, work)
    before = artifacts(work)
    for cmd in PIPELINE:
        manifest = json.loads((work / cmd.replace("gen-data", "data") / "manifest.json").read_text())
        manifest["config"]["out"] = str(work)
        path = tmp_path / f"{cmd}.manifest.json"
        path.write_text(json.dumps(manifest))
        assert run(cmd, "--config", str(path)) == 0
    after = artifacts(work)
    assert set(before) == set(after) and len(before) >= 12
    assert [k for k in before if before[k] != after[k]] == []


def test_default_corpus_sizes(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "full"), "data": {"pretrain_scenes": 2, "test_size": 2}}))
    assert run("gen-data", "--config", str(cfg)) == 0
    assert len((tmp_path / "full" / "data" / "train.jsonl").read_text().splitlines()) == 3200
    cfg.write_text(json.dumps({"out": str(tmp_path / "tenth"), "data": {"fraction": 0.1, "pretrain_scenes": 2, "test_size": 2}}))
    assert run("gen-data", "--config", str(cfg)) == 0
    assert len((tmp_path / "tenth" / "data" / "train.jsonl").read_text().splitlines()) == 320


def test_eval_of_pretrain_checkpoint(pipeline, tmp_path):
    out, _, _ = pipeline
    work = tmp_path / "w"
    shutil.copytree(out, work)
    cfg = write_config(tmp_path / "c.json", work, eval_checkpoint="pretrain")
    assert run("eval", "--config", str(cfg)) == 0
    report = json.loads((work / "eval" / "report.json").read_text())
    assert report["n_samples"] == 4 and len(report["records"]) == 4
