"""End-to-end command-line pipeline at micro scale.

Each pipeline arm freezes one config file and runs every stage under it:
the run directory is keyed by the config hash, so stages of an arm only
see each other's artifacts when their effective configs agree.
"""

import json
import os
import subprocess
import sys

import pytest

from reasonembed.cli import main

MICRO = {
    "suite": {
        "k": 2,
        "pool_size": 4,
        "tasks": {"vqa": {"train": 8, "test": 3},
                  "grounding": {"train": 8, "test": 3}},
    },
    "model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32,
              "max_seq_len": 96, "seed": 0},
    "train": {"global_batch": 4, "n_sub": 2, "steps": 2, "epochs": 1,
              "max_new_tokens": 48},
}


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")


def write_config(tmp_path, name="config.json", **extra):
    path = tmp_path / name
    path.write_text(json.dumps({**MICRO, **extra}))
    return str(path)


def run(args, config, out):
    return main([args[0], "--config", config, "--out", str(out)] + args[1:])


def run_dir(out):
    subdirs = [p for p in os.listdir(out) if os.path.isdir(os.path.join(out, p))]
    assert len(subdirs) == 1
    return os.path.join(str(out), subdirs[0])


def test_full_pipeline(tmp_path, capsys):
    config = write_config(tmp_path, ecr_source="teacher_exact")
    out = tmp_path / "runs"

    assert run(["gen-data"], config, out) == 0
    d = run_dir(out)
    assert os.path.exists(os.path.join(d, "suite.json"))

    assert run(["gen-ecr"], config, out) == 0
    assert os.path.exists(os.path.join(d, "ecr.jsonl"))

    assert run(["train-reasoner"], config, out) == 0
    assert os.path.exists(os.path.join(d, "reasoner.ckpt"))

    assert run(["train-embedder"], config, out) == 0
    assert os.path.exists(os.path.join(d, "embedder.ckpt"))

    assert run(["eval"], config, out) == 0
    records = json.load(open(os.path.join(d, "records.json")))
    kinds = {r["task_kind"] for r in records["records"]}
    assert kinds == {"vqa", "grounding"}
    assert os.path.exists(os.path.join(d, "embeddings.jsonl"))

    assert run(["project"], config, out) == 0
    assert os.path.exists(os.path.join(d, "projection.svg"))
    coords = json.load(open(os.path.join(d, "projection.json")))
    labels = {p["label"] for p in coords["points"]}
    assert labels == {"query", "target"}

    assert run(["report"], config, out) == 0
    report = json.load(open(os.path.join(d, "report.json")))
    assert report["provenance"]["ecr_source"] == "teacher_exact"
    assert "overall" in report["aggregates"]
    summary = capsys.readouterr().out.strip().splitlines()[-1]
    assert json.loads(summary)["command"] == "report"


def test_gen_data_deterministic(tmp_path):
    config = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert run(["gen-data"], config, out_a) == 0
    assert run(["gen-data"], config, out_b) == 0
    # same config hash regardless of --out, identical bytes
    assert os.listdir(out_a) == os.listdir(out_b)
    suite_a = open(os.path.join(run_dir(out_a), "suite.json"), "rb").read()
    suite_b = open(os.path.join(run_dir(out_b), "suite.json"), "rb").read()
    assert suite_a == suite_b


def test_flag_and_file_hash_parity(tmp_path, capsys):
    """An arm flag and its config-file spelling land in the same run dir."""
    out = tmp_path / "runs"
    plain = write_config(tmp_path, "plain.json")
    spelled = write_config(tmp_path, "spelled.json", ecr_source="teacher_noisy")
    assert run(["gen-data", "--ecr-mode", "teacher_noisy"], plain, out) == 0
    first = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert run(["gen-ecr"], spelled, out) == 0
    second = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert first["config_hash"] == second["config_hash"]
    # integer lam in a file matches the float default
    as_int = write_config(tmp_path, "int_lam.json", lam=10)
    assert run(["gen-data"], as_int, out) == 0
    third = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert run(["gen-data"], plain, out) == 0
    fourth = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert third["config_hash"] == fourth["config_hash"]


def test_exit_codes(tmp_path, capsys):
    out = tmp_path / "runs"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"tau": 0}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(out)]) == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigInvalid" and "tau" in err["message"]

    config = write_config(tmp_path)
    # eval before anything exists: suite is the first missing artifact
    assert run(["eval"], config, out) == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "UpstreamArtifactMissing"

    # with a suite but no checkpoint, still exit 3
    assert run(["gen-data"], config, out) == 0
    capsys.readouterr()
    assert run(["eval"], config, out) == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert "checkpoint" in err["message"]

    # unknown override key
    assert run(["gen-data", "--override", "nope=1"], config, out) == 2


def test_student_arm_requires_reasoner(tmp_path, capsys):
    config = write_config(tmp_path, ecr_source="student")
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    capsys.readouterr()
    assert run(["train-embedder"], config, out) == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert "reasoner" in err["message"]
    assert run(["gen-ecr"], config, out) == 3
    assert run(["train-reasoner"], config, out) == 0
    assert run(["gen-ecr"], config, out) == 0
    d = run_dir(out)
    lines = open(os.path.join(d, "ecr.jsonl")).read().strip()
    assert lines == "" or all(
        json.loads(l)["mode"] == "student" for l in lines.splitlines())


def test_lock_file_blocks_concurrent_writers(tmp_path, capsys):
    config = write_config(tmp_path)
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    d = run_dir(out)
    lock = os.path.join(d, ".lock")
    open(lock, "w").write("999999")
    assert run(["gen-data"], config, out) == 1
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "OutputDirLocked"
    os.unlink(lock)
    assert run(["gen-data"], config, out) == 0
    assert not os.path.exists(lock)


def test_joint_arm(tmp_path):
    config = write_config(tmp_path, lam=10.0, eval_checkpoint="joint")
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    assert run(["train-joint"], config, out) == 0
    d = run_dir(out)
    from reasonembed.checkpoint import load_checkpoint
    _, head, extra = load_checkpoint(os.path.join(d, "joint.ckpt"))
    assert head is not None and head.kind == "joint_mlp"
    assert extra["lam"] == 10.0 and len(extra["log"]) == 2
    assert run(["eval"], config, out) == 0
    assert os.path.exists(os.path.join(d, "records.json"))


def test_unified_arm(tmp_path):
    config = write_config(tmp_path, head={"kind": "attention_pool"},
                          eval_checkpoint="unified")
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    assert run(["train-unified"], config, out) == 0
    d = run_dir(out)
    assert os.path.exists(os.path.join(d, "unified.ckpt"))
    assert run(["eval"], config, out) == 0

    plain = write_config(tmp_path, "noheads.json")
    assert run(["gen-data"], plain, out) == 0
    assert run(["train-unified"], plain, out) == 2  # no head configured


def test_compare_heads(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    assert run(["compare-heads"], config, out) == 0
    d = run_dir(out)
    doc = json.load(open(os.path.join(d, "heads_comparison.json")))
    kinds = [r["head"] for r in doc["results"]]
    assert kinds == ["attention_pool", "nv_embed_pool", "qformer",
                     "self_init_mhsa"]
    table = open(os.path.join(d, "heads_comparison.txt")).read()
    for kind in kinds:
        assert kind in table


def test_gen_ecr_requires_mode(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    assert run(["gen-ecr"], config, out) == 2  # ecr_source defaults to none


def test_console_script_help():
    proc = subprocess.run(
        [sys.executable, "-m", "reasonembed.cli", "--help"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    for name in ("gen-data", "train-embedder", "compare-heads", "project"):
        assert name in proc.stdout


def test_seed_flag_changes_hash(tmp_path):
    config = write_config(tmp_path)
    out = tmp_path / "runs"
    assert run(["gen-data"], config, out) == 0
    assert run(["gen-data", "--seed", "5"], config, out) == 0
    assert len(os.listdir(out)) == 2
