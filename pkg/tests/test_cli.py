import json
import os
import subprocess
import sys

import numpy as np
import pytest

ENV = {**os.environ, "OPENBLAS_NUM_THREADS": "1"}


def run_cli(*args, cwd=None):
    return subprocess.run(
        [sys.executable, "-m", "segprior", *args],
        capture_output=True, text=True, cwd=cwd, env=ENV,
    )


def shrink_config(path, **engine_overrides):
    with open(path) as fh:
        cfg = json.load(fh)
    cfg["engine"].update(engine_overrides)
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=1)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    out = str(root / "data")
    res = run_cli("gen-data", "--out", out, "--n", "48", "--eval-n", "16",
                  "--seed", "3")
    assert res.returncode == 0, res.stderr
    cfg_path = os.path.join(out, "config.json")
    shrink_config(cfg_path, epochs_base=2, epochs_incremental=2, batch_size=12)
    return out, cfg_path


def test_gen_data_outputs(workspace):
    out, cfg_path = workspace
    assert os.path.exists(os.path.join(out, "train", "manifest.json"))
    assert os.path.exists(os.path.join(out, "eval", "manifest.json"))
    assert os.path.exists(os.path.join(out, "embeddings.json"))
    with open(cfg_path) as fh:
        cfg = json.load(fh)
    assert set(cfg) == {"registry", "embeddings_path", "schedule", "loss",
                        "engine", "memory"}
    assert cfg["registry"][0] == "bkg"


def test_full_pipeline_and_exit_codes(workspace):
    out, cfg_path = workspace
    res = run_cli("train-base", "--config", cfg_path, "--seed", "5")
    assert res.returncode == 0, res.stderr
    ckpt0 = os.path.join(out, "runs", "ckpt_step0_seed5.npz")
    assert os.path.exists(ckpt0)

    # validation error: running step 2 before step 1
    res = run_cli("train-incremental", "--config", cfg_path, "--step", "2",
                  "--seed", "5")
    assert res.returncode == 1
    assert "checkpoint" in res.stderr

    res = run_cli("train-incremental", "--config", cfg_path, "--step", "1",
                  "--seed", "5", "--lambda-rasp", "1.0")
    assert res.returncode == 0, res.stderr
    ckpt1 = os.path.join(out, "runs", "ckpt_step1_seed5.npz")
    assert os.path.exists(ckpt1)
    assert os.path.exists(os.path.join(out, "runs", "losses_step1_seed5.json"))

    res = run_cli("eval", "--config", cfg_path, "--checkpoint", ckpt1,
                  "--split", "eval")
    assert res.returncode == 0, res.stderr
    report = os.path.join(out, "runs", "report_ckpt_step1_seed5_eval.json")
    assert os.path.exists(report)
    trace = os.path.join(out, "runs", "metrics_trace_seed5_eval.json")
    assert os.path.exists(trace)

    svg = os.path.join(out, "curves.svg")
    res = run_cli("plot", "--trace", trace, "--out", svg)
    assert res.returncode == 0, res.stderr
    assert open(svg).read().startswith("<svg")


def test_memory_flags(workspace):
    out, cfg_path = workspace
    res = run_cli("train-base", "--config", cfg_path, "--seed", "6")
    assert res.returncode == 0, res.stderr
    res = run_cli("train-incremental", "--config", cfg_path, "--step", "1",
                  "--seed", "6", "--memory", "episodic")
    assert res.returncode == 0, res.stderr
    # external memory without a manifest is a validation error
    res = run_cli("train-incremental", "--config", cfg_path, "--step", "1",
                  "--seed", "6", "--memory", "external")
    assert res.returncode == 1
    assert "manifest" in res.stderr


def test_bad_usage_and_missing_files():
    res = run_cli("train-base", "--config", "/nonexistent/config.json")
    assert res.returncode == 1
    res = run_cli("no-such-command")
    assert res.returncode == 1
    res = run_cli("gen-data", "--out", "/tmp/x", "--n", "-3")
    assert res.returncode == 1
    res = run_cli("plot", "--trace", "/nonexistent.json", "--out", "/tmp/x.svg")
    assert res.returncode == 1
