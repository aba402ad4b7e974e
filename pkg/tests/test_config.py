import json

import pytest

from segprior.config import (
    ExperimentConfig,
    MemoryConfig,
    ScheduleConfig,
    config_hash,
    load_config,
    save_config,
)


def make_config():
    return ExperimentConfig(
        registry=["bkg", "a", "b", "c", "d", "e", "f"],
        embeddings_path="embeddings.json",
        train_manifest="train/manifest.json",
        eval_manifest="eval/manifest.json",
        workdir="runs",
        schedule=ScheduleConfig(n_base=4, n_per_step=1, mode="disjoint"),
    )


def test_round_trip(tmp_path):
    cfg = make_config()
    path = str(tmp_path / "config.json")
    save_config(cfg, path)
    loaded = load_config(path)
    assert loaded.to_dict() == cfg.to_dict()
    assert config_hash(loaded) == config_hash(cfg)
    assert loaded.root == str(tmp_path)


def test_hash_sensitivity(tmp_path):
    cfg = make_config()
    h1 = config_hash(cfg)
    cfg.engine.seed += 1
    assert config_hash(cfg) != h1


def test_schedule_and_registry_construction():
    cfg = make_config()
    sched = cfg.task_schedule()
    assert sched.n_steps == 3
    assert sched.mode == "disjoint"
    assert cfg.class_registry().background_name == "bkg"


def test_missing_section(tmp_path):
    cfg = make_config()
    path = str(tmp_path / "config.json")
    save_config(cfg, path)
    with open(path) as fh:
        raw = json.load(fh)
    del raw["loss"]
    with open(path, "w") as fh:
        json.dump(raw, fh)
    with pytest.raises(ValueError, match="loss"):
        load_config(path)


def test_memory_config_validation():
    with pytest.raises(ValueError):
        MemoryConfig(mode="holographic")
    with pytest.raises(ValueError):
        MemoryConfig(ratio=1.5)
    with pytest.raises(ValueError):
        MemoryConfig(capacity=0)


def test_resolve_paths(tmp_path):
    cfg = make_config()
    cfg.root = str(tmp_path)
    assert cfg.resolve("x/y.json") == str(tmp_path / "x" / "y.json")
    assert cfg.resolve("/abs/path.json") == "/abs/path.json"
    assert cfg.resolve(None) is None
