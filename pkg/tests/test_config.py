import os
from pathlib import Path

import pytest
import yaml

from src.config import AppConfig, env_overrides, load_config, run_lock, write_snapshot
from src.errors import InvalidConfig, IoFailure


def test_defaults():
    cfg = load_config(environ={})
    assert cfg == AppConfig()
    assert cfg.iccl.margin_alpha == 1.0
    assert cfg.norm.center_mode == "median"


def test_precedence(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  learning_rate: 1e-3\n  batch_size: 16\n  max_steps: 10\nmodel:\n  n_patch: 5\n")
    environ = {"PSGMAE_TRAIN_BATCH_SIZE": "24", "PSGMAE_TRAIN_MAX_STEPS": "30"}
    cfg = load_config(path, {"train": {"max_steps": 40, "seed": None}}, environ=environ)
    assert cfg.train.learning_rate == pytest.approx(1e-3)
    assert isinstance(cfg.train.learning_rate, float)
    assert cfg.train.batch_size == 24
    assert cfg.train.max_steps == 40
    assert cfg.train.seed == 0
    assert cfg.model.n_patch == 5


def test_env_overrides_parse_lists():
    out = env_overrides({"PSGMAE_MODEL_HEAD_BRANCH_KERNELS": "[3, 5]", "HOME": "/root"})
    assert out == {"model": {"head_branch_kernels": [3, 5]}}
    assert load_config(environ={"PSGMAE_MODEL_HEAD_BRANCH_KERNELS": "[3, 5]"}).model.head_branch_kernels == (3, 5)


@pytest.mark.parametrize("environ", [
    {"PSGMAE_TRAIN_NOPE": "1"},
    {"PSGMAE_NOPE_SEED": "1"},
])
def test_unknown_environment_override(environ):
    with pytest.raises(InvalidConfig):
        load_config(environ=environ)


@pytest.mark.parametrize("text", [
    "train:\n  no_such_field: 1\n",
    "extras:\n  a: 1\n",
    "train:\n  learning_rate: fast\n",
    "iccl:\n  margin_alpha: -1\n",
    "- a\n- b\n",
])
def test_invalid_yaml_content(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(InvalidConfig):
        load_config(path, environ={})


def test_missing_config_file(tmp_path):
    with pytest.raises(IoFailure):
        load_config(tmp_path / "absent.yaml", environ={})


def test_snapshot_reproduces_config(tmp_path):
    cfg = load_config(overrides={"train": {"max_steps": 7}, "iccl": {"symmetric": True}}, environ={})
    path = write_snapshot(cfg, tmp_path)
    assert yaml.safe_load(path.read_text())["train"]["max_steps"] == 7
    assert load_config(path, environ={}) == cfg


def test_run_lock_rejects_concurrent_use(tmp_path):
    with run_lock(tmp_path / "run") as run_dir:
        lock = run_dir / ".lock"
        assert lock.exists()
        with pytest.raises(InvalidConfig):
            with run_lock(tmp_path / "run"):
                pass
    assert not lock.exists()
    with run_lock(tmp_path / "run"):
        pass


def test_run_lock_takes_over_a_lock_left_by_a_dead_process(tmp_path, caplog):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text("999999999")
    with caplog.at_level("WARNING", logger="src.config"):
        with run_lock(run) as run_dir:
            assert (run_dir / ".lock").read_text() == str(os.getpid())
    assert "stale lock" in caplog.text
    assert not (run / ".lock").exists()

    (run / ".lock").write_text("not a pid")
    with run_lock(run):
        pass


def test_run_lock_respects_a_live_holder(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text(str(os.getpid()))
    with pytest.raises(InvalidConfig):
        with run_lock(run):
            pass
    assert (run / ".lock").read_text() == str(os.getpid())


def test_shipped_defaults_file_matches_built_in_defaults():
    path = Path(__file__).resolve().parent.parent / "configs" / "default.yaml"
    assert load_config(path, environ={}) == AppConfig()
