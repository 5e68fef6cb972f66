import csv
import os
from pathlib import Path

import numpy as np
import pytest
import yaml

from navwm.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main, worker_threads
from navwm.config import (
    ConfigError,
    config_from_dict,
    config_hash,
    load_config,
    substream_seed,
)

# a configuration small enough for CLI round-trip tests
FAST = {
    "world": {"landmarks": 6, "obs_dim": 12, "n_traj": 6, "traj_len": 26},
    "model": {"hidden": 16, "blocks": 1, "memory": 2, "embed": 8},
    "diffusion": {"T": 100, "T_prime": 3},
    "stage1": {"steps": 8, "batch": 4, "lr": 1e-3},
    "acc": {"steps": 2, "batch": 2, "rollout_len": 3, "loss": "l2"},
    "cem": {"horizon": 3, "samples": 8, "iterations": 1, "sims": 1,
            "n_tasks": 2, "goal_min": 0.6, "goal_max": 1.2},
    "eval": {"horizons": [1, 2, 4], "segments_per_traj": 1},
    "master_seed": 7,
}


def write_cfg(tmp_path, extra=None, name="cfg.yaml"):
    data = dict(FAST)
    if extra:
        data = {**data, **extra}
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def run(cmd, cfg_path, out, seed=None):
    args = [cmd, "--config", cfg_path, "--out", str(out)]
    if seed is not None:
        args += ["--seed", str(seed)]
    return main(args)


class TestConfig:
    def test_defaults_roundtrip(self):
        cfg = config_from_dict({})
        assert cfg.world.obs_dim == 32
        assert cfg.stage1.lr == pytest.approx(6e-5)
        assert cfg.acc.lr == pytest.approx(2e-4)
        assert cfg.acc.rollout_len == 8
        assert cfg.cem.samples == 120
        assert cfg.diffusion.T == 1000 and cfg.diffusion.T_prime == 5

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"world": {"gravity": 9.8}})
        with pytest.raises(ConfigError, match="unknown"):
            config_from_dict({"physics": {}})

    def test_bad_kind_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"diffusion": {"kind": "quadratic"}})

    def test_hash_stable_and_sensitive(self):
        a = config_from_dict({"master_seed": 1})
        b = config_from_dict({"master_seed": 1})
        c = config_from_dict({"master_seed": 2})
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_substreams_disjoint_and_stable(self):
        assert substream_seed(3, "policy") == substream_seed(3, "policy")
        assert substream_seed(3, "policy") != substream_seed(3, "stage1")
        assert substream_seed(3, "policy") != substream_seed(4, "policy")

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")


class TestExitCodes:
    def test_validation_error_exit_2(self, tmp_path):
        cfg = write_cfg(tmp_path, {"world": {"landmarks": 6, "obs_dim": 13}})
        assert run("gen-data", cfg, tmp_path / "out") == EXIT_CONFIG

    def test_unknown_key_exit_2(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"nonsense": 1}))
        assert run("gen-data", str(path), tmp_path / "out") == EXIT_CONFIG

    def test_runtime_error_exit_1(self, tmp_path):
        cfg = write_cfg(tmp_path)
        # posttrain-acc without a stage-1 checkpoint
        assert run("posttrain-acc", cfg, tmp_path / "out") == EXIT_RUNTIME

    def test_success_exit_0(self, tmp_path):
        cfg = write_cfg(tmp_path)
        assert run("gen-data", cfg, tmp_path / "out") == EXIT_OK


class TestPipeline:
    def test_gen_data_idempotent(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run("gen-data", cfg, out1) == EXIT_OK
        assert run("gen-data", cfg, out2) == EXIT_OK
        assert (out1 / "dataset.csv").read_bytes() == (out2 / "dataset.csv").read_bytes()
        assert (out1 / "config.yaml").exists()

    def test_seed_changes_dataset(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        run("gen-data", cfg, out1)
        run("gen-data", cfg, out2, seed=99)
        assert (out1 / "dataset.csv").read_bytes() != (out2 / "dataset.csv").read_bytes()

    def test_full_pipeline(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        assert run("gen-data", cfg, out) == EXIT_OK
        assert run("train-stage1", cfg, out) == EXIT_OK
        assert (out / "stage1.ckpt").exists()
        curve = (out / "stage1_curve.csv").read_text().splitlines()
        assert curve[0] == "step,loss,wall_ms"
        assert len(curve) == FAST["stage1"]["steps"] + 1
        assert run("posttrain-acc", cfg, out) == EXIT_OK
        assert (out / "acc.ckpt").exists()
        assert run("rollout-eval", cfg, out) == EXIT_OK
        rows = list(csv.DictReader(open(out / "metrics_rollout.csv")))
        models = {r["model"] for r in rows}
        assert any(m.startswith("stage1-ddim") for m in models)
        assert any(m.startswith("acc-ddim") for m in models)
        assert run("plan-bench", cfg, out) == EXIT_OK
        assert (out / "plan_episodes.csv").exists()
        assert (out / "plan_candidates.csv").exists()
        assert (out / "plans.csv").exists()
        assert run("report", cfg, out) == EXIT_OK
        assert (out / "summary.csv").exists()
        assert (out / "curves.csv").exists()

    def test_train_reproducible_checkpoints(self, tmp_path):
        cfg = write_cfg(tmp_path)
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run("gen-data", cfg, out)
            run("train-stage1", cfg, out)
            outs.append((out / "stage1.ckpt").read_bytes())
        assert outs[0] == outs[1]

    def test_plan_candidates_schema(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        run("gen-data", cfg, out)
        run("train-stage1", cfg, out)
        run("plan-bench", cfg, out)
        rows = list(csv.DictReader(open(out / "plan_candidates.csv")))
        assert {"model", "task_id", "iteration", "candidate", "score", "chosen"} \
            <= set(rows[0])
        chosen = [r for r in rows if r["chosen"] == "1"]
        assert len(chosen) == len({(r["model"], r["task_id"]) for r in rows})
        plan_rows = list(csv.DictReader(open(out / "plans.csv")))
        assert {"model", "task_id", "step", "v", "w"} <= set(plan_rows[0])

    def test_ablate_emits_three_tables(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        run("gen-data", cfg, out)
        assert run("ablate", cfg, out) == EXIT_OK
        loss_rows = list(csv.DictReader(open(out / "ablate_loss.csv")))
        assert [r["variant"] for r in loss_rows] == ["l2", "l1", "perceptual"]
        paradigm_rows = list(csv.DictReader(open(out / "ablate_paradigm.csv")))
        assert [r["variant"] for r in paradigm_rows] == [
            "structure-only", "consistency-only", "structure+consistency"]
        ctx_rows = list(csv.DictReader(open(out / "ablate_context.csv")))
        assert [r["variant"] for r in ctx_rows] == ["x0hat", "icsd"]
        for rows in (loss_rows, paradigm_rows, ctx_rows):
            for r in rows:
                assert float(r["ffd_4"]) >= 0
                assert float(r["perceptual_4"]) >= 0

    def test_report_is_pure_transformation(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        run("gen-data", cfg, out)
        run("train-stage1", cfg, out)
        run("rollout-eval", cfg, out)
        before = (out / "metrics_rollout.csv").read_bytes()
        assert run("report", cfg, out) == EXIT_OK
        assert (out / "metrics_rollout.csv").read_bytes() == before
        merged = list(csv.DictReader(open(out / "summary.csv")))
        assert all(r["source"] == "metrics_rollout.csv" for r in merged)

    def test_resolved_config_written(self, tmp_path):
        cfg = write_cfg(tmp_path)
        out = tmp_path / "run"
        run("gen-data", cfg, out)
        resolved = yaml.safe_load((out / "config.yaml").read_text())
        assert resolved["world"]["landmarks"] == 6
        assert resolved["stage1"]["lr"] == pytest.approx(1e-3)
        # every namespace is present, fully resolved
        for section in ("world", "model", "diffusion", "stage1", "acc",
                        "cem", "eval", "perceptual"):
            assert section in resolved


class TestWorkerThreads:
    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("MWM_THREADS", "3")
        assert worker_threads() == 3

    def test_default_positive(self, monkeypatch):
        monkeypatch.delenv("MWM_THREADS", raising=False)
        assert worker_threads() >= 1

    def test_invalid_rejected(self, monkeypatch):
        monkeypatch.setenv("MWM_THREADS", "zero")
        with pytest.raises(ConfigError):
            worker_threads()
        monkeypatch.setenv("MWM_THREADS", "0")
        with pytest.raises(ConfigError):
            worker_threads()
