# -*- coding: utf-8 -*-
"""
运行配置、配置哈希、产物管理与训练日志
"""

import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import pytest

from core.errors import ConfigError
from core.file_handler import ArtifactManager
from core.progress_tracker import TrainingTracker
from core.run_config import EptqConfig, RunConfig, build_run_config, load_config_file
from core.utils import calculate_file_hash, canonical_json, format_duration, hash_config


class TestEptqConfig:

    def test_defaults_are_valid(self):
        cfg = EptqConfig().validate()
        assert cfg.iterations == 2000
        assert cfg.decay_steps == 1000
        assert cfg.warmup_iterations == 400

    def test_explicit_decay(self):
        assert EptqConfig(iterations=100, decay_iterations=30).decay_steps == 30

    def test_schedule(self):
        schedule = EptqConfig(iterations=40, initial_float_fraction=0.8,
                              layer_float_fraction={"act1": 0.5}).schedule()
        assert schedule.total_iterations == 40
        assert schedule.decay_iterations == 20
        assert schedule.initial_for("act1") == 0.5
        assert schedule.initial_for("act2") == 0.8

    def test_mask_seed_defaults_to_seed(self, tmp_path):
        assert EptqConfig(seed=7).mask_stream_seed == 7
        path = tmp_path / "run.toml"
        path.write_text("seed = 7\nmask_seed = 2\n", encoding="utf-8")
        assert build_run_config(load_config_file(path)).eptq.mask_stream_seed == 2

    @pytest.mark.parametrize("overrides", [
        {"iterations": -1},
        {"batch_size": 0},
        {"learning_rate": 0.0},
        {"lambda_reg": -1.0},
        {"beta_end": 0.0},
        {"warmup_fraction": 1.0},
        {"initial_float_fraction": 1.5},
        {"layer_float_fraction": {"act1": -0.1}},
        {"decay_iterations": -5},
        {"probes": 0},
        {"probe_distribution": "cauchy"},
        {"gradual": "cosine"},
        {"sla": "max"},
        {"metric": "kl"},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(ConfigError):
            EptqConfig(**overrides).validate()


class TestRunConfig:

    def test_bits_validation(self):
        RunConfig(bits_weight=32, bits_activation=2).validate(require_files=False)
        with pytest.raises(ConfigError):
            RunConfig(bits_weight=1).validate(require_files=False)
        with pytest.raises(ConfigError):
            RunConfig(bits_activation=20).validate(require_files=False)

    def test_required_files(self):
        with pytest.raises(ConfigError, match="model"):
            RunConfig().validate()
        RunConfig(model=Path("m.eptq.json"), data=Path("d.eptqd")).validate()

    def test_hash_payload_ignores_paths(self):
        a = RunConfig(model=Path("a.eptq.json"), data=Path("a.eptqd"), out_dir=Path("one"))
        b = RunConfig(model=Path("b/c.eptq.json"), data=Path("x.eptqd"), out_dir=Path("two"))
        assert a.hash_payload() == b.hash_payload()
        assert "model" not in a.hash_payload() and "out_dir" not in a.hash_payload()

    def test_hash_depends_on_settings_and_files(self):
        files = {"model": "aa", "data": "bb"}
        base = hash_config(RunConfig().hash_payload(), files)
        assert base == hash_config(RunConfig().hash_payload(), dict(files))
        assert base != hash_config(RunConfig(bits_weight=3).hash_payload(), files)
        assert base != hash_config(RunConfig(eptq=EptqConfig(seed=1)).hash_payload(), files)
        assert base != hash_config(RunConfig().hash_payload(), {"model": "aa", "data": "cc"})


class TestConfigFile:

    def test_load_and_resolve_paths(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('model = "nets/m.eptq.json"\nbits_weight = 3\niterations = 5\n'
                        'bit_overrides = { fc2 = 8 }\n', encoding="utf-8")
        values = load_config_file(path)
        assert values["model"] == tmp_path / "nets" / "m.eptq.json"
        config = build_run_config(values)
        assert config.bits_weight == 3
        assert config.eptq.iterations == 5
        assert config.bit_overrides == {"fc2": 8}

    def test_command_line_overrides_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("bits_weight = 3\nseed = 4\n", encoding="utf-8")
        config = build_run_config(load_config_file(path), {"bits_weight": 2, "seed": None, "data": "d.eptqd"})
        assert config.bits_weight == 2
        assert config.eptq.seed == 4
        assert config.data == Path("d.eptqd")

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("bitz = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="bitz"):
            load_config_file(path)
        with pytest.raises(ConfigError):
            build_run_config({}, {"colour": "red"})

    def test_syntax_error(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text("bits_weight = = 3\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "absent.toml")


class TestUtils:

    def test_file_hash(self, tmp_path):
        path = tmp_path / "blob.bin"
        path.write_bytes(b"eptq" * 50000)
        assert calculate_file_hash(path) == hashlib.sha256(b"eptq" * 50000).hexdigest()

    def test_canonical_json(self):
        text = canonical_json({"b": np.float64(0.5), "a": [Path("x"), np.arange(2)]})
        assert text == '{"a":["x",[0,1]],"b":0.5}'

    def test_canonical_json_rejects_objects(self):
        with pytest.raises(TypeError):
            canonical_json({"a": object()})

    @pytest.mark.parametrize("seconds, expected", [(5, "5秒"), (125, "2分5秒"), (3725, "1时2分")])
    def test_format_duration(self, seconds, expected):
        assert format_duration(seconds) == expected


class TestArtifactManager:

    def test_json_is_sorted_and_stable(self, tmp_path):
        manager = ArtifactManager(tmp_path / "out")
        path = manager.write_json("metrics.json", {"b": 1, "a": [1.5, 2]})
        first = path.read_bytes()
        manager.write_json("metrics.json", {"a": [1.5, 2], "b": 1})
        assert path.read_bytes() == first
        assert list(json.loads(first)) == ["a", "b"]

    def test_jsonl(self, tmp_path):
        manager = ArtifactManager(tmp_path)
        path = manager.write_jsonl("log.jsonl", [{"iter": 0, "x": 0.25}, {"iter": 1, "x": 0.5}])
        lines = path.read_text(encoding="utf-8").splitlines()
        assert [json.loads(line) for line in lines] == [{"iter": 0, "x": 0.25}, {"iter": 1, "x": 0.5}]

    def test_empty_jsonl(self, tmp_path):
        manager = ArtifactManager(tmp_path)
        assert manager.write_jsonl("log.jsonl", []).read_text(encoding="utf-8") == ""

    def test_cleanup_removes_created_directory(self, tmp_path):
        out = tmp_path / "run"
        manager = ArtifactManager(out)
        manager.write_json("a.json", {})
        manager.path("b.bin").write_bytes(b"x")
        assert manager.cleanup_partial() == 2
        assert not out.exists()

    def test_cleanup_keeps_existing_files(self, tmp_path):
        (tmp_path / "keep.txt").write_text("keep", encoding="utf-8")
        manager = ArtifactManager(tmp_path)
        manager.write_json("a.json", {})
        manager.cleanup_partial()
        assert (tmp_path / "keep.txt").exists()
        assert not (tmp_path / "a.json").exists()


class TestTrainingTracker:

    def test_records(self):
        tracker = TrainingTracker(4, log_every=0)
        tracker.start()
        for i in range(2):
            tracker.record(i, 1.0 / (i + 1), 0.1, 0.5, 0.01)
        assert tracker.get_overall_progress() == 0.5
        assert [r["iter"] for r in tracker.records] == [0, 1]
        assert [r["distill_loss"] for r in tracker.records] == [1.0, 0.5]
        assert list(tracker.records[0]) == ["iter", "distill_loss", "reg_loss", "P_mean", "lr"]

    def test_progress_logging(self, caplog):
        tracker = TrainingTracker(3, log_every=2)
        with caplog.at_level(logging.INFO, logger="core.progress_tracker"):
            tracker.start()
            for i in range(3):
                tracker.record(i, 0.5, 0.0, 0.0, 0.01)
        progress = [r.getMessage() for r in caplog.records if r.getMessage().startswith("迭代")]
        assert len(progress) == 2
        assert progress[0].startswith("迭代 2/3 (67%)")
        assert progress[1].startswith("迭代 3/3 (100%)")
