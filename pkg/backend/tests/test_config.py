"""
Tests for the INI config codec, validation and environment overrides
"""

import dataclasses

import pytest

from config import Config, PipelineConfig, VgaConfig
from errors import ConfigurationError


class TestIni:
    def test_defaults_round_trip(self):
        cfg = PipelineConfig()
        assert PipelineConfig.from_ini(cfg.to_ini()) == cfg

    def test_modified_round_trip(self):
        cfg = PipelineConfig.full_scale_profile()
        cfg.seed = 17
        cfg.sffa = dataclasses.replace(cfg.sffa, scale=0.125)
        cfg.vga = dataclasses.replace(cfg.vga, radius=1.25, gate_mode="roi", enabled=False)
        restored = PipelineConfig.from_ini(cfg.to_ini())
        assert restored == cfg
        assert restored.vga.radius == 1.25 and restored.sffa.scale == 0.125

    def test_partial_file_keeps_defaults(self):
        cfg = PipelineConfig.from_ini("[voxel]\nnum_keypoints = 16\n[gcfat]\nwindow = 2, 2\n")
        assert cfg.voxel.num_keypoints == 16
        assert cfg.gcfat.window == (2, 2)
        assert cfg.scene == PipelineConfig().scene

    def test_none_and_bool_values(self):
        cfg = PipelineConfig.from_ini("[vga]\nradius = none\nenabled = no\n")
        assert cfg.vga.radius is None and cfg.vga.enabled is False

    @pytest.mark.parametrize("text", [
        "[voxel]\nvoxel_count = 3\n",
        "[nonsense]\na = 1\n",
        "[pipeline]\nverbose = 1\n",
        "[voxel]\nnum_keypoints = many\n",
        "[gcfat]\ntraining = maybe\n",
        "no section header\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_ini(text)


class TestValidate:
    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_ini("[sffa]\nembed_dim = 16\n")

    def test_section_rules(self):
        with pytest.raises(ConfigurationError) as err:
            VgaConfig(gate_mode="box").validate()
        assert err.value.module == "vga"
        with pytest.raises(ConfigurationError):
            PipelineConfig.from_ini("[gcfat]\nembed_dim = 30\nnum_heads = 4\n")

    def test_profiles_validate(self):
        assert PipelineConfig().validate().gcfat.embed_dim == 32
        assert PipelineConfig.full_scale_profile().validate().gcfat.window == (7, 7)


class TestLoad:
    def test_defaults_without_path(self):
        assert PipelineConfig.load(None) == PipelineConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(str(tmp_path / "absent.ini"))

    def test_reads_file(self, tmp_path):
        path = tmp_path / "desk.ini"
        path.write_text("[pipeline]\nseed = 9\n[detect]\nproposal_top_n = 4\n", encoding="utf-8")
        cfg = PipelineConfig.load(str(path))
        assert cfg.seed == 9 and cfg.detect.proposal_top_n == 4

    def test_environment_overrides(self, tmp_path, monkeypatch):
        path = tmp_path / "desk.ini"
        path.write_text("[pipeline]\nseed = 9\n", encoding="utf-8")
        monkeypatch.setattr(Config, "CONFIG_PATH", str(path))
        monkeypatch.setattr(Config, "SEED", "42")
        monkeypatch.setattr(Config, "OUT_DIR", str(tmp_path / "runs"))
        cfg = PipelineConfig.load(None)
        assert cfg.seed == 42
        assert cfg.out_dir == str(tmp_path / "runs")

    def test_bad_environment_seed(self, monkeypatch):
        monkeypatch.setattr(Config, "SEED", "abc")
        with pytest.raises(ConfigurationError):
            PipelineConfig.load(None)


class TestClassTable:
    def test_names_and_ids(self):
        assert [Config.class_name(i) for i in range(Config.NUM_CLASSES)] == ["vehicle", "pedestrian", "cyclist"]
        assert Config.class_id("cyclist") == 2

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            Config.class_name(7)
        with pytest.raises(ConfigurationError):
            Config.class_id("truck")
