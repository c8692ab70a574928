"""Unit tests for run configuration"""

import pytest

from src.config import OUTPUT_ROOT_ENV, default_config, load_config
from src.exceptions import ConfigError
from src.regimes import AttentionForcing, ScheduledSamplingToken, TeacherForcing


class TestLoadConfig:
    """Defaults, files and overrides"""

    def test_defaults(self):
        """Without a file the defaults resolve"""
        config = load_config()
        assert config.regime_name == "tf"
        assert config.seed == 0
        assert isinstance(config.regime_config(), TeacherForcing)

    def test_file_merges_over_defaults(self, tmp_path):
        """Sections in the file override single keys only"""
        path = tmp_path / "run.yaml"
        path.write_text("training:\n  seed: 4\noptimizer:\n  learning_rate: 0.01\n", encoding="utf-8")
        config = load_config(str(path))
        assert config.seed == 4
        assert config.optimizer_config().learning_rate == 0.01
        assert config.optimizer_config().batch_size == 16

    def test_overrides_win(self, tmp_path):
        """Dotted overrides apply after the file; None leaves a key alone"""
        path = tmp_path / "run.yaml"
        path.write_text("training:\n  seed: 4\n", encoding="utf-8")
        config = load_config(str(path), {"training.seed": 9, "regime.gamma": None})
        assert config.seed == 9
        assert config.data["regime"]["gamma"] is None

    def test_unknown_keys_reported_together(self, tmp_path):
        """Every unknown key is listed"""
        path = tmp_path / "run.yaml"
        path.write_text("training:\n  sed: 1\nextra:\n  a: 1\n", encoding="utf-8")
        with pytest.raises(ConfigError) as info:
            load_config(str(path))
        assert len(info.value.problems) == 2

    def test_invalid_values(self):
        """Out-of-range and unknown choices are refused"""
        with pytest.raises(ConfigError):
            load_config(overrides={"optimizer.learning_rate": -1.0})
        with pytest.raises(ConfigError):
            load_config(overrides={"regime.name": "reinforce"})
        with pytest.raises(ConfigError):
            load_config(overrides={"model.encoder_dim": 7})

    def test_missing_file(self, tmp_path):
        """A missing config file is a configuration error"""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.yaml"))

    def test_top_level_must_be_mapping(self, tmp_path):
        """A YAML list is not a configuration"""
        path = tmp_path / "run.yaml"
        path.write_text("- 1\n- 2\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestRunConfig:
    """Typed views of a configuration"""

    def test_gamma_defaults_by_target_kind(self):
        """Token tasks default to 1, frame tasks to 50"""
        assert load_config().gamma == 1.0
        assert load_config(overrides={"task.kind": "expansion"}).gamma == 50.0
        assert load_config(overrides={"regime.gamma": 3.0}).gamma == 3.0

    def test_task_dims_reserve_eos(self):
        """Vocabularies gain one id for EOS"""
        dims = load_config(overrides={"task.vocab_size": 7}).task_dims()
        assert dims.src_vocab == 8 and dims.tgt_vocab == 8

    def test_regime_objects(self):
        """Regime names map to their config objects"""
        config = load_config(overrides={"regime.name": "ss_token"})
        assert isinstance(config.regime_config(), ScheduledSamplingToken)
        af = load_config(overrides={"regime.name": "af"})
        assert isinstance(af.regime_config(), AttentionForcing)
        assert af.needs_teacher()
        assert not load_config(overrides={"regime.name": "af", "regime.tied": True}).needs_teacher()

    def test_digest_ignores_step_cap_and_output(self):
        """Resuming with a different cap or output dir keeps the digest"""
        base = load_config().digest()
        assert load_config(overrides={"training.max_steps": 3}).digest() == base
        assert load_config(overrides={"output.dir": "elsewhere"}).digest() == base
        assert load_config(overrides={"training.seed": 1}).digest() != base

    def test_out_dir_uses_environment(self, monkeypatch):
        """The output root comes from the environment when no dir is set"""
        monkeypatch.setenv(OUTPUT_ROOT_ENV, "/data/runs")
        assert load_config().out_dir == "/data/runs/copy-tf-seed0"

    def test_dump_is_loadable(self, tmp_path):
        """Dumped defaults load back to the same digest"""
        path = tmp_path / "dump.yaml"
        path.write_text(default_config().dump(), encoding="utf-8")
        assert load_config(str(path)).digest() == default_config().digest()
