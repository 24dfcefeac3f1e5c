import pytest

from mvrepose.config import RunConfig, env_flag, load_config
from mvrepose.exceptions import ConfigError


class TestLoadConfig:
    def test_file_values_are_coerced(self, tiny_cfg):
        assert tiny_cfg.image_size == 32
        assert tiny_cfg.texture_channels == (8, 8)
        assert tiny_cfg.mvf_depths == (1, 1)
        assert isinstance(tiny_cfg.pose_sigma, float)

    def test_overrides_win_and_none_is_ignored(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nimage_size=64\nseed=3\n")
        cfg = load_config(path, seed=9, train_lr=None)
        assert cfg.image_size == 64
        assert cfg.seed == 9
        assert cfg.train_lr == RunConfig().train_lr

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.cfg")

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("not_a_key=1\n")
        with pytest.raises(ConfigError, match="not_a_key"):
            load_config(path)

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load_config(image_size="large")

    @pytest.mark.parametrize("overrides", [
        {"num_views": 2},
        {"image_size": 36},
        {"max_views": 4},
        {"task": "swap"},
        {"mvf_arch": "resnet"},
        {"pyramid_levels": 3, "texture_channels": "8,8"},
    ])
    def test_invalid_combinations(self, overrides):
        with pytest.raises(ConfigError):
            load_config(**overrides)


class TestModelHash:
    def test_stable_and_ignores_training_keys(self, tiny_cfg):
        assert tiny_cfg.model_hash() == load_config(**tiny_cfg.to_dict()).model_hash()
        assert tiny_cfg.model_hash() == tiny_cfg.with_overrides(train_lr=0.5, seed=7).model_hash()

    def test_changes_with_model_shape(self, tiny_cfg):
        assert tiny_cfg.model_hash() != tiny_cfg.with_overrides(pose_channels=16).model_hash()
        assert tiny_cfg.model_hash() != tiny_cfg.with_overrides(mvf_arch="unet").model_hash()


class TestEnvFlag:
    def test_deterministic_variable(self):
        assert env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC", environ={"UMF_DETERMINISTIC": "1"})
        assert not env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC", environ={"UMF_DETERMINISTIC": "0"})

    def test_alias_is_read_when_primary_is_unset(self):
        assert env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC", environ={"MVR_DETERMINISTIC": "1"})

    def test_primary_wins_over_alias(self):
        environ = {"UMF_DETERMINISTIC": "0", "MVR_DETERMINISTIC": "1"}
        assert not env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC", environ=environ)

    def test_unset_is_false(self):
        assert not env_flag("UMF_DETERMINISTIC", "MVR_DETERMINISTIC", environ={})
