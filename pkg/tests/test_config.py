"""Config parsing, validation, defaults, and hashing."""

import pytest

from cance.config import RunConfig, load_config, save_config
from cance.errors import ConfigError


class TestDefaults:
    def test_paper_settings_are_defaults(self):
        config = RunConfig()
        assert config.nce.nu == 8.0
        assert config.eval.val_fraction == 0.2
        assert config.eval.repeats == 5
        assert config.compress.latent_dim == 6
        assert config.nce.widths == (64, 64)
        assert config.compress.hidden == (128, 64)
        assert config.compress.lr == 1e-4
        assert config.nce.lr == 1e-4

    def test_default_config_validates(self):
        RunConfig().validate()


class TestParsing:
    def test_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text(
            "[dataset]\nkind = synth\nname = demo\n"
            "[nce]\nepochs = 7\naugmentation = false\n"
        )
        config = load_config(path, ["nce.nu=4", "compress.latent_dim=3"])
        assert config.dataset.name == "demo"
        assert config.nce.epochs == 7
        assert config.nce.augmentation is False
        assert config.nce.nu == 4.0
        assert config.compress.latent_dim == 3

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[nce]\nbogus = 1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[mystery]\nx = 1\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            load_config(path)

    def test_negative_lambda_rejected_before_compute(self):
        with pytest.raises(ConfigError, match="lam"):
            load_config(None, ["compress.lam=-1"])

    def test_bad_boolean_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["nce.augmentation=maybe"])

    def test_bad_override_format_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ["nce.epochs"])
        with pytest.raises(ConfigError):
            load_config(None, ["epochs=3"])

    def test_tuple_values(self):
        config = load_config(None, ["nce.widths=32, 16", "compress.hidden=8"])
        assert config.nce.widths == (32, 16)
        assert config.compress.hidden == (8,)

    def test_invalid_benchmark_combinations(self):
        with pytest.raises(ConfigError, match="unimodal"):
            load_config(None, ["dataset.benchmark=unimodal"])
        with pytest.raises(ConfigError, match="kind"):
            load_config(None, ["dataset.kind=parquet"])


class TestHashing:
    def test_hash_stable_across_instances(self):
        assert RunConfig().hash() == RunConfig().hash()

    def test_hash_changes_with_values(self):
        a = load_config(None, ["nce.epochs=10"])
        b = load_config(None, ["nce.epochs=11"])
        assert a.hash() != b.hash()

    def test_canonical_round_trip(self, tmp_path):
        config = load_config(None, ["nce.epochs=9", "dataset.name=x"])
        path = tmp_path / "canon.ini"
        save_config(config, path)
        again = load_config(path)
        assert again.hash() == config.hash()
        assert again.canonical() == config.canonical()
