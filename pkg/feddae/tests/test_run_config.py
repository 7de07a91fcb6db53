"""Tests for RunConfig resolution: defaults < config file < overrides."""

import json
from pathlib import Path

import pytest
from errors import ConfigurationError
from run_config import RESOLVED_CONFIG_NAME, RunConfig, load_config_file, resolve_run_config


def write_yaml(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


class TestResolution:
    def test_defaults(self):
        config = resolve_run_config()
        assert config == RunConfig()
        assert (config.latent_dim, config.hidden_dim, config.n_layers) == (256, 200, 3)
        assert config.fixed_weight is None
        assert config.mode == "federated"

    def test_file_over_defaults_and_overrides_over_file(self, tmp_path):
        path = write_yaml(tmp_path / "run.yaml", "rounds: 7\nlr: 0.01\nseed: 4\n")
        config = resolve_run_config(path, {"seed": 9})
        assert config.rounds == 7
        assert config.lr == 0.01
        assert config.seed == 9
        assert config.local_epochs == RunConfig().local_epochs

    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"mode": "central", "batch_size": 16}), encoding="utf-8")
        config = resolve_run_config(path)
        assert (config.mode, config.batch_size) == ("central", 16)

    def test_hyphenated_keys(self, tmp_path):
        path = write_yaml(tmp_path / "run.yaml", "local-epochs: 3\nfixed-weight: 0.25\n")
        config = resolve_run_config(path)
        assert config.local_epochs == 3
        assert config.fixed_weight == 0.25

    def test_empty_file(self, tmp_path):
        assert resolve_run_config(write_yaml(tmp_path / "empty.yaml", "")) == RunConfig()

    def test_string_values_coerced(self):
        config = resolve_run_config(overrides={"rounds": "5", "exclusive_rounds": "yes", "noise_variance": "0.2"})
        assert config.rounds == 5
        assert config.exclusive_rounds is True
        assert config.noise_variance == 0.2

    def test_explicit_null_clears_optional(self, tmp_path):
        path = write_yaml(tmp_path / "run.yaml", "clients_per_round: 8\n")
        assert resolve_run_config(path, {"clients_per_round": None}).clients_per_round is None


class TestRejections:
    def test_unknown_key(self, tmp_path):
        path = write_yaml(tmp_path / "run.yaml", "learning_rate: 0.1\n")
        with pytest.raises(ConfigurationError) as excinfo:
            resolve_run_config(path)
        assert excinfo.value.key == "learning_rate"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="not found"):
            resolve_run_config(tmp_path / "absent.yaml")

    def test_non_mapping_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="mapping"):
            load_config_file(write_yaml(tmp_path / "list.yaml", "- 1\n- 2\n"))

    def test_malformed_yaml(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot parse"):
            load_config_file(write_yaml(tmp_path / "bad.yaml", "rounds: [1, 2\n"))

    @pytest.mark.parametrize(
        ("key", "value"),
        [
            ("rounds", -1),
            ("local_epochs", 0),
            ("lr", -0.1),
            ("dropout_rate", 1.0),
            ("beta_cap", 1.5),
            ("fixed_weight", 1.5),
            ("noise_variance", -1.0),
            ("top_k", 0),
            ("clients_per_round", 0),
        ],
    )
    def test_out_of_range(self, key, value):
        with pytest.raises(ConfigurationError) as excinfo:
            resolve_run_config(overrides={key: value})
        assert excinfo.value.key == key

    def test_literal_choice(self):
        with pytest.raises(ConfigurationError, match="update_rule"):
            resolve_run_config(overrides={"update_rule": "rmsprop"})

    def test_fractional_integer(self):
        with pytest.raises(ConfigurationError, match="integer"):
            resolve_run_config(overrides={"rounds": 2.5})

    def test_masked_loss_needs_negatives(self):
        with pytest.raises(ConfigurationError) as excinfo:
            resolve_run_config(overrides={"loss_mode": "masked", "negatives_per_positive": 0})
        assert excinfo.value.key == "negatives_per_positive"


class TestParticipation:
    def test_default_is_everyone(self):
        assert RunConfig().participants_per_round(943) == 943

    def test_more_than_available(self):
        with pytest.raises(ConfigurationError) as excinfo:
            RunConfig(clients_per_round=20).participants_per_round(10)
        assert excinfo.value.key == "clients_per_round"

    def test_exclusive_needs_half(self):
        assert RunConfig(clients_per_round=5, exclusive_rounds=True).participants_per_round(10) == 5
        with pytest.raises(ConfigurationError) as excinfo:
            RunConfig(clients_per_round=6, exclusive_rounds=True).participants_per_round(10)
        assert excinfo.value.key == "exclusive_rounds"


class TestOutputs:
    def test_write_resolved_echo_reloads(self, tmp_path):
        config = resolve_run_config(overrides={"rounds": 3, "fixed_weight": 0.5, "seed": 2})
        path = config.write_resolved(tmp_path / "out")
        assert path.name == RESOLVED_CONFIG_NAME
        assert resolve_run_config(path) == config

    def test_default_output_dir_under_runs(self, patch_workspace):
        config = RunConfig(mode="central", seed=5)
        assert config.resolved_output_dir() == patch_workspace["root"] / "runs" / "central-seed5"

    def test_explicit_output_dir(self, tmp_path):
        assert RunConfig(output_dir=str(tmp_path)).resolved_output_dir() == tmp_path
