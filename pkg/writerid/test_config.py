"""
Test Run Configuration
Validates nested and dotted YAML keys, override precedence and rejection of bad configs.
"""

import pytest
import yaml

from writerid.config import build_run_config, load_run_config
from writerid.core.errors import ConfigError
from writerid.core.splits import Protocol
from writerid.models.backbones import BackboneName
from writerid.services.trainer import FinetuneMode


class TestRunConfig:
    """Test loading and merging of run configs."""

    def test_defaults(self):
        config = build_run_config()
        assert config.protocol.name == Protocol.LINE_LEVEL
        assert config.seeds == [0, 1, 2]
        assert config.train.initial_lr == 1e-3
        assert config.train.early_stopping.patience == 50

    def test_nested_and_dotted_agree(self):
        nested = build_run_config({"model": {"backbone": "tiny-test", "attention": True}, "train": {"finetune": {"mode": "frozen"}}})
        dotted = build_run_config({"model.backbone": "tiny-test", "model.attention": True, "train.finetune.mode": "frozen"})
        assert nested == dotted
        assert dotted.model.backbone == BackboneName.TINY_TEST
        assert dotted.train.finetune.mode == FinetuneMode.FROZEN

    def test_overrides_win(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"train": {"batch_size": 64, "max_epochs": 10}, "seeds": [4]}))
        config = load_run_config(path, {"train.batch_size": 8})
        assert config.train.batch_size == 8
        assert config.train.max_epochs == 10
        assert config.seeds == [4]

    def test_rejected_configs(self, tmp_path):
        with pytest.raises(ConfigError):
            build_run_config({"model.heads": 3})
        with pytest.raises(ConfigError):
            build_run_config({"protocol.min_pages": 2})
        with pytest.raises(ConfigError):
            build_run_config({"model": "tiny-test", "model.backbone": "tiny-test"})
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.yaml")
        bad = tmp_path / "list.yaml"
        bad.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError):
            load_run_config(bad)
