"""Config parsing tests: file syntax, typed keys, defaults, overrides."""

import pytest

from auxpose.model import ModelConfig
from auxpose.runconfig import (
    SCHEMA,
    describe_defaults,
    load_run_config,
    model_config_from,
    parse_kv_text,
    train_config_from,
)


class TestParseKvText:
    def test_basic_lines(self):
        text = """
        # a comment
        model.embed_width = 32

        train.epochs=5   # trailing comment
        """
        kv = parse_kv_text(text)
        assert kv == {"model.embed_width": "32", "train.epochs": "5"}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_kv_text("a.b = 1\na.b = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="line 2"):
            parse_kv_text("a.b = 1\nnot a pair\n")


class TestResolve:
    def test_defaults_only(self):
        cfg = load_run_config()
        assert cfg["model.embed_width"] == 64
        assert cfg["train.batch_size"] == 10
        assert cfg["data.extent"] == 10.0
        assert cfg["model.backbone_widths"] == (8, 16, 32, 32, 32)

    def test_file_values_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.embed_width = 16\ntrain.epochs = 7\n")
        cfg = load_run_config(path, overrides={"train.epochs": "9"})
        assert cfg["model.embed_width"] == 16
        assert cfg["train.epochs"] == 9

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.hidden_size = 4\n")
        with pytest.raises(ValueError, match="model.hidden_size"):
            load_run_config(path)

    def test_unknown_override_rejected(self):
        with pytest.raises(ValueError, match="typo"):
            load_run_config(overrides={"typo.key": "1"})

    def test_bool_parsing_strict(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.use_attention = false\n")
        assert load_run_config(path)["model.use_attention"] is False
        path.write_text("model.use_attention = yes\n")
        with pytest.raises(ValueError, match="true.*false|false.*true"):
            load_run_config(path)

    def test_int_list_parsing(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("model.backbone_widths = 4, 8,16,16, 16\n")
        cfg = load_run_config(path)
        assert cfg["model.backbone_widths"] == (4, 8, 16, 16, 16)

    def test_bad_number_rejected(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.epochs = many\n")
        with pytest.raises(ValueError, match="train.epochs"):
            load_run_config(path)

    def test_seed_list_parsing(self):
        cfg = load_run_config(overrides={"ablate.seeds": "1,2,3"})
        assert cfg["ablate.seeds"] == (1, 2, 3)


class TestBuilders:
    def test_model_config_roundtrip(self):
        cfg = load_run_config(overrides={
            "model.use_auxiliary": "false",
            "model.use_attention": "false",
            "model.backbone_widths": "2,3,4,4,4",
            "model.embed_width": "8",
        })
        mc = model_config_from(cfg)
        assert isinstance(mc, ModelConfig)
        assert mc.backbone_widths == (2, 3, 4, 4, 4)
        assert mc.use_auxiliary is False
        assert mc.input_height == 32

    def test_train_config_uses_seed_argument(self):
        cfg = load_run_config(overrides={"train.epochs": "3"})
        tc = train_config_from(cfg, seed=11)
        assert tc.epochs == 3
        assert tc.seed == 11
        assert tc.lr_backbone == 0.0003

    def test_defaults_documented(self):
        text = describe_defaults()
        for key in SCHEMA:
            assert key in text
        assert "64" in text
