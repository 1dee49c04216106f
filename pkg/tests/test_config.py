import pytest

from lfmnet.config import (
    ExperimentConfig,
    SweepSpec,
    load_config,
    parse_config_text,
    parse_method,
)
from lfmnet.errors import ConfigError


def test_defaults_validate():
    cfg = ExperimentConfig()
    cfg.validate()
    assert cfg.lfm.probability == 0.15
    assert cfg.lfm.area_low == 0.03 and cfg.lfm.area_high == 0.4
    assert cfg.lfm.aspect_low == 0.3 and cfg.lfm.aspect_high == pytest.approx(1 / 0.3)
    assert cfg.lfm.num_masked_channels is None  # half the channels
    assert cfg.attack.epsilon == pytest.approx(8 / 255)
    assert cfg.attack.steps == 10


def test_parse_sections_comments_and_overrides():
    text = """
# full-line comment
[data]
seed = 9
n_identities = 12   # inline comment
views_per_id = 4

[lfm]
probability = 0.05
num_masked_channels = half

[train]
lr_decay_epochs =
epochs = 3

[run]
out = /tmp/somewhere
"""
    cfg = parse_config_text(text)
    assert cfg.data.seed == 9
    assert cfg.data.n_identities == 12
    assert cfg.lfm.probability == 0.05
    assert cfg.lfm.num_masked_channels is None
    assert cfg.train.lr_decay_epochs == ()
    assert cfg.train.epochs == 3
    assert cfg.run.out == "/tmp/somewhere"


def test_unknown_section_is_hard_error():
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config_text("[nonsense]\nx = 1\n")


def test_unknown_key_is_hard_error():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("[data]\nseeed = 3\n")


def test_key_outside_section_rejected():
    with pytest.raises(ConfigError, match="outside"):
        parse_config_text("seed = 3\n")


def test_malformed_line_rejected():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config_text("[data]\njust some words\n")


def test_type_errors_are_config_errors():
    with pytest.raises(ConfigError):
        parse_config_text("[data]\nseed = banana\n")
    with pytest.raises(ConfigError):
        parse_config_text("[train]\nflip = perhaps\n")
    with pytest.raises(ConfigError):
        parse_config_text("[lfm]\nprobability = high\n")


def test_with_value_paths():
    cfg = ExperimentConfig()
    assert cfg.with_value("lfm.probability", "0.3").lfm.probability == 0.3
    assert cfg.with_value("model.stage_widths", "8,16,32").model.stage_widths == (8, 16, 32)
    assert cfg.with_value("model.lfm", "true").model.lfm is True
    assert cfg.with_value("lfm.num_masked_channels", "4").lfm.num_masked_channels == 4
    with pytest.raises(ConfigError):
        cfg.with_value("lfm", "3")
    with pytest.raises(ConfigError):
        cfg.with_value("nope.key", "3")
    with pytest.raises(ConfigError):
        cfg.with_value("lfm.nope", "3")


def test_validation_invariants():
    base = ExperimentConfig()
    with pytest.raises(ConfigError):
        base.with_value("data.train_identities", "75").validate()
    with pytest.raises(ConfigError):
        base.with_value("eval.distance", "manhattan").validate()
    with pytest.raises(ConfigError):
        base.with_value("lfm.num_masked_channels", "64").validate()  # stem is 16
    with pytest.raises(ConfigError):
        base.with_value("attack.step_size", "0.9").validate()
    # widening the stem makes a larger channel count legal again
    wide = base.with_value("model.stem_channels", "64")
    wide = wide.with_value("lfm.num_masked_channels", "64")
    wide.validate()


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("[run]\nseed = 5\n[train]\nepochs = 2\n")
    cfg = load_config(path)
    assert cfg.run.seed == 5 and cfg.train.epochs == 2


def test_parse_method_flags():
    assert parse_method("baseline") == {"lfm": False, "cutout": False, "dropout": False}
    assert parse_method("lfm") == {"lfm": True, "cutout": False, "dropout": False}
    assert parse_method("lfm+cutout+dropout") == {"lfm": True, "cutout": True, "dropout": True}
    with pytest.raises(ConfigError):
        parse_method("baseline+lfm")
    with pytest.raises(ConfigError):
        parse_method("reranking")


def test_sweep_spec_validation():
    SweepSpec("lfm.probability", ("0.05", "0.1"), 2).validate()
    with pytest.raises(ConfigError):
        SweepSpec("lfm.probability", (), 2).validate()
    with pytest.raises(ConfigError):
        SweepSpec("lfm.probability", ("0.05",), 0).validate()
    with pytest.raises(ConfigError):
        SweepSpec("does.not_exist", ("1",), 1).validate()
