import pytest

from lpanet.config import (FAST_COUNT, FAST_EPOCHS, RunConfig, format_config, keys, load_config,
                           parse_config, resolve)
from lpanet.errors import ConfigError


def test_defaults_carry_optimiser_settings():
    cfg = RunConfig()
    assert (cfg.lr_stage1, cfg.lr_stage2, cfg.momentum, cfg.weight_decay) == (0.035, 0.02, 0.843, 0.00036)
    assert (cfg.batch_size, cfg.epochs) == (4, 50)


def test_defaults_roundtrip_exactly():
    text = format_config(resolve())
    assert "lr_stage1=0.035\n" in text and "weight_decay=0.00036\n" in text
    assert resolve(parse_config(text)) == resolve()
    assert format_config(resolve(parse_config(text))) == text


def test_echo_lists_every_key_once():
    lines = format_config(RunConfig()).splitlines()
    assert [ln.split("=", 1)[0] for ln in lines] == keys()


def test_comments_blank_lines_and_dashes():
    values = parse_config("# run\n\nlr-stage1 = 0.01  # faster\nseed=7\n")
    assert values == {"lr_stage1": 0.01, "seed": 7}


def test_unknown_key_named():
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("bogus=1\n")
    with pytest.raises(ConfigError, match="bogus"):
        resolve(overrides={"bogus": 1})


def test_bad_value_type():
    with pytest.raises(ConfigError, match="seed"):
        parse_config("seed=1.5\n")


def test_missing_equals_reports_line():
    with pytest.raises(ConfigError, match=":2:"):
        parse_config("seed=1\nnonsense\n", "f.txt")


def test_flags_override_file():
    cfg = resolve({"seed": 1, "epochs": 3}, {"seed": 9})
    assert (cfg.seed, cfg.epochs) == (9, 3)


def test_fast_profile_fills_unset_budget():
    cfg = resolve(overrides={"profile": "fast"})
    assert (cfg.epochs, cfg.count) == (FAST_EPOCHS, FAST_COUNT) == (5, 32)
    assert resolve(overrides={"profile": "fast", "epochs": 20}).epochs == 20


def test_fast_profile_echo_reproduces_itself():
    cfg = resolve(overrides={"profile": "fast"})
    assert resolve(parse_config(format_config(cfg))) == cfg


@pytest.mark.parametrize("override", [{"profile": "turbo"}, {"variant": "+XYZ"}, {"gate": "min"},
                                      {"epochs": -1}, {"batch_size": 0}, {"momentum": -0.1},
                                      {"image_size": 30}])
def test_invalid_values(override):
    with pytest.raises(ConfigError):
        resolve(overrides=override)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.txt")


def test_views_carry_values():
    cfg = resolve(overrides={"shift_x": 3, "jitter": 1, "d_shared": 16, "w_sc": 0.5,
                             "variant": "+SAM"})
    assert cfg.scene().shift_x == 3 and cfg.scene().jitter == 1
    m = cfg.model()
    assert m.d_shared == 16 and m.variant == "+SAM" and not m.use_ism
    assert cfg.model("baseline").use_sam is False
    assert cfg.train().w_sc == 0.5 and cfg.train().lr(2) == 0.02
