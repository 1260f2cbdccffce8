"""INI parsing: round trips, strict keys, and type coercion."""

import pytest

from dtslab import ConfigError, TrainerConfig
from dtslab.config import (GenConfig, load_gen_config, load_train_config,
                           save_train_config)


def test_train_config_roundtrip(tmp_path):
    cfg = TrainerConfig(data_dir="/data", total_iters=123, warmup_iters=7,
                        lr_encoder=5e-4, lr_decoder=2e-3, seed=42,
                        group2="setting_a", bidirectional=False,
                        routing="table5-row2", augment=False,
                        prob_cumulative=True, run_id="abc")
    path = tmp_path / "run.ini"
    save_train_config(cfg, path)
    back = load_train_config(path)
    assert back == cfg


def test_defaults_survive_partial_files(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[train]\niters = 9\n")
    cfg = load_train_config(path)
    assert cfg.total_iters == 9
    assert cfg.group2 == TrainerConfig().group2
    assert cfg.conf_threshold == pytest.approx(0.968)


def test_unknown_section_and_key_rejected(tmp_path):
    bad1 = tmp_path / "a.ini"
    bad1.write_text("[surprise]\nx = 1\n")
    with pytest.raises(ConfigError) as exc:
        load_train_config(bad1)
    assert "surprise" in str(exc.value)

    bad2 = tmp_path / "b.ini"
    bad2.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError) as exc:
        load_train_config(bad2)
    assert "learning_rate" in str(exc.value)


def test_type_errors_are_reported(tmp_path):
    bad = tmp_path / "c.ini"
    bad.write_text("[train]\niters = soon\n")
    with pytest.raises(ConfigError):
        load_train_config(bad)
    bad.write_text("[train]\naugment = maybe\n")
    with pytest.raises(ConfigError):
        load_train_config(bad)


def test_boolean_spellings(tmp_path):
    path = tmp_path / "d.ini"
    path.write_text("[dts]\nbidirectional = off\nprob_cumulative = YES\n")
    cfg = load_train_config(path)
    assert cfg.bidirectional is False and cfg.prob_cumulative is True


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_train_config(tmp_path / "nothing.ini")


def test_inline_comments_are_stripped(tmp_path):
    path = tmp_path / "e.ini"
    path.write_text("[train]\niters = 11  # keep it quick\n")
    assert load_train_config(path).total_iters == 11


def test_gen_config(tmp_path):
    path = tmp_path / "g.ini"
    path.write_text("[gen]\nout = /tmp/x\nsource = 5\ntarget = 6\neval = 2\n"
                    "height = 32\nwidth = 40\npaired = true\n")
    cfg = load_gen_config(path)
    assert cfg.out_dir == "/tmp/x"
    assert (cfg.n_source, cfg.n_target, cfg.n_eval) == (5, 6, 2)
    assert cfg.paired is True
    cfg.validate()
    with pytest.raises(ConfigError):
        GenConfig(out_dir="x", n_source=0).validate()
    with pytest.raises(ConfigError):
        GenConfig(out_dir="x", height=16).validate()
