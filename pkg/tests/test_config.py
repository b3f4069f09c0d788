import numpy as np
import pytest

from statflow import ConfigError, Schedule, config_text_hash, load_config

GOOD = """
[model]
kind = ou
a = 1.5
sigma = 0.4
d = 2

[objective]
kind = mean
beta = 0.25

[schedule]
c = 0.8
q = 0.9

[run]
dt = 0.02
t_end = 50
seed = 11
theta0 = 0.5, -0.5
log_stride = 2.0
checkpoint_stride = 5.0
kappa = 0.2
record_noise = false

[oracle]
t = 40
replicas = 4
burn_in_frac = 0.3
refresh_stride = 25

[diagnostics]
enabled = true
terminal_oracle = false
"""


def _write(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_full_roundtrip(tmp_path):
    cfg = load_config(_write(tmp_path, GOOD))
    assert cfg.model.kind == "ou" and cfg.model.d == 2
    assert cfg.model.params["a"] == 1.5
    assert cfg.objective.kind == "mean"
    assert cfg.objective.beta_target == 0.25
    assert cfg.schedule == Schedule(0.8, 0.9)
    assert cfg.dt == 0.02 and cfg.t_end == 50 and cfg.seed == 11
    assert np.array_equal(cfg.theta0, [0.5, -0.5])
    assert cfg.kappa == 0.2
    assert cfg.oracle_t == 40 and cfg.oracle_replicas == 4
    assert cfg.oracle_burn_in_frac == 0.3 and cfg.oracle_refresh_stride == 25
    assert cfg.diagnostics is True and cfg.terminal_oracle is False


def test_missing_file_and_sections(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "nope.ini"))
    with pytest.raises(ConfigError, match=r"\[schedule\]"):
        load_config(_write(tmp_path, "[model]\nkind = ou\na = 1\nsigma = 0.5\n"
                                     "[objective]\nkind = mean\nbeta = 0\n"))


def test_schedule_rejection_names_condition(tmp_path):
    text = GOOD.replace("q = 0.9", "q = 0.4")
    with pytest.raises(ConfigError, match=r"alpha\^2 diverges"):
        load_config(_write(tmp_path, text))
    text = GOOD.replace("q = 0.9", "q = 1.2")
    with pytest.raises(ConfigError, match="alpha converges"):
        load_config(_write(tmp_path, text))


def test_tanh_margin_rejection(tmp_path):
    text = """
[model]
kind = tanh
a = 1.0
c = 2.0
s0 = 0.5
s1 = 0.1

[objective]
kind = coordinate
beta = 0.0

[schedule]
c = 1.0
q = 1.0
"""
    with pytest.raises(ConfigError, match="dissipativity margin"):
        load_config(_write(tmp_path, text))


def test_bad_values(tmp_path):
    with pytest.raises(ConfigError, match="kind"):
        load_config(_write(tmp_path, GOOD.replace("kind = ou", "kind = gbm")))
    with pytest.raises(ConfigError, match=r"\[model\] a"):
        load_config(_write(tmp_path, GOOD.replace("a = 1.5", "a = fast")))
    with pytest.raises(ConfigError, match="index"):
        text = GOOD.replace("kind = mean", "kind = coordinate\nindex = 7")
        load_config(_write(tmp_path, text))
    with pytest.raises(ConfigError, match="t_end"):
        load_config(_write(tmp_path, GOOD.replace("t_end = 50", "t_end = 0.1")))


def test_custom_factories(tmp_path):
    text = """
[model]
kind = custom
factory = helpers:make_custom_model

[objective]
kind = custom
factory = helpers:make_custom_objective

[schedule]
c = 1.0
q = 1.0
"""
    cfg = load_config(_write(tmp_path, text))
    assert cfg.model.d == 2
    assert cfg.objective.beta_target == 0.25


def test_custom_factory_errors(tmp_path):
    base = """
[model]
kind = custom
factory = {factory}

[objective]
kind = mean
beta = 0.0

[schedule]
c = 1.0
q = 1.0
"""
    with pytest.raises(ConfigError, match="did not return an SdeModel"):
        load_config(_write(tmp_path, base.format(factory="helpers:make_not_a_model")))
    with pytest.raises(ConfigError, match="not importable"):
        load_config(_write(tmp_path, base.format(factory="no.such.module:f")))
    with pytest.raises(ConfigError, match="not found"):
        load_config(_write(tmp_path, base.format(factory="helpers:missing_fn")))
    with pytest.raises(ConfigError, match="package.module:callable"):
        load_config(_write(tmp_path, base.format(factory="helpers.make_custom_model")))


def test_config_text_hash(tmp_path):
    p1 = _write(tmp_path, GOOD, "a.ini")
    p2 = _write(tmp_path, GOOD, "b.ini")
    p3 = _write(tmp_path, GOOD + "\n# comment\n", "c.ini")
    assert config_text_hash(p1) == config_text_hash(p2)
    assert config_text_hash(p1) != config_text_hash(p3)
    assert len(config_text_hash(p1)) == 64
