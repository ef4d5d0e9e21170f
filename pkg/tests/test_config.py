import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedwca.config import (
    ConfigParseError,
    ExperimentConfig,
    apply_env,
    dumps,
    loads,
)
from fedwca.errors import ConfigurationError
from fedwca.federation import METHODS

MINIMAL = """
[experiment]
config_version = 1
methods = source_only
seeds = 0
"""


def test_minimal_config_uses_defaults():
    cfg = loads(MINIMAL)
    assert cfg.methods == ("source_only",)
    assert cfg.dataset == ExperimentConfig().dataset
    assert cfg.hyper.lam == 0.3 and cfg.hyper.mu == 0.55
    assert cfg.hyper.temp_alpha == 0.01 and cfg.hyper.temp_beta == 0.05


def test_default_config_round_trips():
    cfg = ExperimentConfig()
    assert loads(dumps(cfg)) == cfg
    assert dumps(loads(dumps(cfg))) == dumps(cfg)


@given(
    st.lists(st.sampled_from(METHODS), min_size=1, max_size=4, unique=True),
    st.lists(st.integers(0, 1000), min_size=1, max_size=3),
    st.floats(0.001, 1.0),
    st.one_of(st.none(), st.integers(1, 9)),
    st.tuples(st.integers(1, 64), st.integers(1, 64)),
)
def test_round_trip_property(methods, seeds, lr, period, hidden):
    from dataclasses import replace

    from fedwca.config import ModelConfig

    cfg = ExperimentConfig(
        methods=tuple(methods), seeds=tuple(seeds), model=ModelConfig(hidden=hidden),
        hyper=replace(ExperimentConfig().hyper, lr=lr, period=period),
        overrides={methods[0]: {"rounds": 3}},
    )
    back = loads(dumps(cfg))
    assert back == cfg
    assert back.method_config(methods[0], 0).rounds == 3


def test_method_override_section():
    cfg = loads(MINIMAL + "[hyperparameters]\nrounds = 7\n[method.fedwca_revised]\nperiod = none\n")
    assert cfg.method_config("fedwca_revised", 0).period is None
    assert cfg.method_config("fedwca", 0).period == 5
    assert cfg.method_config("fedwca", 0).rounds == 7


@pytest.mark.parametrize("text, line, fragment", [
    (MINIMAL + "[hyperparameters]\nlam = abc\n", 7, "lam"),
    (MINIMAL + "[dataset]\ncolour = blue\n", 7, "unknown key"),
    (MINIMAL + "[hyperparameters]\nmu = 2\n", 7, "mu"),
    (MINIMAL.replace("config_version = 1", "config_version = 9"), 3, "config_version"),
])
def test_errors_carry_location(text, line, fragment):
    with pytest.raises(ConfigParseError) as info:
        loads(text)
    assert f"line {line}" in str(info.value)
    assert fragment in str(info.value)


@pytest.mark.parametrize("text", [
    "[experiment]\nmethods = fedwca\n",
    MINIMAL.replace("source_only", "magic"),
    MINIMAL.replace("seeds = 0", "seeds ="),
    MINIMAL + "[method.magic]\nlr = 1\n",
    MINIMAL + "[strange]\nx = 1\n",
    "not an ini file",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigurationError):
        loads(text)


def test_env_overrides():
    cfg = loads(MINIMAL)
    out = apply_env(cfg, {"FEDWCA_SEED": "3, 4", "FEDWCA_OUT": "/tmp/x"})
    assert out.seeds == (3, 4) and out.out_dir == "/tmp/x"
    assert apply_env(cfg, {}) == cfg
    with pytest.raises(ConfigurationError):
        apply_env(cfg, {"FEDWCA_SEED": "x"})
