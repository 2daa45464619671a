import dataclasses

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudrecon import config as cfgio
from cloudrecon.config import ModelConfig, SynthConfig, TrainConfig
from cloudrecon.errors import ConfigError


def test_defaults_match_full_size_network():
    cfg = ModelConfig()
    assert (cfg.n_e, cfg.n_d, cfg.d_m, cfg.n_head, cfg.d_k) == (1, 5, 128, 16, 4)
    assert (cfg.c_in, cfg.k, cfg.low_res) == (15, 13, 32)
    assert cfg.cov_mode == "diagonal" and cfg.c_out == 26


@pytest.mark.parametrize("mode,c_out", [("none", 13), ("isotropic", 14), ("diagonal", 26)])
def test_output_channels_per_cov_mode(mode, c_out):
    cfg = ModelConfig(cov_mode=mode)
    assert cfg.c_out == c_out
    assert cfg.var_channels == c_out - 13


@pytest.mark.parametrize(
    "kwargs",
    [
        {"d_m": 100, "n_head": 16},
        {"cov_mode": "full"},
        {"n_d": 0},
        {"n_e": -1},
        {"attn_dropout": 1.0},
        {"out_scale": 0.0},
    ],
)
def test_model_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr_decay": 0.0}, {"lr_decay": 1.5}, {"epochs": 0}, {"loss": "l1"}])
def test_train_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


@pytest.mark.parametrize(
    "kwargs", [{"cloud_prob": 1.2}, {"haze_opacity_range": (0.9, 0.6)}, {"t": 0}, {"c_s1": -1}]
)
def test_synth_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_round_trip_all_sections(tmp_path):
    m = ModelConfig(d_m=16, n_head=4, cov_mode="isotropic", positional_encoding=False)
    t = TrainConfig(seed=3, loss="l2", use_sar=False)
    s = SynthConfig(shadow_offset=(-2, 5), haze_opacity_range=(0.25, 0.75))
    path = cfgio.write(tmp_path / "all.txt", m, t, s)
    for original in (m, t, s):
        assert cfgio.read(path, type(original)) == original


@settings(max_examples=50, deadline=None)
@given(
    lr=st.floats(1e-6, 1.0),
    decay=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**31),
    batch=st.integers(1, 64),
)
def test_float_fields_round_trip_exactly(lr, decay, seed, batch):
    cfg = TrainConfig(lr=lr, lr_decay=decay, seed=seed, batch_size=batch)
    assert cfgio.loads(cfgio.dumps(cfg), TrainConfig) == cfg


def test_missing_keys_take_defaults_and_unknown_keys_fail():
    assert cfgio.loads("[model]\nd_m = 32\nn_head = 8\n", ModelConfig) == ModelConfig(d_m=32, n_head=8)
    with pytest.raises(ConfigError, match="unknown key"):
        cfgio.loads("[model]\nwidth = 3\n", ModelConfig)
    with pytest.raises(ConfigError, match="no \\[train\\] section"):
        cfgio.loads("[model]\n", TrainConfig)
    with pytest.raises(ConfigError):
        cfgio.loads("[train]\nepochs = many\n", TrainConfig)
    with pytest.raises(ConfigError):
        cfgio.loads("[train]\nuse_sar = maybe\n", TrainConfig)


def test_fingerprint_tracks_content():
    a, b = ModelConfig(), ModelConfig(d_k=8)
    assert cfgio.fingerprint(a) == cfgio.fingerprint(ModelConfig())
    assert cfgio.fingerprint(a) != cfgio.fingerprint(b)
    assert len(cfgio.fingerprint(a)) == 12


def test_replace_revalidates():
    cfg = TrainConfig()
    assert cfgio.replace(cfg, seed=5).seed == 5
    with pytest.raises(ConfigError):
        cfgio.replace(cfg, lr=-1.0)
    assert dataclasses.is_dataclass(cfgio.replace(cfg))
