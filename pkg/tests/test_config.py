import pytest
from pydantic import ValidationError

from egoav.config import (
    ModelConfig,
    RunConfig,
    TrainConfig,
    UNetConfig,
    load_run_config,
    read_config_file,
    read_environment,
    write_run_config,
)
from egoav.errors import ConfigError, EgoAVError


def write_ini(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults():
    config = load_run_config(environ={})
    assert config == RunConfig()
    assert config.train.masking.r == 0.2
    assert config.train.peak_lr == 2e-4
    assert config.model.enc_dim == 768


def test_layering(tmp_path):
    path = write_ini(
        tmp_path / "run.ini",
        "[run]\nseed = 3\n[train]\npeak_lr = 0.001\nepochs = 7\n[train.masking]\nr = 0.5\n",
    )
    environ = {"EGOAV_TRAIN__MASKING__R": "0.8", "EGOAV_TRAIN__EPOCHS": "9", "EGOAV_VERBOSITY": "debug"}

    config = load_run_config(path, {"train": {"epochs": 11}}, environ=environ)
    assert config.seed == 3
    assert config.train.peak_lr == 0.001
    assert config.train.masking.r == 0.8
    assert config.train.epochs == 11


def test_environment_parsing():
    values = read_environment({"EGOAV_RUN__WORKERS": "4", "EGOAV_ASD__FUSION__OUT_DIM": "512", "OTHER": "x"})
    assert values == {"workers": 4, "asd": {"fusion": {"out_dim": 512}}}


def test_unknown_keys_are_rejected(tmp_path):
    path = write_ini(tmp_path / "bad.ini", "[train]\npeak_rate = 0.1\n")
    with pytest.raises(ConfigError, match="peak_rate"):
        load_run_config(path, environ={})
    with pytest.raises(ConfigError):
        load_run_config(environ={"EGOAV_NOPE__X": "1"})


def test_invalid_values_are_config_errors():
    with pytest.raises(ConfigError, match="r out of range"):
        load_run_config(overrides={"train": {"masking": {"r": 1.5}}}, environ={})
    assert issubclass(ConfigError, EgoAVError) and issubclass(ConfigError, ValueError)


def test_malformed_file(tmp_path):
    path = write_ini(tmp_path / "broken.ini", "peak_lr = 1\n")
    with pytest.raises(ConfigError, match="Unable to read"):
        read_config_file(path)


def test_ini_round_trip(tmp_path):
    config = load_run_config(
        overrides={
            "seed": 5,
            "model": ModelConfig.tiny().model_dump(mode="json"),
            "train": {"betas": [0.9, 0.99], "masking": {"r": 0.5}},
            "corpus": {"splits": [0.5, 0.25, 0.25], "highlight_active": True},
            "sweep": {"r_values": [0.0, 100.0]},
        },
        environ={},
    )
    path = write_run_config(config, tmp_path / "out" / "config.ini")
    text = path.read_text(encoding="utf-8")
    assert "[train.masking]" in text and "[denoise.unet]" in text

    again = load_run_config(path, environ={})
    assert again == config
    assert again.hash() == config.hash()


def test_hash_tracks_values():
    a, b = RunConfig(), RunConfig(seed=1)
    assert a.hash() == RunConfig().hash()
    assert a.hash() != b.hash()
    assert len(a.hash()) == 64


def test_model_dims_must_split_evenly():
    with pytest.raises(ValidationError):
        ModelConfig(enc_dim=100)
    tiny = ModelConfig.tiny()
    assert tiny.enc_dim == 96 and tiny.enc_dim % tiny.enc_heads == 0


def test_warmup_must_fit():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=2, warmup_epochs=5)


def test_unet_channel_plan():
    unet = UNetConfig()
    assert unet.decoder_in_channels(unet.pretrained_fusion_channels) == [1552, 1024, 512, 256, 128]
    assert len(unet.decoder_out_channels()) == len(unet.encoder_channels)
