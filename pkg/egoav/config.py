"""
config module

Every configurable part of egoav is a pydantic model declared here and
embedded in `RunConfig`. Values are layered ``defaults < config file <
environment < flags``:

1. the config file is an INI document, one section per config model, with
   dotted section names for nesting and JSON-encoded values:
     [train]
     peak_lr = 0.0002
     [train.masking]
     r = 0.2
   top-level keys live in the ``[run]`` section;
2. environment variables ``EGOAV_<SECTION>__<KEY>=value`` (double underscore
   for nesting, e.g. ``EGOAV_TRAIN__MASKING__R=0.5``), after loading ``.env``;
3. command-line flags, passed as a nested override mapping.
"""
import configparser
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .common import canonical_hash, load_environment
from .errors import ConfigError


ENV_PREFIX = "EGOAV_"
RUN_SECTION = "run"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())


class MaskingConfig(_Section):
    """
    Configuration for the mixed audio masking protocol.
    """
    r: float = Field(0.20, description="Relative frequency of full-channel masking")
    token_mask_ratio: float = Field(
        0.50, description="Fraction of the audio tokens hidden by token masking"
    )
    seed: int = Field(0, description="Root seed of the mask stream")

    @field_validator("r")
    @classmethod
    def check_r(cls, value: float) -> float:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"r out of range: {value} is not in [0, 1]")
        return value

    @field_validator("token_mask_ratio")
    @classmethod
    def check_token_mask_ratio(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError(f"token_mask_ratio out of range: {value} is not in (0, 1)")
        return value


class ModelConfig(_Section):
    """
    Architecture hyperparameters of the spatial masked autoencoder.
    """
    enc_layers_uni: int = Field(8, ge=1, description="Layers of each uni-modal encoder")
    enc_layers_shared: int = Field(6, ge=1, description="Layers of the shared AV encoder")
    enc_dim: int = Field(768, description="Encoder embedding size")
    enc_heads: int = Field(12, ge=1)
    dec_layers_shared: int = Field(1, ge=1, description="Layers of the shared AV decoder")
    dec_layers_audio: int = Field(3, ge=1, description="Layers of the audio decoder")
    dec_dim: int = Field(384, description="Decoder embedding size")
    dec_heads: int = Field(6, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    video_patch: int = Field(16, ge=1)
    tubelet_depth: int = Field(5, ge=1, description="Frames spanned by one tubelet")
    audio_patch: Tuple[int, int] = Field((2, 16), description="(time, mel) patch size")
    norm_pix_loss: bool = Field(False, description="Per-patch target normalization")
    loss_per_element: bool = Field(
        False, description="Average the loss over patch values too, not only tokens"
    )
    seed: int = 0

    @model_validator(mode="after")
    def check_dims(self) -> "ModelConfig":
        for name, dim, heads in (
            ("enc", self.enc_dim, self.enc_heads),
            ("dec", self.dec_dim, self.dec_heads),
        ):
            if dim % heads:
                raise ValueError(f"{name}_dim={dim} is not divisible by {name}_heads={heads}")
            # 3-axis video and 2-axis audio sinusoids, sin/cos pairs per axis
            if dim % 6 or dim % 4:
                raise ValueError(f"{name}_dim={dim} must be divisible by 6 and 4")
        return self

    @property
    def video_token_dim(self) -> int:
        return self.video_patch * self.video_patch * 3 * self.tubelet_depth

    @property
    def audio_token_dim(self) -> int:
        return self.audio_patch[0] * self.audio_patch[1]

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """
        Smoke profile: 2/2/2 uni/shared-encoder/audio-decoder layers at dim 96.
        """
        values = dict(
            enc_layers_uni=2,
            enc_layers_shared=2,
            enc_dim=96,
            enc_heads=4,
            dec_layers_shared=1,
            dec_layers_audio=2,
            dec_dim=48,
            dec_heads=4,
        )
        values.update(overrides)
        return cls(**values)


class TrainConfig(_Section):
    """
    Self-supervised pretraining recipe.
    """
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(104, ge=1)
    peak_lr: float = Field(2e-4, ge=0)
    warmup_epochs: int = Field(10, ge=0)
    weight_decay: float = Field(1e-5, ge=0)
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: Optional[float] = Field(None, description="Max global grad norm, off if None")
    augment_flip_prob: float = Field(0.5, ge=0, le=1)
    masking: MaskingConfig = Field(default_factory=MaskingConfig)
    max_steps: Optional[int] = Field(
        None, ge=1, description="Stop after this many optimizer steps"
    )
    keep_last: int = Field(3, ge=1, description="Epoch checkpoints kept on disk")
    num_workers: int = Field(0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_warmup(self) -> "TrainConfig":
        if self.warmup_epochs >= self.epochs:
            raise ValueError(
                f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}"
            )
        return self


class FusionConfig(_Section):
    """
    Frame-query transformer decoder fusing pretrained features per frame.
    """
    out_dim: Literal[128, 512] = Field(128, description="Per-frame fused feature width")
    heads: int = Field(4, ge=1)
    num_layers: Literal[1] = 1
    bridge_dim: int = Field(128, description="Width handed to the ASD head")


class ASDConfig(_Section):
    """
    Active speaker detection finetuning recipe.
    """
    epochs: int = Field(25, ge=1)
    batch_size: int = Field(400, ge=1)
    head_lr: float = Field(1e-4, ge=0, description="Head and fusion learning rate")
    pretrained_lr: float = Field(1e-5, ge=0, description="Pretrained encoder learning rate")
    lr_decay: float = Field(0.95, gt=0, le=1, description="Per-epoch multiplicative decay")
    freeze_pretrained: bool = False
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many optimizer steps")
    crop_size: int = Field(112, ge=8)
    face_dim: int = 64
    bbox_dim: int = 32
    hidden_dim: int = 128
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    num_workers: int = Field(0, ge=0)
    seed: int = 0


class STFTConfig(_Section):
    """
    STFT front end of the denoiser. ``n_fft=1022`` selects the alternative
    reading of "512 frequency bins" (512 one-sided bins).
    """
    n_fft: int = 512
    win_length: int = 128
    hop_length: int = 64

    @model_validator(mode="after")
    def check_window(self) -> "STFTConfig":
        if self.win_length > self.n_fft:
            raise ValueError("win_length must not exceed n_fft")
        if self.hop_length > self.win_length:
            raise ValueError("hop_length must not exceed win_length")
        return self


class UNetConfig(_Section):
    """
    Ratio-mask U-Net with a fused bottleneck.
    """
    encoder_channels: Tuple[int, ...] = (64, 128, 256, 512, 512)
    leaky_slope: float = 0.2
    fusion_dim: int = Field(128, description="Encoder features projected to this width")
    video_fusion_channels: int = 784
    audio_fusion_channels: int = 256
    frame_channels: int = Field(128, description="Per-frame channels of the frames branch")
    last_padding: Tuple[int, int] = (2, 1)
    final_kernel: Tuple[int, int] = (2, 1)

    @property
    def pretrained_fusion_channels(self) -> int:
        return self.video_fusion_channels + self.audio_fusion_channels

    def decoder_in_channels(self, fusion_channels: int) -> List[int]:
        """
        Input widths of the transposed convs, bottleneck+fusion first.

        With the defaults and 640 frame channels this is (1152, 1024, 512, 256, 128).
        """
        enc = self.encoder_channels
        widths = [enc[-1] + fusion_channels]
        widths += [2 * c for c in reversed(enc[:-1])]
        return widths

    def decoder_out_channels(self) -> List[int]:
        return list(reversed(self.encoder_channels[:-1])) + [2]


class DenoiseConfig(_Section):
    """
    Spatial audio denoising recipe.
    """
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(80, ge=1)
    lr: float = Field(5e-4, ge=0)
    snr_db: float = 0.0
    vision: Literal["none", "frames", "pretrained"] = "pretrained"
    pretrained_lr_scale: float = Field(0.1, ge=0)
    max_steps: Optional[int] = Field(None, ge=1, description="Stop after this many optimizer steps")
    stft: STFTConfig = Field(default_factory=STFTConfig)
    unet: UNetConfig = Field(default_factory=UNetConfig)
    num_workers: int = Field(0, ge=0)
    seed: int = 0


class CorpusConfig(_Section):
    """
    Synthetic corpus generation.
    """
    n_scenes: int = Field(10, ge=1)
    scene_seconds: int = Field(5, ge=1)
    height: int = 240
    width: int = 352
    fps: int = 5
    sample_rate: int = 16000
    min_speakers: int = Field(1, ge=1)
    max_speakers: int = Field(3, ge=1)
    sprite_radius: int = Field(20, ge=1)
    ambient_level: float = Field(0.01, ge=0)
    max_pan: float = Field(0.0, ge=0, le=0.5, description="Camera pan amplitude")
    highlight_active: bool = False
    splits: Tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    @model_validator(mode="after")
    def check_corpus(self) -> "CorpusConfig":
        if self.width % 16:
            raise ValueError(f"width={self.width} must be divisible by 16")
        if self.min_speakers > self.max_speakers:
            raise ValueError("min_speakers must not exceed max_speakers")
        if abs(sum(self.splits) - 1.0) > 1e-9:
            raise ValueError("splits must sum to 1")
        return self


class SweepConfig(_Section):
    """
    Channel-masking frequency sweep.
    """
    r_values: List[float] = Field(
        default_factory=lambda: [0.0, 20.0, 50.0, 80.0, 100.0],
        description="Percentages of channel masking",
    )
    steps: int = Field(300, ge=1, description="Pretraining budget per r")
    task: Literal["asd", "denoise", "inpaint"] = "asd"

    @field_validator("r_values")
    @classmethod
    def check_r_values(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("empty r list")
        for value in values:
            if not 0.0 <= value <= 100.0:
                raise ValueError(f"r out of range: {value} is not a percentage")
        return values


class RunConfig(_Section):
    """
    Root configuration resolved by every CLI command.
    """
    seed: int = 0
    workers: int = Field(0, ge=0)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    asd: ASDConfig = Field(default_factory=ASDConfig)
    denoise: DenoiseConfig = Field(default_factory=DenoiseConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)

    def hash(self) -> str:
        return canonical_hash(self.model_dump(mode="json"))


def _decode(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def _deep_update(target: Dict[str, Any], source: Mapping[str, Any]) -> Dict[str, Any]:
    for key, value in source.items():
        if isinstance(value, Mapping) and isinstance(target.get(key), dict):
            _deep_update(target[key], value)
        elif isinstance(value, Mapping):
            target[key] = _deep_update({}, value)
        else:
            target[key] = value
    return target


def _nested(path: List[str], value: Any) -> Dict[str, Any]:
    for key in reversed(path):
        value = {key: value}
    return value


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse an INI config file into a nested mapping.

    :param path: The config file
    :raises ConfigError: If the file is missing or malformed
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"Unable to read config file {path}: {e}") from e

    values: Dict[str, Any] = {}
    for section in parser.sections():
        keys = [] if section == RUN_SECTION else section.split(".")
        items = {key: _decode(raw) for key, raw in parser.items(section)}
        _deep_update(values, _nested(keys, items) if keys else items)
    return values


def read_environment(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """
    Collect ``EGOAV_<SECTION>__<KEY>`` overrides.

    Variables without a double underscore (``EGOAV_VERBOSITY``) are not
    configuration and are skipped.
    """
    environ = os.environ if environ is None else environ
    values: Dict[str, Any] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or "__" not in name:
            continue
        keys = name[len(ENV_PREFIX):].lower().split("__")
        if keys[0] == RUN_SECTION:
            keys = keys[1:]
        _deep_update(values, _nested(keys, _decode(raw)))
    return values


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """
    Resolve the layered configuration.

    :param path: Optional INI config file
    :param overrides: Nested flag overrides, applied last
    :param environ: Environment mapping, defaults to ``os.environ``
    :return: The validated configuration
    :raises ConfigError: On unknown keys or invalid values
    """
    if environ is None:
        load_environment()

    merged: Dict[str, Any] = {}
    if path is not None:
        _deep_update(merged, read_config_file(path))
    _deep_update(merged, read_environment(environ))
    if overrides:
        _deep_update(merged, overrides)

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def write_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """
    Persist a resolved config as INI; reading it back yields an equal config.
    """
    parser = configparser.ConfigParser(interpolation=None)

    def add_section(name: str, payload: Dict[str, Any]) -> None:
        scalars = {k: v for k, v in payload.items() if not isinstance(v, dict)}
        parser[name] = {k: json.dumps(v) for k, v in scalars.items()}
        for key, value in payload.items():
            if isinstance(value, dict):
                child = key if name == RUN_SECTION else f"{name}.{key}"
                add_section(child, value)

    add_section(RUN_SECTION, config.model_dump(mode="json"))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path
