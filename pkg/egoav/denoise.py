"""
denoise module

Spatial audio denoising: a target clip is mixed with the binaural audio of
another clip at a chosen SNR, and a U-Net predicts a binaural ratio mask
over the mixture's magnitude spectrogram. The estimate is the masked
magnitude with the mixture's phase.

The U-Net's bottleneck is concatenated with the maps of a vision branch
(``none``, ``frames`` or ``pretrained``, see `egoav.factory`).
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import soundfile as sf
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel
from scipy import stats as scipy_stats
from torch.utils.data import DataLoader, Dataset
from tqdm.auto import tqdm

from .checkpoint import checkpoint_config, checkpoint_stats, load_checkpoint, save_checkpoint
from .common import derive_rng
from .config import DenoiseConfig, ModelConfig, STFTConfig, UNetConfig
from .data import derangement
from .errors import DataError, NonFiniteLossError
from .factory import VisionBranchFactory
from .logging import get_logger
from .masking import finetune_mask
from .metrics import MetricsWriter
from .pretrainer import default_device, load_pretrained
from .tokenizer import (
    NormalizationStats,
    RawClip,
    compute_mel_pair,
    normalize_frames,
    tokenize_audio,
    tokenize_video,
)
from .vision import VisionInputs, abc_VisionBranch


logger = get_logger(__name__)

SAMPLE_RATE = 16000
MAG_FLOOR = 1e-10
SI_SDR_CAP = 80.0
EVAL_KEY = 2**31 - 2

MaskKind = Literal["model", "ideal", "all-ones-debug"]


@dataclass
class Mixture:
    """
    ``mixed == target + noise`` where ``noise`` already carries the SNR gain.
    """
    mixed: np.ndarray
    target: np.ndarray
    noise: np.ndarray
    snr_db: float
    alpha: float

    def measured_snr(self) -> float:
        return float(10.0 * np.log10(_power(self.target) / _power(self.noise)))


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


def mix_at_snr(target: np.ndarray, noise: np.ndarray, snr_db: float) -> Mixture:
    """
    Scale ``noise`` so the target-to-noise power ratio over both channels is
    ``snr_db``, add it to ``target``, and bring the sum back within [-1, 1].

    The same peak factor is applied to the target and noise copies, so the
    decomposition and the SNR survive normalization. The sum is scaled only
    when clipping (peak above 1); quieter mixtures keep their level.

    :raises DataError: If either signal is silent or shapes differ
    """
    target = np.asarray(target, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if target.shape != noise.shape:
        raise DataError(f"target {target.shape} and noise {noise.shape} differ in shape")
    p_target, p_noise = _power(target), _power(noise)
    if p_noise == 0.0:
        raise DataError("undefined SNR: the noise is silent")
    if p_target == 0.0:
        raise DataError("undefined SNR: the target is silent")

    alpha = float(np.sqrt(p_target / (p_noise * 10.0 ** (snr_db / 10.0))))
    scaled = alpha * noise
    mixed = target + scaled
    peak = float(np.max(np.abs(mixed)))
    gain = 1.0 / peak if peak > 1.0 else 1.0
    return Mixture(mixed=mixed * gain, target=target * gain, noise=scaled * gain, snr_db=snr_db, alpha=alpha)


def _window(config: STFTConfig, device=None, dtype=torch.float32) -> torch.Tensor:
    return torch.hann_window(config.win_length, periodic=True, device=device, dtype=dtype)


def stft(waveform: Union[np.ndarray, torch.Tensor], config: Optional[STFTConfig] = None) -> torch.Tensor:
    """
    Complex (..., F, T_s) spectrogram: ``n_fft``-point transforms of Hann
    windowed frames, zero-padded window, centered frames.

    :raises DataError: If the waveform is shorter than one window
    """
    config = config or STFTConfig()
    x = torch.as_tensor(waveform)
    if not x.is_floating_point():
        x = x.to(torch.float32)
    if x.shape[-1] < config.win_length:
        raise DataError(f"waveform of {x.shape[-1]} samples is shorter than the {config.win_length} window")
    lead = x.shape[:-1]
    spec = torch.stft(
        x.reshape(-1, x.shape[-1]),
        n_fft=config.n_fft,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window=_window(config, x.device, x.dtype),
        center=True,
        return_complex=True,
    )
    return spec.reshape(*lead, *spec.shape[-2:])


def num_stft_frames(length: int, config: Optional[STFTConfig] = None) -> int:
    config = config or STFTConfig()
    return 1 + length // config.hop_length


def istft(spec: torch.Tensor, length: int, config: Optional[STFTConfig] = None) -> torch.Tensor:
    """
    Overlap-add inverse of `stft`, normalized by the summed squared window.

    :raises DataError: If ``spec`` does not have the frame count of ``length`` samples
    """
    config = config or STFTConfig()
    expected = num_stft_frames(length, config)
    if spec.shape[-1] != expected:
        raise DataError(f"{spec.shape[-1]} frames do not match length {length} (expected {expected})")
    lead = spec.shape[:-2]
    real_dtype = spec.real.dtype
    wave = torch.istft(
        spec.reshape(-1, *spec.shape[-2:]),
        n_fft=config.n_fft,
        hop_length=config.hop_length,
        win_length=config.win_length,
        window=_window(config, spec.device, real_dtype),
        center=True,
        length=length,
    )
    return wave.reshape(*lead, length)


def log_magnitude(spec: torch.Tensor) -> torch.Tensor:
    return torch.log(spec.abs() + MAG_FLOOR)


def ideal_ratio_mask(target: torch.Tensor, noise: torch.Tensor, config: Optional[STFTConfig] = None) -> torch.Tensor:
    """
    ``|S| / (|S| + |N|)`` of the target and the scaled noise, in [0, 1].
    """
    s = stft(target, config).abs()
    n = stft(noise, config).abs()
    return (s / (s + n + MAG_FLOOR)).clamp(0.0, 1.0)


def apply_ratio_mask(mask: torch.Tensor, mixed: Union[np.ndarray, torch.Tensor], config: Optional[STFTConfig] = None) -> torch.Tensor:
    """
    ``istft(mask * |X| * exp(i angle X))`` at the mixture's length.
    """
    x = torch.as_tensor(mixed)
    spec = stft(x, config)
    return istft(mask.to(spec.real.dtype) * spec, x.shape[-1], config)


def denoise(mixed: Union[np.ndarray, torch.Tensor], model: "DenoiseModel", inputs: VisionInputs) -> torch.Tensor:
    """
    Estimate the 2 x N target of one mixture with a trained model.
    """
    stft_config = model.config.stft
    param = next(model.parameters())
    x = torch.as_tensor(mixed, dtype=torch.float32)
    model.eval()
    with torch.no_grad():
        mask = model(log_magnitude(stft(x, stft_config))[None].to(param.device), inputs)[0]
    return apply_ratio_mask(mask.cpu(), x, stft_config)


def si_sdr_channel(ref: np.ndarray, est: np.ndarray) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    energy = np.dot(ref, ref)
    if energy == 0.0:
        raise DataError("SI-SDR is undefined for a silent reference")
    target = (np.dot(est, ref) / energy) * ref
    residual = est - target
    num, den = np.dot(target, target), np.dot(residual, residual)
    # silent or orthogonal estimate
    if num == 0.0:
        return -SI_SDR_CAP
    if den == 0.0 or num >= den * 10.0 ** (SI_SDR_CAP / 10.0):
        return SI_SDR_CAP
    return float(10.0 * np.log10(num / den))


def si_sdr(ref: np.ndarray, est: np.ndarray) -> float:
    """
    Scale-invariant SDR in dB, per channel then averaged; capped at 80 dB.

    :raises DataError: On a length mismatch or a silent reference channel
    """
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    est = np.atleast_2d(np.asarray(est, dtype=np.float64))
    if ref.shape != est.shape:
        raise DataError(f"reference {ref.shape} and estimate {est.shape} differ in shape")
    return float(np.mean([si_sdr_channel(r, e) for r, e in zip(ref, est)]))


def si_sdri(ref: np.ndarray, mixture: np.ndarray, est: np.ndarray) -> float:
    """
    SI-SDR improvement of ``est`` over using the mixture as the estimate.
    """
    return si_sdr(ref, est) - si_sdr(ref, mixture)


def stft_distance(ref: np.ndarray, est: np.ndarray, config: Optional[STFTConfig] = None) -> float:
    """
    Mean squared error between binaural magnitude spectrograms, times 1e3.
    """
    ref = torch.as_tensor(np.asarray(ref, dtype=np.float64))
    est = torch.as_tensor(np.asarray(est, dtype=np.float64))
    if ref.shape != est.shape:
        raise DataError(f"reference {tuple(ref.shape)} and estimate {tuple(est.shape)} differ in shape")
    diff = stft(ref, config).abs() - stft(est, config).abs()
    return float((diff**2).mean() * 1e3)


def match_size(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """
    Crop or edge-pad the last two dims of ``x`` to ``size``.
    """
    h, w = size
    x = x[..., :h, :w]
    pad_h, pad_w = h - x.shape[-2], w - x.shape[-1]
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
    return x


class UNet(nn.Module):
    """
    Ratio-mask U-Net over 2-channel log-magnitude spectrograms.

    :param config: Layer widths and kernels
    :param fusion_channels: Channels concatenated to the bottleneck
    """

    def __init__(self, config: UNetConfig, fusion_channels: int):
        super().__init__()
        self.config = config
        slope = config.leaky_slope
        widths = (2,) + tuple(config.encoder_channels)
        self.down = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(c_in, c_out, kernel_size=4, stride=2, padding=1),
                nn.LeakyReLU(slope),
                nn.BatchNorm2d(c_out),
            )
            for c_in, c_out in zip(widths, widths[1:])
        )

        ins = config.decoder_in_channels(fusion_channels)
        outs = config.decoder_out_channels()
        self.up = nn.ModuleList()
        for i, (c_in, c_out) in enumerate(zip(ins, outs)):
            last = i == len(ins) - 1
            padding = tuple(config.last_padding) if last else (1, 1)
            conv = nn.ConvTranspose2d(c_in, c_out, kernel_size=4, stride=2, padding=padding)
            self.up.append(conv if last else nn.Sequential(conv, nn.ReLU(), nn.BatchNorm2d(c_out)))
        self.final = nn.Conv2d(2, 2, kernel_size=tuple(config.final_kernel))

    @property
    def min_size(self) -> int:
        return 2 ** len(self.config.encoder_channels)

    def bottleneck_size(self, size: Tuple[int, int]) -> Tuple[int, int]:
        h, w = size
        for _ in self.config.encoder_channels:
            h, w = h // 2, w // 2
        return h, w

    def forward(self, log_mag: torch.Tensor, fusion: torch.Tensor) -> torch.Tensor:
        """
        :param log_mag: B x 2 x F x T_s mixture log-magnitudes
        :param fusion: B x C x h x w maps at the bottleneck size
        :return: B x 2 x F x T_s mask in [0, 1]
        """
        size = tuple(log_mag.shape[-2:])
        if min(self.bottleneck_size(size)) < 1:
            raise DataError(f"input too short: spectrogram {size} needs at least {self.min_size} bins and frames")

        skips = []
        x = log_mag
        for layer in self.down:
            x = layer(x)
            skips.append(x)

        x = torch.cat([skips.pop(), fusion], dim=1)
        for layer in self.up[:-1]:
            skip = skips.pop()
            x = match_size(layer(x), skip.shape[-2:])
            x = torch.cat([x, skip], dim=1)
        x = self.final(self.up[-1](x))
        return torch.sigmoid(match_size(x, size))


class DenoiseModel(nn.Module):
    """
    U-Net plus vision branch.

    :param config: The denoising recipe (vision mode, STFT, U-Net)
    :param model_config: Encoder architecture for the ``pretrained`` mode
    :param num_frames: Frames per clip for the ``frames`` mode
    """

    def __init__(self, config: DenoiseConfig, model_config: Optional[ModelConfig] = None, num_frames: int = 5):
        super().__init__()
        self.config = config
        self.model_config = model_config
        self.num_frames = num_frames
        self.vision: abc_VisionBranch = VisionBranchFactory.create(
            config.vision, config.unet, model_config=model_config, num_frames=num_frames
        )
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.unet = UNet(config.unet, self.vision.out_channels)

    def forward(self, log_mag: torch.Tensor, inputs: VisionInputs) -> torch.Tensor:
        size = self.unet.bottleneck_size(tuple(log_mag.shape[-2:]))
        if min(size) < 1:
            raise DataError(f"input too short: spectrogram {tuple(log_mag.shape[-2:])}")
        return self.unet(log_mag, self.vision(inputs, size))

    def optimizer_groups(self, lr: float) -> List[Dict]:
        pretrained = {id(p) for p in self.vision.pretrained_parameters()}
        rest = [p for p in self.parameters() if id(p) not in pretrained]
        groups = [{"params": rest, "lr": lr, "name": "base"}]
        if pretrained:
            groups.append(
                {
                    "params": list(self.vision.pretrained_parameters()),
                    "lr": lr * self.config.pretrained_lr_scale,
                    "name": "pretrained",
                }
            )
        return groups


def build_denoiser(
    config: DenoiseConfig,
    pretrained: Optional[Union[str, Path]] = None,
    model_config: Optional[ModelConfig] = None,
    num_frames: int = 5,
) -> Tuple[DenoiseModel, NormalizationStats]:
    """
    A denoiser whose encoder (``pretrained`` mode) comes from a checkpoint,
    or is freshly initialized for the from-scratch control.
    """
    if config.vision == "pretrained" and pretrained is not None:
        mae, stats = load_pretrained(pretrained)
        model = DenoiseModel(config, mae.config, num_frames)
        model.vision.encoder.load_state_dict(mae.encoder.state_dict())
        return model, stats
    if pretrained is not None:
        _, stats = load_pretrained(pretrained)
        return DenoiseModel(config, model_config, num_frames), stats
    if config.vision == "pretrained" and model_config is None:
        raise DataError("a model config is required without a pretrained checkpoint")
    return DenoiseModel(config, model_config, num_frames), NormalizationStats.identity()


class DenoiseDataset(Dataset):
    """
    Target clips mixed on the fly with the audio of another clip.

    Noise partners come from a derangement drawn per ``(seed, epoch)``; the
    encoder's view of the mixture hides one channel (random per item while
    training, the right one otherwise).
    """

    def __init__(
        self,
        clips: Sequence[RawClip],
        stats: NormalizationStats,
        config: DenoiseConfig,
        tubelet_depth: Optional[int] = None,
        training: bool = True,
        seed: int = 0,
    ):
        if len(clips) < 2:
            raise DataError("mixing needs at least two clips")
        self.clips = clips
        self.stats = stats
        self.config = config
        self.tubelet_depth = tubelet_depth
        self.training = training
        self.seed = seed
        self.set_epoch(0)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch
        key = epoch if self.training else EVAL_KEY
        self.partners = derangement(len(self.clips), derive_rng(self.seed, key))

    def __len__(self) -> int:
        return len(self.clips)

    def mixture(self, index: int) -> Mixture:
        target = self.clips[index]
        noise = self.clips[int(self.partners[index])]
        return mix_at_snr(target.waveform, noise.waveform, self.config.snr_db)

    def __getitem__(self, index: int) -> Dict[str, torch.Tensor]:
        clip = self.clips[index]
        mix = self.mixture(index)
        stft_config = self.config.stft

        mixed = torch.from_numpy(mix.mixed.astype(np.float32))
        frames = normalize_frames(clip.frames, self.stats)
        video = tokenize_video(frames, tubelet_depth=self.tubelet_depth)
        audio = tokenize_audio(compute_mel_pair(mix.mixed.astype(np.float32), self.stats))
        rng = derive_rng(self.seed, self.epoch, index) if self.training else None
        keep = finetune_mask("random", rng, training=self.training, num_tokens=audio.num_tokens).unmasked_tensor()

        return {
            "log_mag": log_magnitude(stft(mixed, stft_config)),
            "irm": ideal_ratio_mask(
                torch.from_numpy(mix.target.astype(np.float32)),
                torch.from_numpy(mix.noise.astype(np.float32)),
                stft_config,
            ),
            "mixed": mixed,
            "target": torch.from_numpy(mix.target.astype(np.float32)),
            "frames": frames,
            "video": video.tokens,
            "video_coords": video.grid,
            "audio": audio.flat()[keep],
            "audio_coords": audio.grid[keep],
            "index": torch.tensor(index),
        }


def collate_mixtures(items: Sequence[Dict[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    batch = {key: torch.stack([item[key] for item in items]) for key in items[0] if key != "video_coords"}
    batch["video_coords"] = items[0]["video_coords"]
    return batch


def vision_inputs(batch: Dict[str, torch.Tensor], device: torch.device) -> VisionInputs:
    return VisionInputs(
        frames=batch["frames"].to(device),
        video=batch["video"].to(device),
        video_coords=batch["video_coords"].to(device),
        audio=batch["audio"].to(device),
        audio_coords=batch["audio_coords"].to(device),
    )


@dataclass
class DenoiseTrainResult:
    model: DenoiseModel
    losses: List[float]


def train_denoiser(
    model: DenoiseModel,
    clips: Sequence[RawClip],
    stats: NormalizationStats,
    config: Optional[DenoiseConfig] = None,
    workdir: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    device: Optional[Union[str, torch.device]] = None,
    show_progress: bool = False,
) -> DenoiseTrainResult:
    """
    Train the mask predictor against ideal ratio masks with a mask-space MSE.

    :param config: Recipe, defaults to the model's
    :param max_steps: Stop early after this many optimizer steps
    :raises NonFiniteLossError: On a NaN or infinite loss
    """
    config = config or model.config
    device = torch.device(device) if device is not None else default_device()
    model.to(device)
    tubelet_depth = model.model_config.tubelet_depth if model.model_config else None
    dataset = DenoiseDataset(clips, stats, config, tubelet_depth, training=True, seed=config.seed)
    optimizer = torch.optim.Adam(model.optimizer_groups(config.lr))
    metrics = MetricsWriter(Path(workdir) / "metrics.jsonl") if workdir is not None else None
    generator = torch.Generator()

    losses: List[float] = []
    step = 0
    logger.info(f"Training denoiser ({config.vision}) on {len(dataset)} clips at {config.snr_db} dB")
    try:
        for epoch in tqdm(range(config.epochs), disable=not show_progress, desc="denoise"):
            dataset.set_epoch(epoch)
            generator.manual_seed(int(derive_rng(config.seed, epoch).integers(2**62)))
            loader = DataLoader(
                dataset,
                batch_size=config.batch_size,
                shuffle=True,
                generator=generator,
                num_workers=config.num_workers,
                collate_fn=collate_mixtures,
            )
            model.train()
            for batch in loader:
                pred = model(batch["log_mag"].to(device), vision_inputs(batch, device))
                loss = F.mse_loss(pred, batch["irm"].to(device))
                if not torch.isfinite(loss):
                    ids = [clips[i].clip_id for i in batch["index"].tolist()]
                    raise NonFiniteLossError(f"non-finite denoising loss at step {step}", batch_ids=ids)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                if metrics is not None:
                    metrics.capture_event({"step": step, "epoch": epoch, "loss": loss.item()})
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if metrics is not None:
            metrics.close()

    if workdir is not None:
        save_denoiser(model, stats, Path(workdir) / "denoise.pt")
    return DenoiseTrainResult(model=model, losses=losses)


def save_denoiser(model: DenoiseModel, stats: NormalizationStats, path: Union[str, Path]) -> Path:
    configs = {"denoise": model.config}
    if model.model_config is not None:
        configs["model"] = model.model_config
    return save_checkpoint(
        path,
        kind="denoise",
        modules={"model": model},
        configs=configs,
        stats=stats,
        counters={"num_frames": model.num_frames},
    )


def load_denoiser(path: Union[str, Path]) -> Tuple[DenoiseModel, NormalizationStats]:
    payload = load_checkpoint(path, kind="denoise")
    model_config = checkpoint_config(payload, "model", ModelConfig) if "model" in payload["configs"] else None
    model = DenoiseModel(
        checkpoint_config(payload, "denoise", DenoiseConfig),
        model_config,
        num_frames=payload["counters"].get("num_frames", 5),
    )
    model.load_state_dict(payload["state"]["model"])
    return model, checkpoint_stats(payload)


class DenoiseReport(BaseModel):
    snr_db: float
    si_sdri_mean: float
    si_sdri_ci95: Optional[float]
    stft_distance_mean: float
    n_clips: int
    mode: str
    mask: str = "model"

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    def summary(self) -> str:
        ci = f" +/- {self.si_sdri_ci95:.2f}" if self.si_sdri_ci95 is not None else ""
        return (
            f"{self.mode} @ {self.snr_db:g} dB ({self.mask} mask, {self.n_clips} clips): "
            f"SI-SDRi {self.si_sdri_mean:.2f}{ci} dB, STFT distance {self.stft_distance_mean:.3f} x1e-3"
        )


def ci95_half_width(values: np.ndarray) -> Optional[float]:
    if len(values) < 2:
        return None
    return float(scipy_stats.t.ppf(0.975, len(values) - 1) * scipy_stats.sem(values))


def evaluate_denoiser(
    model: Optional[DenoiseModel],
    clips: Sequence[RawClip],
    stats: NormalizationStats,
    config: DenoiseConfig,
    mask: MaskKind = "model",
    seed: int = 0,
    out_dir: Optional[Union[str, Path]] = None,
    device: Optional[Union[str, torch.device]] = None,
) -> DenoiseReport:
    """
    SI-SDRi and STFT distance over fixed evaluation mixtures.

    :param model: The denoiser, unused for the ``ideal`` and ``all-ones-debug`` masks
    :param mask: ``model``, ``ideal`` (oracle IRM) or ``all-ones-debug`` (identity)
    :param out_dir: When set, estimates are written there as 16 kHz stereo WAVs
    """
    if mask == "model" and model is None:
        raise DataError("a trained model is required for mask='model'")
    device = torch.device(device) if device is not None else default_device()
    tubelet_depth = model.model_config.tubelet_depth if model is not None and model.model_config else None
    dataset = DenoiseDataset(clips, stats, config, tubelet_depth, training=False, seed=seed)
    if model is not None:
        model.to(device).eval()

    improvements, distances = [], []
    with torch.no_grad():
        for index in range(len(dataset)):
            item = dataset[index]
            if mask == "model":
                estimate = denoise(item["mixed"], model, vision_inputs(collate_mixtures([item]), device))
            else:
                ratio = item["irm"] if mask == "ideal" else torch.ones_like(item["irm"])
                estimate = apply_ratio_mask(ratio, item["mixed"], config.stft)
            estimate = estimate.numpy()
            target, mixed = item["target"].numpy(), item["mixed"].numpy()
            improvements.append(si_sdri(target, mixed, estimate))
            distances.append(stft_distance(target, estimate, config.stft))
            if out_dir is not None:
                path = Path(out_dir) / f"{clips[index].clip_id}.wav"
                path.parent.mkdir(parents=True, exist_ok=True)
                sf.write(path, estimate.T, SAMPLE_RATE, subtype="FLOAT")

    improvements = np.asarray(improvements)
    report = DenoiseReport(
        snr_db=config.snr_db,
        si_sdri_mean=float(improvements.mean()),
        si_sdri_ci95=ci95_half_width(improvements),
        stft_distance_mean=float(np.mean(distances)),
        n_clips=len(improvements),
        mode=config.vision,
        mask=mask,
    )
    logger.info(report.summary())
    return report
