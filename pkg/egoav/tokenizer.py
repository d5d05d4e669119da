"""
tokenizer module

Turns raw clips into model inputs:

* binaural waveforms become a pair of stats-normalized log-Mel spectrograms
  (25 ms Hann window, 10 ms hop, 128 Mel filters over 0-8000 Hz, no edge
  padding, so 1 s at 16 kHz gives 98 frames);
* video becomes tubelet tokens: 16x16 pixel patches spanning ``tubelet_depth``
  frames, raster order (time block, row, col), height zero-padded up to a
  multiple of 16;
* each spectrogram channel becomes 2x16 (time x mel) patches, time-major
  within a channel, left channel first.

Grid coordinates are pure functions of the input shapes.
"""
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchaudio
from pydantic import BaseModel, Field, field_validator

from .errors import DataError
from .logging import get_logger


logger = get_logger(__name__)

SAMPLE_RATE = 16000
MEL_WINDOW = 400
MEL_HOP = 160
N_MELS = 128
MEL_F_MIN = 0.0
MEL_F_MAX = 8000.0
LOG_FLOOR = 1e-10
VIDEO_PATCH = 16
AUDIO_PATCH = (2, 16)

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class RawClip:
    """
    One second (by default) of egocentric video plus binaural audio.

    ``frames`` is T x H x W x 3 in [0, 1]; ``waveform`` is 2 x N in [-1, 1].
    Waveforms louder than full scale are peak-normalized on construction.
    """
    frames: np.ndarray
    waveform: np.ndarray
    clip_id: str
    dataset: str = "synthetic"
    start_time: float = 0.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        waveform = np.asarray(self.waveform, dtype=np.float32)

        if frames.ndim != 4 or frames.shape[-1] != 3 or frames.shape[0] < 1:
            raise DataError(f"{self.clip_id}: expected T x H x W x 3 frames, got {frames.shape}")
        if waveform.ndim != 2 or waveform.shape[0] != 2:
            raise DataError(f"{self.clip_id}: expected 2 channels, got waveform {waveform.shape}")

        peak = float(np.max(np.abs(waveform))) if waveform.size else 0.0
        if peak > 1.0:
            logger.debug(f"{self.clip_id}: peak {peak:.3f} > 1, normalizing")
            waveform = waveform / peak

        self.frames = frames
        self.waveform = waveform

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_samples(self) -> int:
        return self.waveform.shape[-1]


class NormalizationStats(BaseModel):
    """
    Corpus-level normalization constants, persisted with checkpoints.
    """
    video_mean: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])
    video_std: List[float] = Field(default_factory=lambda: [1.0, 1.0, 1.0])
    audio_mean: float = 0.0
    audio_std: float = 1.0
    corpus_id: str = ""

    @field_validator("video_mean", "video_std")
    @classmethod
    def check_color_channels(cls, values: List[float]) -> List[float]:
        if len(values) != 3:
            raise ValueError(f"expected one value per color channel, got {len(values)}")
        return values

    @field_validator("video_std")
    @classmethod
    def check_video_std(cls, values: List[float]) -> List[float]:
        if any(v <= 0 for v in values):
            raise ValueError("video_std must be > 0")
        return values

    @field_validator("audio_std")
    @classmethod
    def check_audio_std(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("audio_std must be > 0")
        return value

    @classmethod
    def identity(cls) -> "NormalizationStats":
        return cls()

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NormalizationStats":
        return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class MelSpectrogramPair:
    left: torch.Tensor  # F_t x F_m
    right: torch.Tensor

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(
                f"left/right spectrogram shapes differ: {tuple(self.left.shape)} vs {tuple(self.right.shape)}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.left.shape)

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.left, self.right])


@dataclass
class VideoTokenGrid:
    tokens: torch.Tensor  # P x D_v
    grid: torch.Tensor  # P x 3 (t_idx, row, col)
    time_blocks: int
    rows: int
    cols: int
    height: int  # before padding

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class AudioTokenGrid:
    tokens: torch.Tensor  # 2 x Q_c x D_a
    grid: torch.Tensor  # Q x 3 (channel, time_idx, mel_idx)
    time_patches: int
    mel_patches: int
    patch: Tuple[int, int] = AUDIO_PATCH

    @property
    def tokens_per_channel(self) -> int:
        return self.tokens.shape[1]

    @property
    def num_tokens(self) -> int:
        return 2 * self.tokens.shape[1]

    def flat(self) -> torch.Tensor:
        """
        Q x D_a tokens, left channel first, matching ``grid`` row for row.
        """
        return self.tokens.reshape(-1, self.tokens.shape[-1])


@dataclass
class TokenizedClip:
    video: VideoTokenGrid
    audio: AudioTokenGrid
    clip_id: str


@lru_cache(None)
def _mel_transform() -> torchaudio.transforms.MelSpectrogram:
    return torchaudio.transforms.MelSpectrogram(
        sample_rate=SAMPLE_RATE,
        n_fft=MEL_WINDOW,
        win_length=MEL_WINDOW,
        hop_length=MEL_HOP,
        f_min=MEL_F_MIN,
        f_max=MEL_F_MAX,
        n_mels=N_MELS,
        center=False,
        power=2.0,
    )


def mel_filterbank() -> torch.Tensor:
    """
    The (MEL_WINDOW // 2 + 1) x N_MELS filterbank used by `compute_mel_pair`.
    """
    return _mel_transform().mel_scale.fb


def num_mel_frames(num_samples: int) -> int:
    return 1 + (num_samples - MEL_WINDOW) // MEL_HOP


def log_mel(waveform: ArrayLike) -> torch.Tensor:
    """
    Unnormalized 2 x F_t x F_m log-Mel spectrogram.
    """
    wave = torch.as_tensor(np.asarray(waveform), dtype=torch.float32)
    if wave.ndim != 2 or wave.shape[0] != 2:
        raise DataError(f"expected 2 channels, got waveform of shape {tuple(wave.shape)}")
    if wave.shape[-1] < MEL_WINDOW:
        raise DataError(
            f"clip too short: {wave.shape[-1]} samples, need at least {MEL_WINDOW}"
        )

    power = _mel_transform()(wave)  # 2 x n_mels x frames
    return torch.log(power + LOG_FLOOR).transpose(-1, -2).contiguous()


def compute_mel_pair(waveform: ArrayLike, stats: NormalizationStats) -> MelSpectrogramPair:
    """
    Compute the normalized log-Mel spectrogram of each channel.

    :param waveform: 2 x N samples in [-1, 1] at 16 kHz
    :param stats: Corpus normalization stats
    :return: The left/right pair, F_t = 1 + floor((N - 400) / 160) frames each
    :raises DataError: If the input is not stereo or shorter than one window
    """
    mel = (log_mel(waveform) - stats.audio_mean) / stats.audio_std
    return MelSpectrogramPair(left=mel[0], right=mel[1])


def normalize_frames(frames: ArrayLike, stats: NormalizationStats) -> torch.Tensor:
    frames = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    mean = torch.tensor(stats.video_mean, dtype=torch.float32)
    std = torch.tensor(stats.video_std, dtype=torch.float32)
    return (frames - mean) / std


def tokenize_video(
    frames: ArrayLike, patch_size: int = VIDEO_PATCH, tubelet_depth: Optional[int] = None
) -> VideoTokenGrid:
    """
    Split a T x H x W x 3 clip into non-overlapping tubelets.

    Each token flattens a (depth, patch, patch, 3) block in that order. The
    height is zero-padded at the bottom up to a multiple of ``patch_size``.

    :param frames: The clip
    :param patch_size: Spatial patch side
    :param tubelet_depth: Frames per tubelet, defaults to all frames
    :raises DataError: On an empty clip, a width not divisible by the patch
        size, or a frame count not divisible by the depth
    """
    x = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames)
    x = x.to(torch.float32)
    if x.ndim != 4 or x.numel() == 0:
        raise DataError(f"empty or malformed clip of shape {tuple(x.shape)}")

    T, H, W, C = x.shape
    depth = tubelet_depth or T
    if W % patch_size:
        raise DataError(f"width {W} is not divisible by patch size {patch_size}")
    if T % depth:
        raise DataError(f"{T} frames are not divisible by tubelet depth {depth}")

    rows = math.ceil(H / patch_size)
    pad = rows * patch_size - H
    if pad:
        x = F.pad(x, (0, 0, 0, 0, 0, pad))  # bottom rows

    cols = W // patch_size
    blocks = T // depth
    tokens = (
        x.reshape(blocks, depth, rows, patch_size, cols, patch_size, C)
        .permute(0, 2, 4, 1, 3, 5, 6)
        .reshape(blocks * rows * cols, depth * patch_size * patch_size * C)
    )
    return VideoTokenGrid(
        tokens=tokens,
        grid=video_grid(blocks, rows, cols),
        time_blocks=blocks,
        rows=rows,
        cols=cols,
        height=H,
    )


@lru_cache(None)
def _video_grid(blocks: int, rows: int, cols: int) -> torch.Tensor:
    t, r, c = torch.meshgrid(
        torch.arange(blocks), torch.arange(rows), torch.arange(cols), indexing="ij"
    )
    return torch.stack([t, r, c], dim=-1).reshape(-1, 3)


def video_grid(blocks: int, rows: int, cols: int) -> torch.Tensor:
    return _video_grid(blocks, rows, cols).clone()


def untokenize_video(grid: VideoTokenGrid, patch_size: int = VIDEO_PATCH) -> torch.Tensor:
    """
    Inverse of `tokenize_video`, returning the unpadded T x H x W x 3 clip.
    """
    depth = grid.tokens.shape[1] // (patch_size * patch_size * 3)
    x = (
        grid.tokens.reshape(grid.time_blocks, grid.rows, grid.cols, depth, patch_size, patch_size, 3)
        .permute(0, 3, 1, 4, 2, 5, 6)
        .reshape(grid.time_blocks * depth, grid.rows * patch_size, grid.cols * patch_size, 3)
    )
    return x[:, : grid.height]


def tokenize_audio(pair: MelSpectrogramPair, patch: Tuple[int, int] = AUDIO_PATCH) -> AudioTokenGrid:
    """
    Split both spectrogram channels into non-overlapping (time, mel) patches.

    :raises DataError: If the spectrogram is not divisible by the patch
    """
    spec = pair.stacked()
    _, Ft, Fm = spec.shape
    pt, pm = patch
    if Ft % pt or Fm % pm:
        raise DataError(
            f"spectrogram {Ft}x{Fm} is not divisible by patch {pt}x{pm}: "
            f"pad time by {(-Ft) % pt} frames and mel by {(-Fm) % pm} bins"
        )

    nt, nm = Ft // pt, Fm // pm
    tokens = (
        spec.reshape(2, nt, pt, nm, pm)
        .permute(0, 1, 3, 2, 4)
        .reshape(2, nt * nm, pt * pm)
    )
    return AudioTokenGrid(
        tokens=tokens, grid=audio_grid(nt, nm), time_patches=nt, mel_patches=nm, patch=patch
    )


def audio_grid(time_patches: int, mel_patches: int) -> torch.Tensor:
    ch, t, m = torch.meshgrid(
        torch.arange(2), torch.arange(time_patches), torch.arange(mel_patches), indexing="ij"
    )
    return torch.stack([ch, t, m], dim=-1).reshape(-1, 3)


def detokenize_audio(grid: AudioTokenGrid) -> MelSpectrogramPair:
    pt, pm = grid.patch
    spec = (
        grid.tokens.reshape(2, grid.time_patches, grid.mel_patches, pt, pm)
        .permute(0, 1, 3, 2, 4)
        .reshape(2, grid.time_patches * pt, grid.mel_patches * pm)
    )
    return MelSpectrogramPair(left=spec[0], right=spec[1])


def tokenize_clip(
    clip: RawClip, stats: NormalizationStats, tubelet_depth: Optional[int] = None
) -> TokenizedClip:
    """
    Normalize and tokenize both modalities of a clip.
    """
    video = tokenize_video(normalize_frames(clip.frames, stats), tubelet_depth=tubelet_depth)
    audio = tokenize_audio(compute_mel_pair(clip.waveform, stats))
    return TokenizedClip(video=video, audio=audio, clip_id=clip.clip_id)


@dataclass
class RunningMoments:
    """
    Single-pass mean/variance accumulator over the last axis of samples.

    Partial accumulators merge associatively, so workers can each reduce a
    shard and the results combine in any order.
    """
    count: int = 0
    mean: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None

    @classmethod
    def of(cls, values: np.ndarray) -> "RunningMoments":
        """
        :param values: n samples, shape (n,) or (n, k) for k independent features
        """
        values = np.asarray(values, dtype=np.float64)
        if values.shape[0] == 0:
            return cls()
        mean = values.mean(axis=0)
        return cls(count=values.shape[0], mean=mean, m2=((values - mean) ** 2).sum(axis=0))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / count)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / count)
        return RunningMoments(count=count, mean=mean, m2=m2)

    def update(self, values: np.ndarray) -> "RunningMoments":
        merged = self.merge(RunningMoments.of(values))
        self.count, self.mean, self.m2 = merged.count, merged.mean, merged.m2
        return self

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def accumulate_clip(clip: RawClip) -> Tuple[RunningMoments, RunningMoments]:
    """
    Video (per color) and audio (all Mel values) moments of one clip.
    """
    video = RunningMoments.of(clip.frames.reshape(-1, 3))
    audio = RunningMoments.of(log_mel(clip.waveform).numpy().reshape(-1))
    return video, audio


def stats_from_moments(
    video: RunningMoments, audio: RunningMoments, corpus_id: str = ""
) -> NormalizationStats:
    """
    :raises DataError: If nothing was accumulated or the Mel values are constant
    """
    if audio.count == 0 or video.count == 0:
        raise DataError("cannot compute normalization stats of an empty corpus")

    audio_std = float(audio.std)
    if not audio_std > 0:
        raise DataError(f"degenerate corpus: constant Mel value {float(audio.mean):.6g}")

    video_std = [float(s) for s in video.std]
    if any(s <= 0 for s in video_std):
        logger.warning_once("constant color channel in corpus, using unit video std")
        video_std = [s if s > 0 else 1.0 for s in video_std]

    return NormalizationStats(
        video_mean=[float(m) for m in video.mean],
        video_std=video_std,
        audio_mean=float(audio.mean),
        audio_std=audio_std,
        corpus_id=corpus_id,
    )


def compute_norm_stats(clips: Iterable[RawClip], corpus_id: str = "") -> NormalizationStats:
    """
    Streaming corpus statistics over every Mel value and every pixel.

    :param clips: Any iterable of clips, consumed once
    :param corpus_id: Recorded in the stats
    :raises DataError: On an empty iterator or a degenerate corpus
    """
    video, audio = RunningMoments(), RunningMoments()
    for clip in clips:
        clip_video, clip_audio = accumulate_clip(clip)
        video = video.merge(clip_video)
        audio = audio.merge(clip_audio)

    stats = stats_from_moments(video, audio, corpus_id=corpus_id)
    logger.info(
        f"Normalization stats over {audio.count} Mel values: "
        f"mean={stats.audio_mean:.4f} std={stats.audio_std:.4f}"
    )
    return stats


def compute_norm_stats_parallel(
    clips: Sequence[RawClip], workers: int = 0, corpus_id: str = ""
) -> NormalizationStats:
    """
    `compute_norm_stats` with per-clip reductions spread over a process pool.
    """
    if workers <= 1:
        return compute_norm_stats(clips, corpus_id=corpus_id)

    video, audio = RunningMoments(), RunningMoments()
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for clip_video, clip_audio in pool.map(accumulate_clip, clips):
            video = video.merge(clip_video)
            audio = audio.merge(clip_audio)
    return stats_from_moments(video, audio, corpus_id=corpus_id)
