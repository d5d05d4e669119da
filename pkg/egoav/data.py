"""
data module

Torch datasets over in-memory or manifest-backed clips. Randomness inside
``__getitem__`` comes from a generator derived from ``(seed, epoch, index)``,
so loader output does not depend on the number of workers.
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset

from .common import derive_rng
from .tokenizer import NormalizationStats, RawClip, tokenize_clip


Transform = Callable[[RawClip, np.random.Generator], RawClip]


@dataclass
class ClipItem:
    video: torch.Tensor  # P x D_v
    audio: torch.Tensor  # Q x D_a
    video_coords: torch.Tensor
    audio_coords: torch.Tensor
    clip_id: str
    index: int


@dataclass
class ClipBatch:
    video: torch.Tensor  # B x P x D_v
    audio: torch.Tensor  # B x Q x D_a
    video_coords: torch.Tensor  # P x 3
    audio_coords: torch.Tensor  # Q x 3
    clip_ids: List[str]
    indices: List[int]

    def __len__(self) -> int:
        return len(self.clip_ids)

    def to(self, device) -> "ClipBatch":
        self.video = self.video.to(device)
        self.audio = self.audio.to(device)
        self.video_coords = self.video_coords.to(device)
        self.audio_coords = self.audio_coords.to(device)
        return self


class ClipDataset(Dataset):
    """
    Tokenized clips for pretraining and evaluation.

    :param clips: Any indexable collection of clips
    :param stats: Corpus normalization stats
    :param tubelet_depth: Frames per tubelet
    :param transform: Optional ``(clip, rng) -> clip`` augmentation
    :param seed: Root seed of the per-item generators
    """

    def __init__(
        self,
        clips: Sequence[RawClip],
        stats: NormalizationStats,
        tubelet_depth: Optional[int] = None,
        transform: Optional[Transform] = None,
        seed: int = 0,
    ):
        self.clips = clips
        self.stats = stats
        self.tubelet_depth = tubelet_depth
        self.transform = transform
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, index: int) -> ClipItem:
        clip = self.clips[index]
        if self.transform is not None:
            clip = self.transform(clip, derive_rng(self.seed, self.epoch, index))
        tokens = tokenize_clip(clip, self.stats, tubelet_depth=self.tubelet_depth)
        return ClipItem(
            video=tokens.video.tokens,
            audio=tokens.audio.flat(),
            video_coords=tokens.video.grid,
            audio_coords=tokens.audio.grid,
            clip_id=clip.clip_id,
            index=index,
        )


def collate_clips(items: Sequence[ClipItem]) -> ClipBatch:
    return ClipBatch(
        video=torch.stack([item.video for item in items]),
        audio=torch.stack([item.audio for item in items]),
        video_coords=items[0].video_coords,
        audio_coords=items[0].audio_coords,
        clip_ids=[item.clip_id for item in items],
        indices=[item.index for item in items],
    )


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    """
    Shuffling generator of one epoch.
    """
    generator = torch.Generator()
    generator.manual_seed(int(derive_rng(seed, epoch).integers(2**62)))
    return generator


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """
    A random permutation with no fixed point (identity for n < 2).
    """
    if n < 2:
        return np.arange(n)
    shift = rng.integers(1, n)
    order = rng.permutation(n)
    perm = np.empty(n, dtype=np.int64)
    perm[order] = order[(np.arange(n) + shift) % n]
    return perm
