"""
masking module

The mixed audio masking protocol. Once per training batch a coin with
probability ``r`` picks *channel* mode (one full spectrogram channel hidden
per clip) over *token* mode (``round(rho * Q)`` random tokens hidden across
both channels, drawn per clip). Video tokens are never masked.

Token indices refer to the flattened audio grid: ``[0, Q/2)`` is the left
channel and ``[Q/2, Q)`` the right channel.
"""
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator

from .config import MaskingConfig
from .errors import DataError
from .tokenizer import AudioTokenGrid


NUM_AUDIO_TOKENS = 784

MaskMode = Literal["channel", "token"]
ChannelChoice = Literal["L", "R", "none"]


class MaskSpec(BaseModel):
    """
    Which audio tokens are hidden from the encoder.
    """
    mode: MaskMode
    masked_indices: List[int] = Field(default_factory=list)
    num_tokens: int = Field(NUM_AUDIO_TOKENS, ge=2)
    channel_choice: ChannelChoice = "none"

    @model_validator(mode="after")
    def check_indices(self) -> "MaskSpec":
        idx = self.masked_indices
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("masked_indices must be sorted and unique")
        if idx and (idx[0] < 0 or idx[-1] >= self.num_tokens):
            raise ValueError(f"masked index out of range [0, {self.num_tokens})")
        if self.mode == "channel":
            if self.channel_choice == "none":
                raise ValueError("channel mode needs a channel_choice")
            if idx != channel_indices(self.channel_choice, self.num_tokens):
                raise ValueError(f"channel mask must cover channel {self.channel_choice} exactly")
        return self

    @property
    def S(self) -> int:
        return len(self.masked_indices)

    def unmasked_indices(self) -> List[int]:
        hidden = set(self.masked_indices)
        return [i for i in range(self.num_tokens) if i not in hidden]

    def masked_tensor(self) -> torch.Tensor:
        return torch.tensor(self.masked_indices, dtype=torch.long)

    def unmasked_tensor(self) -> torch.Tensor:
        keep = torch.ones(self.num_tokens, dtype=torch.bool)
        keep[self.masked_tensor()] = False
        return torch.nonzero(keep, as_tuple=False).flatten()

    @classmethod
    def empty(cls, num_tokens: int = NUM_AUDIO_TOKENS) -> "MaskSpec":
        return cls(mode="token", masked_indices=[], num_tokens=num_tokens)


def channel_indices(channel: str, num_tokens: int = NUM_AUDIO_TOKENS) -> List[int]:
    half = num_tokens // 2
    start = 0 if channel == "L" else half
    return list(range(start, start + half))


def channel_mask(channel: str, num_tokens: int = NUM_AUDIO_TOKENS) -> MaskSpec:
    return MaskSpec(
        mode="channel",
        masked_indices=channel_indices(channel, num_tokens),
        num_tokens=num_tokens,
        channel_choice=channel,
    )


def token_mask(
    rng: np.random.Generator, ratio: float, num_tokens: int = NUM_AUDIO_TOKENS
) -> MaskSpec:
    count = int(round(ratio * num_tokens))
    picked = rng.choice(num_tokens, size=count, replace=False)
    return MaskSpec(mode="token", masked_indices=sorted(int(i) for i in picked), num_tokens=num_tokens)


def sample_batch_masks(
    config: MaskingConfig,
    rng: np.random.Generator,
    batch_size: int,
    num_tokens: int = NUM_AUDIO_TOKENS,
) -> List[MaskSpec]:
    """
    Draw the masks of one training batch.

    The mode is drawn once and shared by every clip; the hidden channel
    (channel mode) or the hidden indices (token mode) are drawn per clip.

    :param config: Masking frequency ``r`` and token ratio
    :param rng: The batch's generator, consumed deterministically
    :param batch_size: Clips in the batch
    :param num_tokens: Audio tokens per clip, both channels
    """
    if rng.random() < config.r:
        return [channel_mask("L" if rng.random() < 0.5 else "R", num_tokens) for _ in range(batch_size)]
    return [token_mask(rng, config.token_mask_ratio, num_tokens) for _ in range(batch_size)]


def sample_mask(
    config: MaskingConfig, rng: np.random.Generator, num_tokens: int = NUM_AUDIO_TOKENS
) -> MaskSpec:
    return sample_batch_masks(config, rng, 1, num_tokens)[0]


def finetune_mask(
    channel_choice: Literal["L", "R", "random"],
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    num_tokens: int = NUM_AUDIO_TOKENS,
) -> MaskSpec:
    """
    Full-channel mask used when finetuning on downstream tasks.

    ``"random"`` draws a channel per call while training and falls back to the
    right channel at evaluation so inference is deterministic.
    """
    if channel_choice == "random":
        if training:
            if rng is None:
                raise ValueError("a generator is required for random channel choice")
            channel_choice = "L" if rng.random() < 0.5 else "R"
        else:
            channel_choice = "R"
    return channel_mask(channel_choice, num_tokens)


@dataclass
class MaskedAudio:
    """
    Visible audio tokens and the ground truth of the hidden ones, each with
    their grid coordinates (channel, time_idx, mel_idx).
    """
    unmasked_tokens: torch.Tensor  # (Q - S) x D_a
    unmasked_coords: torch.Tensor  # (Q - S) x 3
    target_tokens: torch.Tensor  # S x D_a
    target_coords: torch.Tensor  # S x 3
    spec: MaskSpec


def apply_mask(grid: AudioTokenGrid, spec: MaskSpec) -> MaskedAudio:
    """
    Split a token grid into survivors (raster order) and targets (mask order).

    :raises DataError: If the spec does not fit the grid
    """
    if spec.num_tokens != grid.num_tokens:
        raise DataError(
            f"mask covers {spec.num_tokens} tokens but the grid has {grid.num_tokens}"
        )
    tokens = grid.flat()
    masked = spec.masked_tensor()
    keep = spec.unmasked_tensor()
    return MaskedAudio(
        unmasked_tokens=tokens[keep],
        unmasked_coords=grid.grid[keep],
        target_tokens=tokens[masked],
        target_coords=grid.grid[masked],
        spec=spec,
    )


@dataclass
class MaskedBatch:
    unmasked_tokens: torch.Tensor  # B x (Q - S) x D_a
    unmasked_coords: torch.Tensor  # B x (Q - S) x 3
    target_tokens: torch.Tensor  # B x S x D_a
    target_coords: torch.Tensor  # B x S x 3
    specs: List[MaskSpec]

    @property
    def mode(self) -> str:
        return self.specs[0].mode if self.specs else "token"


def mask_batch(tokens: torch.Tensor, coords: torch.Tensor, specs: Sequence[MaskSpec]) -> MaskedBatch:
    """
    Batched `apply_mask`.

    :param tokens: B x Q x D_a flattened audio tokens
    :param coords: Q x 3 grid shared by the batch
    :param specs: One spec per clip, all with the same S
    """
    if len(specs) != tokens.shape[0]:
        raise DataError(f"{len(specs)} masks for a batch of {tokens.shape[0]}")
    sizes = {spec.S for spec in specs}
    if len(sizes) > 1:
        raise DataError(f"masks in a batch must hide the same number of tokens, got {sorted(sizes)}")
    for spec in specs:
        if spec.num_tokens != tokens.shape[1]:
            raise DataError(f"mask covers {spec.num_tokens} tokens but clips have {tokens.shape[1]}")

    keep = torch.stack([spec.unmasked_tensor() for spec in specs]).to(tokens.device)
    masked = torch.stack([spec.masked_tensor() for spec in specs]).to(tokens.device)
    dim = tokens.shape[-1]
    coords = coords.to(tokens.device)

    return MaskedBatch(
        unmasked_tokens=torch.gather(tokens, 1, keep.unsqueeze(-1).expand(-1, -1, dim)),
        unmasked_coords=coords[keep],
        target_tokens=torch.gather(tokens, 1, masked.unsqueeze(-1).expand(-1, -1, dim)),
        target_coords=coords[masked],
        specs=list(specs),
    )
