"""
base module for U-Net vision branches
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import UNetConfig


@dataclass
class VisionInputs:
    """
    What a vision branch may look at for one batch of target clips.
    """
    frames: Optional[torch.Tensor] = None  # B x T x H x W x 3, normalized
    video: Optional[torch.Tensor] = None  # B x P x D_v tubelet tokens
    video_coords: Optional[torch.Tensor] = None  # P x 3
    audio: Optional[torch.Tensor] = None  # B x K x D_a visible mixture tokens
    audio_coords: Optional[torch.Tensor] = None  # B x K x 3

    @property
    def batch_size(self) -> int:
        for value in (self.frames, self.video, self.audio):
            if value is not None:
                return value.shape[0]
        raise ValueError("empty vision inputs")


def resize_map(x: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class abc_VisionBranch(nn.Module, ABC):
    def __init__(self, config: Optional[UNetConfig] = None):
        """Initialize a base vision branch

        :param config: U-Net configuration, defaults to None
        :type config: Optional[UNetConfig], optional
        """
        super().__init__()
        self.config = config if config is not None else UNetConfig()

    @property
    @abstractmethod
    def out_channels(self) -> int:
        """
        Channels this branch concatenates to the bottleneck.
        """

    @abstractmethod
    def forward(self, inputs: VisionInputs, size: Tuple[int, int]) -> torch.Tensor:
        """
        Produce fusion maps at the bottleneck's spatial size.

        Args:
            inputs (VisionInputs): The batch's visual (and encoder) inputs.
            size (Tuple[int, int]): Bottleneck (height, width).

        Returns:
            torch.Tensor: B x out_channels x height x width maps.
        """
        pass

    def pretrained_parameters(self):
        """
        Parameters trained at the reduced finetuning learning rate.
        """
        return []
