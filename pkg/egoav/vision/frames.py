from typing import Optional, Tuple

import torch
import torch.nn as nn
import torchvision

from ..config import UNetConfig
from ..errors import DataError
from .base import VisionInputs, abc_VisionBranch, resize_map


class FramesVision(abc_VisionBranch):
    """
    Raw-frame baseline: a ResNet-18 trunk embeds every frame, a (1, 4)
    convolution reduces each frame to ``frame_channels`` maps, and the frames
    are stacked along the channel axis.

    :param num_frames: Frames per clip, fixes the output width
    """

    def __init__(self, config: Optional[UNetConfig] = None, num_frames: int = 5, **kwargs):
        super().__init__(config)
        self.num_frames = num_frames
        resnet = torchvision.models.resnet18(weights=None)
        self.trunk = nn.Sequential(*list(resnet.children())[:-2])
        self.reduce = nn.Sequential(
            nn.Conv2d(512, self.config.frame_channels, kernel_size=(1, 4), padding="same"),
            nn.LeakyReLU(self.config.leaky_slope),
            nn.BatchNorm2d(self.config.frame_channels),
        )

    @property
    def out_channels(self) -> int:
        return self.config.frame_channels * self.num_frames

    def forward(self, inputs: VisionInputs, size: Tuple[int, int]) -> torch.Tensor:
        frames = inputs.frames
        if frames is None:
            raise DataError("the frames vision branch needs frames")
        B, T = frames.shape[:2]
        if T != self.num_frames:
            raise DataError(f"expected {self.num_frames} frames per clip, got {T}")

        x = frames.reshape(B * T, *frames.shape[2:]).permute(0, 3, 1, 2)
        x = self.reduce(self.trunk(x))
        x = resize_map(x, size)
        return x.reshape(B, T * x.shape[1], *size)
