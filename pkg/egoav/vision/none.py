from typing import Optional, Tuple

import torch

from ..config import UNetConfig
from .base import VisionInputs, abc_VisionBranch


class NoVision(abc_VisionBranch):
    """
    Audio-only ablation: the fusion maps are zeros of the pretrained width.
    """

    def __init__(self, config: Optional[UNetConfig] = None, **kwargs):
        super().__init__(config)

    @property
    def out_channels(self) -> int:
        return self.config.pretrained_fusion_channels

    def forward(self, inputs: VisionInputs, size: Tuple[int, int]) -> torch.Tensor:
        return torch.zeros(inputs.batch_size, self.out_channels, *size, device=self.device_hint(inputs))

    @staticmethod
    def device_hint(inputs: VisionInputs) -> torch.device:
        for value in (inputs.frames, inputs.video, inputs.audio):
            if value is not None:
                return value.device
        return torch.device("cpu")
