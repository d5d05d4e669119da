from typing import Optional, Tuple

import torch
import torch.nn as nn

from ..config import ModelConfig, UNetConfig
from ..errors import ConfigError, DataError
from ..model import SpatialEncoder, SpatialMAE
from .base import VisionInputs, abc_VisionBranch, resize_map


def scatter_grid(features: torch.Tensor, coords: torch.Tensor, shape: Tuple[int, int]) -> torch.Tensor:
    """
    Place token features on a 2D grid, averaging tokens that share a cell.

    :param features: B x N x C
    :param coords: N x 2 or B x N x 2 integer (row, col) cells
    :param shape: Grid (rows, cols)
    :return: B x C x rows x cols
    """
    B, N, C = features.shape
    rows, cols = shape
    if coords.ndim == 2:
        coords = coords[None].expand(B, -1, -1)
    flat = (coords[..., 0] * cols + coords[..., 1]).to(features.device)

    grid = features.new_zeros(B, rows * cols, C)
    grid.scatter_add_(1, flat[..., None].expand(-1, -1, C), features)
    counts = features.new_zeros(B, rows * cols)
    counts.scatter_add_(1, flat, features.new_ones(B, N))
    grid = grid / counts.clamp_min(1)[..., None]
    return grid.transpose(1, 2).reshape(B, C, rows, cols)


class PretrainedVision(abc_VisionBranch):
    """
    Fuses the pretrained encoder's features at the bottleneck.

    Video features are laid out on the tubelet grid (time blocks averaged),
    audio features on the (time, mel) patch grid of the visible channel. Both
    are projected to ``fusion_dim`` channels, pass through their fusion
    convolution, and are resized to the bottleneck.

    :param model_config: Architecture of the encoder
    """

    def __init__(self, config: Optional[UNetConfig] = None, model_config: Optional[ModelConfig] = None, **kwargs):
        super().__init__(config)
        if model_config is None:
            raise ConfigError("the pretrained vision branch needs a model config")
        cfg = self.config
        self.encoder: SpatialEncoder = SpatialMAE(model_config).encoder
        self.project = nn.Linear(model_config.enc_dim, cfg.fusion_dim)
        self.video_conv = nn.Sequential(
            nn.Conv2d(cfg.fusion_dim, cfg.video_fusion_channels, kernel_size=(3, 4), stride=(2, 3), padding=(1, 2)),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.BatchNorm2d(cfg.video_fusion_channels),
        )
        self.audio_conv = nn.Sequential(
            nn.Conv2d(cfg.fusion_dim, cfg.audio_fusion_channels, kernel_size=(1, 7), stride=(1, 6), padding=0),
            nn.LeakyReLU(cfg.leaky_slope),
            nn.BatchNorm2d(cfg.audio_fusion_channels),
        )

    @property
    def out_channels(self) -> int:
        return self.config.pretrained_fusion_channels

    def pretrained_parameters(self):
        return list(self.encoder.parameters())

    def feature_maps(self, inputs: VisionInputs) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Projected video (B x C x rows x cols) and audio (B x C x time x mel) maps.
        """
        if inputs.video is None or inputs.audio is None:
            raise DataError("the pretrained vision branch needs video and audio tokens")
        enc = self.encoder(inputs.video, inputs.video_coords, inputs.audio, inputs.audio_coords)
        f_v = self.project(enc.f_v)
        f_a = self.project(enc.f_a)

        v_coords = inputs.video_coords
        blocks, rows, cols = (int(c) + 1 for c in v_coords.max(dim=0).values)
        video = scatter_grid(f_v, v_coords[:, 1:], (rows, cols))

        a_coords = inputs.audio_coords[..., 1:]
        times, mels = (int(c) + 1 for c in a_coords.reshape(-1, 2).max(dim=0).values)
        audio = scatter_grid(f_a, a_coords, (times, mels))
        return video, audio

    def forward(self, inputs: VisionInputs, size: Tuple[int, int]) -> torch.Tensor:
        video, audio = self.feature_maps(inputs)
        video = resize_map(self.video_conv(video), size)
        audio = resize_map(self.audio_conv(audio), size)
        return torch.cat([video, audio], dim=1)
