"""
model module

Spatial audio-visual masked autoencoder.

Encoder: linear patch embeddings, separate video and audio stacks, then a
shared stack over ``[video | visible audio]``. Decoder: a shared stack over the
projected features plus one learnable mask token per hidden audio position,
then an audio-only stack whose outputs at hidden positions are mapped back to
spectrogram patches.

Every stack is followed by a LayerNorm. Positions enter through fixed
sinusoids (3 axes for video, time and mel for audio), the ear through a
learnable channel embedding and the modality through a learnable modality
embedding; encoder and decoder keep separate tables.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import ConfigError, DataError
from .logging import get_logger
from .masking import MaskedBatch


logger = get_logger(__name__)

VIDEO = 0
AUDIO = 1


def sincos_embedding(coords: torch.Tensor, dim: int, temperature: float = 10000.0) -> torch.Tensor:
    """
    Fixed sinusoidal embedding of integer grid coordinates.

    The embedding is split evenly across the coordinate axes; within an axis,
    entries alternate ``sin(x * w_i), cos(x * w_i)`` with
    ``w_i = temperature ** (-2i / d_axis)``.

    :param coords: (..., k) coordinates, one column per axis
    :param dim: Embedding size, divisible by 2k
    :return: (..., dim) embeddings, float32
    :raises ConfigError: If ``dim`` is not divisible by ``2 * k``
    """
    axes = coords.shape[-1]
    if dim % (2 * axes):
        raise ConfigError(f"embedding dim {dim} is not divisible by 2 x {axes} axes")

    d_axis = dim // axes
    omega = torch.arange(d_axis // 2, dtype=torch.float64, device=coords.device)
    omega = temperature ** (-2.0 * omega / d_axis)

    out = torch.einsum("...k,f->...kf", coords.to(torch.float64), omega)
    out = torch.stack([out.sin(), out.cos()], dim=-1)  # (..., k, d_axis/2, 2)
    return out.reshape(*coords.shape[:-1], dim).to(torch.float32)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        weights = (q @ k.transpose(-2, -1) * self.scale).softmax(dim=-1)  # B x h x N x N
        out = (weights @ v).transpose(1, 2).reshape(B, N, D)
        out = self.proj(out)
        return (out, weights) if return_weights else (out, None)


class Block(nn.Module):
    """
    Pre-norm transformer block.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        out, weights = self.attn(self.norm1(x), return_weights=return_weights)
        x = x + out
        x = x + self.mlp(self.norm2(x))
        return x, weights


def _stack(depth: int, dim: int, heads: int, mlp_ratio: float) -> nn.ModuleList:
    return nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])


def _run(blocks: nn.ModuleList, x: torch.Tensor, keep: Optional[List] = None) -> torch.Tensor:
    for blk in blocks:
        x, weights = blk(x, return_weights=keep is not None)
        if keep is not None:
            keep.append(weights)
    return x


@dataclass
class EncoderOutput:
    """
    Shared-encoder features, rows ordered ``[video tokens | visible audio]``.
    """
    f_av: torch.Tensor  # B x (P + Q - S) x enc_dim
    num_video: int
    video_coords: torch.Tensor  # P x 3
    audio_coords: torch.Tensor  # B x (Q - S) x 3
    masked_coords: Optional[torch.Tensor] = None  # B x S x 3
    attention: List[torch.Tensor] = field(default_factory=list)

    @property
    def f_v(self) -> torch.Tensor:
        return self.f_av[:, : self.num_video]

    @property
    def f_a(self) -> torch.Tensor:
        return self.f_av[:, self.num_video :]


class SpatialEncoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.enc_dim

        self.video_proj = nn.Linear(config.video_token_dim, dim)
        self.audio_proj = nn.Linear(config.audio_token_dim, dim)
        self.channel_embed = nn.Parameter(torch.zeros(2, dim))
        self.modality_embed = nn.Parameter(torch.zeros(2, dim))

        self.video_blocks = _stack(config.enc_layers_uni, dim, config.enc_heads, config.mlp_ratio)
        self.video_norm = nn.LayerNorm(dim)
        self.audio_blocks = _stack(config.enc_layers_uni, dim, config.enc_heads, config.mlp_ratio)
        self.audio_norm = nn.LayerNorm(dim)
        self.av_blocks = _stack(config.enc_layers_shared, dim, config.enc_heads, config.mlp_ratio)
        self.av_norm = nn.LayerNorm(dim)

    def check_inputs(self, video: torch.Tensor, audio: torch.Tensor) -> None:
        if video.shape[-1] != self.config.video_token_dim:
            raise DataError(
                f"video token dim {video.shape[-1]} != configured {self.config.video_token_dim}"
            )
        if audio.shape[-1] != self.config.audio_token_dim:
            raise DataError(
                f"audio token dim {audio.shape[-1]} != configured {self.config.audio_token_dim}"
            )

    def forward(
        self,
        video: torch.Tensor,
        video_coords: torch.Tensor,
        audio: torch.Tensor,
        audio_coords: torch.Tensor,
        return_attention: bool = False,
    ) -> EncoderOutput:
        """
        :param video: B x P x D_v tubelet tokens
        :param video_coords: P x 3 (t, row, col)
        :param audio: B x K x D_a visible audio tokens
        :param audio_coords: B x K x 3 (channel, time, mel)
        :param return_attention: Keep the shared-encoder attention weights
        """
        self.check_inputs(video, audio)
        dim = self.config.enc_dim
        dtype = self.video_proj.weight.dtype

        pos_v = sincos_embedding(video_coords, dim).to(dtype)
        pos_a = sincos_embedding(audio_coords[..., 1:], dim).to(dtype)
        chan = self.channel_embed[audio_coords[..., 0]]

        v = self.video_norm(_run(self.video_blocks, self.video_proj(video) + pos_v))
        a = self.audio_proj(audio) + pos_a + chan
        if a.shape[1]:
            a = self.audio_norm(_run(self.audio_blocks, a))

        v = v + pos_v + self.modality_embed[VIDEO]
        a = a + pos_a + chan + self.modality_embed[AUDIO]

        attention: List[torch.Tensor] = []
        x = torch.cat([v, a], dim=1)
        x = self.av_norm(_run(self.av_blocks, x, attention if return_attention else None))
        return EncoderOutput(
            f_av=x,
            num_video=video.shape[1],
            video_coords=video_coords,
            audio_coords=audio_coords,
            attention=attention,
        )


class SpatialDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        dim = config.dec_dim

        self.decoder_embed = nn.Linear(config.enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.channel_embed = nn.Parameter(torch.zeros(2, dim))
        self.modality_embed = nn.Parameter(torch.zeros(2, dim))

        self.av_blocks = _stack(config.dec_layers_shared, dim, config.dec_heads, config.mlp_ratio)
        self.av_norm = nn.LayerNorm(dim)
        self.audio_blocks = _stack(config.dec_layers_audio, dim, config.dec_heads, config.mlp_ratio)
        self.audio_norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, config.audio_token_dim)

    def forward(self, enc: EncoderOutput) -> torch.Tensor:
        """
        Predict the hidden audio patches.

        :return: B x S x D_a predictions in mask order
        :raises DataError: If the encoder output carries no mask
        """
        if enc.masked_coords is None:
            raise DataError("encoder output carries no MaskSpec, cannot decode")

        dim = self.config.dec_dim
        P = enc.num_video
        x = self.decoder_embed(enc.f_av)
        B, _, _ = x.shape
        S = enc.masked_coords.shape[1]
        dtype = x.dtype

        audio_coords = torch.cat([enc.audio_coords, enc.masked_coords], dim=1)
        pos_v = sincos_embedding(enc.video_coords, dim).to(dtype)
        pos_a = sincos_embedding(audio_coords[..., 1:], dim).to(dtype)
        chan = self.channel_embed[audio_coords[..., 0]]

        mask_tokens = self.mask_token.expand(B, S, dim)
        v = x[:, :P] + pos_v + self.modality_embed[VIDEO]
        a = torch.cat([x[:, P:], mask_tokens], dim=1) + pos_a + chan + self.modality_embed[AUDIO]

        h = self.av_norm(_run(self.av_blocks, torch.cat([v, a], dim=1)))
        h_a = h[:, P:] + pos_a + chan
        h_a = self.audio_norm(_run(self.audio_blocks, h_a))
        return self.head(h_a[:, h_a.shape[1] - S :])


def masked_mse(
    pred: torch.Tensor,
    target: torch.Tensor,
    per_element: bool = False,
    norm_target: bool = False,
) -> torch.Tensor:
    """
    Mean over masked tokens of the summed squared error over a token's values.

    :param pred: (..., S, D_a) predictions
    :param target: (..., S, D_a) ground truth
    :param per_element: Average over the D_a values instead of summing
    :param norm_target: Normalize each target patch by its own mean/std
    :raises DataError: If no token is masked or shapes differ
    """
    if pred.shape != target.shape:
        raise DataError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if pred.shape[-2] == 0:
        raise DataError("no masked tokens")

    if norm_target:
        mean = target.mean(dim=-1, keepdim=True)
        var = target.var(dim=-1, keepdim=True)
        target = (target - mean) / (var + 1.0e-6) ** 0.5

    err = (pred - target) ** 2
    err = err.mean(dim=-1) if per_element else err.sum(dim=-1)
    return err.mean()


class SpatialMAE(nn.Module):
    """
    Encoder + decoder, initialized deterministically from ``config.seed``.

    :param config: Architecture hyperparameters
    :type config: ModelConfig
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = SpatialEncoder(config)
            self.decoder = SpatialDecoder(config)
            self.initialize_weights()

    def initialize_weights(self):
        self.apply(self._init_weights)
        for table in (
            self.encoder.channel_embed,
            self.encoder.modality_embed,
            self.decoder.channel_embed,
            self.decoder.modality_embed,
        ):
            nn.init.trunc_normal_(table, std=0.02, a=-0.04, b=0.04)
        nn.init.normal_(self.decoder.mask_token, std=0.02)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.constant_(m.bias, 0)
        elif isinstance(m, nn.LayerNorm):
            nn.init.constant_(m.bias, 0)
            nn.init.constant_(m.weight, 1.0)

    def encode(
        self,
        video: torch.Tensor,
        video_coords: torch.Tensor,
        audio: torch.Tensor,
        audio_coords: torch.Tensor,
        masked_coords: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncoderOutput:
        out = self.encoder(video, video_coords, audio, audio_coords, return_attention=return_attention)
        out.masked_coords = masked_coords
        return out

    def decode(self, enc: EncoderOutput) -> torch.Tensor:
        return self.decoder(enc)

    def loss(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return masked_mse(
            pred,
            target,
            per_element=self.config.loss_per_element,
            norm_target=self.config.norm_pix_loss,
        )

    def forward(
        self, video: torch.Tensor, video_coords: torch.Tensor, batch: MaskedBatch
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        One inpainting pass.

        :param video: B x P x D_v tubelet tokens
        :param video_coords: P x 3
        :param batch: Visible and target audio tokens
        :return: (loss, predictions)
        """
        enc = self.encode(
            video,
            video_coords,
            batch.unmasked_tokens,
            batch.unmasked_coords,
            masked_coords=batch.target_coords,
        )
        pred = self.decode(enc)
        return self.loss(pred, batch.target_tokens), pred

    def attention_maps(
        self,
        video: torch.Tensor,
        video_coords: torch.Tensor,
        audio: torch.Tensor,
        audio_coords: torch.Tensor,
        layer_idx: int = -1,
    ) -> torch.Tensor:
        """
        Where the shared encoder's audio queries look in the image.

        Attention weights of one shared-encoder layer are averaged over heads;
        the audio-query to video-key block is summed over queries, averaged
        over tubelet time blocks and divided by its maximum.

        :param layer_idx: Shared-encoder layer, negative indices count from the end
        :return: B x rows x cols maps in [0, 1]
        :raises ConfigError: On an invalid layer index
        :raises DataError: If no audio token is visible
        """
        layers = self.config.enc_layers_shared
        if not -layers <= layer_idx < layers:
            raise ConfigError(f"invalid layer {layer_idx}: the shared encoder has {layers} layers")
        if audio.shape[1] == 0:
            raise DataError("attention maps need at least one visible audio token")

        with torch.no_grad():
            enc = self.encode(video, video_coords, audio, audio_coords, return_attention=True)

        P = enc.num_video
        weights = enc.attention[layer_idx].mean(dim=1)  # B x N x N
        scores = weights[:, P:, :P].sum(dim=1)  # B x P

        blocks, rows, cols = (int(c) + 1 for c in video_coords.max(dim=0).values)
        maps = scores.reshape(-1, blocks, rows, cols).mean(dim=1)
        peak = maps.flatten(1).max(dim=1).values.clamp_min(torch.finfo(maps.dtype).tiny)
        return maps / peak[:, None, None]
