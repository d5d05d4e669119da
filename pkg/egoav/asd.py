"""
asd module

Active speaker detection on top of the pretrained audio-visual encoder.

A single-layer transformer decoder turns the encoder features of a clip into
one feature per frame, using sinusoidal frame-index embeddings as queries.
A minimal head scores each face track per frame from its crops, its boxes
and the fused clip feature. Scores are evaluated with pooled frame-level
average precision.
"""
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import average_precision_score
from torch.utils.data import DataLoader, Dataset
from tqdm.auto import tqdm

from .checkpoint import checkpoint_config, checkpoint_stats, load_checkpoint, save_checkpoint
from .common import derive_rng
from .config import ASDConfig, FusionConfig, ModelConfig
from .errors import DataError, NonFiniteLossError
from .logging import get_logger
from .masking import channel_mask
from .metrics import MetricsWriter
from .model import EncoderOutput, SpatialEncoder, SpatialMAE, sincos_embedding
from .pretrainer import default_device, load_pretrained
from .tokenizer import NormalizationStats, RawClip, tokenize_clip


logger = get_logger(__name__)


@dataclass
class FaceTrack:
    """
    One face over the frames of one clip.

    ``crops`` is T x S x S x 3 in [0, 1], ``bboxes`` T x 4 normalized
    (x, y, w, h), ``labels`` T values in {0, 1} or None when unlabeled.
    """
    clip_id: str
    face_id: str
    crops: np.ndarray
    bboxes: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.crops = np.asarray(self.crops, dtype=np.float32)
        self.bboxes = np.asarray(self.bboxes, dtype=np.float32)
        T = self.crops.shape[0]
        if self.bboxes.shape != (T, 4):
            raise DataError(
                f"track {self.clip_id}/{self.face_id}: {T} crops but bboxes of shape {self.bboxes.shape}"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (T,):
                raise DataError(
                    f"track {self.clip_id}/{self.face_id}: {T} crops but {self.labels.shape[0]} labels"
                )

    @property
    def num_frames(self) -> int:
        return self.crops.shape[0]


def crop_face(frame: np.ndarray, bbox: Sequence[float], size: int) -> np.ndarray:
    """
    Cut a normalized (x, y, w, h) box out of an H x W x 3 frame and resize it
    to size x size.
    """
    H, W, _ = frame.shape
    x, y, w, h = bbox
    x0, y0 = int(np.clip(np.floor(x * W), 0, W - 1)), int(np.clip(np.floor(y * H), 0, H - 1))
    x1, y1 = int(np.clip(np.ceil((x + w) * W), x0 + 1, W)), int(np.clip(np.ceil((y + h) * H), y0 + 1, H))
    patch = torch.from_numpy(np.ascontiguousarray(frame[y0:y1, x0:x1])).permute(2, 0, 1)[None]
    patch = F.interpolate(patch, size=(size, size), mode="bilinear", align_corners=False)
    return patch[0].permute(1, 2, 0).numpy()


def tracks_from_labels(clip: RawClip, labels: Dict, crop_size: int = 112) -> List[FaceTrack]:
    """
    Build one track per speaker from a labels document
    ``{frames: [{speakers: [{id, bbox, active}]}]}``.
    """
    frames = labels["frames"]
    if len(frames) != clip.num_frames:
        raise DataError(f"{clip.clip_id}: {clip.num_frames} frames but {len(frames)} label frames")

    per_face: Dict[str, List[Dict]] = {}
    for frame in frames:
        for speaker in frame["speakers"]:
            per_face.setdefault(str(speaker["id"]), []).append(speaker)

    tracks = []
    for face_id, entries in sorted(per_face.items()):
        if len(entries) != clip.num_frames:
            logger.warning(f"{clip.clip_id}: face {face_id} missing in some frames, skipped")
            continue
        tracks.append(
            FaceTrack(
                clip_id=clip.clip_id,
                face_id=face_id,
                crops=np.stack([crop_face(f, e["bbox"], crop_size) for f, e in zip(clip.frames, entries)]),
                bboxes=np.asarray([e["bbox"] for e in entries]),
                labels=np.asarray([int(bool(e["active"])) for e in entries]),
            )
        )
    return tracks


class FusionDecoder(nn.Module):
    """
    Single-layer transformer decoder pooling encoder features per frame.

    Queries are fixed sinusoidal frame-index embeddings. The attention output
    does not add the query back, so each output row is a function of its
    query and of the clip's features only.
    """

    def __init__(self, enc_dim: int, config: FusionConfig):
        super().__init__()
        self.config = config
        dim = config.out_dim
        self.memory_proj = nn.Linear(enc_dim, dim)
        self.cross_attn = nn.MultiheadAttention(dim, config.heads, batch_first=True)
        self.norm1 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.norm2 = nn.LayerNorm(dim)
        if dim != config.bridge_dim:
            self.bridge = nn.Sequential(nn.Linear(dim, config.bridge_dim), nn.GELU(), nn.LayerNorm(config.bridge_dim))
        else:
            self.bridge = nn.Identity()

    def queries(self, frame_indices: torch.Tensor) -> torch.Tensor:
        return sincos_embedding(frame_indices[..., None], self.config.out_dim)

    def decode(self, features: torch.Tensor, frame_indices: torch.Tensor) -> torch.Tensor:
        """
        :param features: B x N x enc_dim encoder features
        :param frame_indices: T (or B x T) frame indices used as queries
        :return: B x T x out_dim
        """
        if frame_indices.shape[-1] == 0:
            raise DataError("cannot fuse features for T=0 frames")
        memory = self.memory_proj(features)
        query = self.queries(frame_indices).to(memory.dtype).to(memory.device)
        if query.ndim == 2:
            query = query.expand(memory.shape[0], -1, -1)
        x, _ = self.cross_attn(query, memory, memory, need_weights=False)
        x = self.norm1(x)
        return self.norm2(x + self.mlp(x))

    def forward(self, features: torch.Tensor, num_frames: int) -> torch.Tensor:
        """
        :return: B x T x bridge_dim per-frame features for the head
        """
        return self.bridge(self.decode(features, torch.arange(num_frames)))


def fuse_features(enc_out: EncoderOutput, T: int, fusion: FusionDecoder) -> torch.Tensor:
    """
    B x T x bridge_dim per-frame features of each clip in ``enc_out``, the
    width `ASDHead` expects whatever the decoder's ``out_dim``.
    """
    return fusion(enc_out.f_av, T)


class ASDHead(nn.Module):
    """
    Per-frame classifier over face crops, box codes and fused features.
    """

    def __init__(self, config: ASDConfig):
        super().__init__()
        self.face_encoder = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, config.face_dim, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.bbox_encoder = nn.Sequential(nn.Linear(4, config.bbox_dim), nn.ReLU())
        self.fused_dim = config.fusion.bridge_dim
        self.classifier = nn.Sequential(
            nn.Linear(config.face_dim + config.bbox_dim + self.fused_dim, config.hidden_dim),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, 1),
        )

    def forward(self, crops: torch.Tensor, bboxes: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
        """
        :param crops: B x T x S x S x 3
        :param bboxes: B x T x 4
        :param fused: B x T x bridge_dim
        :return: B x T logits
        """
        B, T = crops.shape[:2]
        if bboxes.shape[:2] != (B, T) or fused.shape[:2] != (B, T):
            raise DataError(
                f"misaligned inputs: crops {tuple(crops.shape[:2])}, bboxes "
                f"{tuple(bboxes.shape[:2])}, fused {tuple(fused.shape[:2])}"
            )
        faces = self.face_encoder(crops.reshape(B * T, *crops.shape[2:]).permute(0, 3, 1, 2))
        x = torch.cat([faces.reshape(B, T, -1), self.bbox_encoder(bboxes), fused], dim=-1)
        return self.classifier(x).squeeze(-1)


def asd_forward(head: ASDHead, track: FaceTrack, fused: torch.Tensor) -> torch.Tensor:
    """
    Per-frame active probabilities of one track.

    :param fused: T x bridge_dim features of the track's clip, or the
        1 x T x bridge_dim output of `fuse_features` for a single clip
    """
    if fused.ndim == 3:
        if fused.shape[0] != 1:
            raise DataError(f"fused features hold {fused.shape[0]} clips, a track belongs to one")
        fused = fused[0]
    if fused.shape[0] != track.num_frames:
        raise DataError(f"fused features cover {fused.shape[0]} frames, track has {track.num_frames}")
    if fused.shape[-1] != head.fused_dim:
        raise DataError(f"fused features are {fused.shape[-1]} wide, the head expects {head.fused_dim}")
    param = next(head.parameters())
    crops = torch.from_numpy(track.crops)[None].to(param)
    bboxes = torch.from_numpy(track.bboxes)[None].to(param)
    return torch.sigmoid(head(crops, bboxes, fused[None].to(param)))[0]


class ASDModel(nn.Module):
    """
    Encoder + fusion decoder + head.

    :param model_config: Encoder architecture
    :param config: ASD recipe and head sizes
    """

    def __init__(self, model_config: ModelConfig, config: ASDConfig):
        super().__init__()
        self.model_config = model_config
        self.config = config
        self.encoder: SpatialEncoder = SpatialMAE(model_config).encoder
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.fusion = FusionDecoder(model_config.enc_dim, config.fusion)
            self.head = ASDHead(config)

    def head_parameters(self) -> List[nn.Parameter]:
        return list(self.fusion.parameters()) + list(self.head.parameters())

    def forward(
        self,
        video: torch.Tensor,
        video_coords: torch.Tensor,
        audio: torch.Tensor,
        audio_coords: torch.Tensor,
        crops: torch.Tensor,
        bboxes: torch.Tensor,
    ) -> torch.Tensor:
        enc = self.encoder(video, video_coords, audio, audio_coords)
        fused = self.fusion(enc.f_av, crops.shape[1])
        return self.head(crops, bboxes, fused)


@dataclass
class TrackItem:
    video: torch.Tensor
    audio: torch.Tensor
    video_coords: torch.Tensor
    audio_coords: torch.Tensor
    crops: torch.Tensor
    bboxes: torch.Tensor
    labels: torch.Tensor
    index: int


class TrackDataset(Dataset):
    """
    Face tracks paired with the tokens of their clip.

    The audio of every item has one full channel hidden: a random channel per
    item and epoch while training, the right channel otherwise.
    """

    def __init__(
        self,
        tracks: Sequence[FaceTrack],
        clips: Dict[str, RawClip],
        stats: NormalizationStats,
        tubelet_depth: Optional[int] = None,
        training: bool = True,
        seed: int = 0,
    ):
        missing = sorted({t.clip_id for t in tracks} - set(clips))
        if missing:
            raise DataError(f"tracks refer to unknown clips: {missing[:5]}")
        self.tracks = list(tracks)
        self.clips = clips
        self.stats = stats
        self.tubelet_depth = tubelet_depth
        self.training = training
        self.seed = seed
        self.epoch = 0
        self._tokens: Dict[str, Tuple] = {}

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.tracks)

    def _clip_tokens(self, clip_id: str):
        if clip_id not in self._tokens:
            tokens = tokenize_clip(self.clips[clip_id], self.stats, tubelet_depth=self.tubelet_depth)
            self._tokens[clip_id] = (tokens.video, tokens.audio)
        return self._tokens[clip_id]

    def channel(self, index: int) -> str:
        if not self.training:
            return "R"
        return "L" if derive_rng(self.seed, self.epoch, index).random() < 0.5 else "R"

    def __getitem__(self, index: int) -> TrackItem:
        track = self.tracks[index]
        video, audio = self._clip_tokens(track.clip_id)
        keep = channel_mask(self.channel(index), audio.num_tokens).unmasked_tensor()
        labels = track.labels if track.labels is not None else np.full(track.num_frames, -1)
        return TrackItem(
            video=video.tokens,
            audio=audio.flat()[keep],
            video_coords=video.grid,
            audio_coords=audio.grid[keep],
            crops=torch.from_numpy(track.crops),
            bboxes=torch.from_numpy(track.bboxes),
            labels=torch.as_tensor(labels, dtype=torch.float32),
            index=index,
        )


def collate_tracks(items: Sequence[TrackItem]) -> Dict[str, torch.Tensor]:
    return {
        "video": torch.stack([i.video for i in items]),
        "video_coords": items[0].video_coords,
        "audio": torch.stack([i.audio for i in items]),
        "audio_coords": torch.stack([i.audio_coords for i in items]),
        "crops": torch.stack([i.crops for i in items]),
        "bboxes": torch.stack([i.bboxes for i in items]),
        "labels": torch.stack([i.labels for i in items]),
        "indices": torch.tensor([i.index for i in items]),
    }


def _forward_batch(model: ASDModel, batch: Dict[str, torch.Tensor], device: torch.device) -> torch.Tensor:
    return model(
        batch["video"].to(device),
        batch["video_coords"].to(device),
        batch["audio"].to(device),
        batch["audio_coords"].to(device),
        batch["crops"].to(device),
        batch["bboxes"].to(device),
    )


def build_asd_model(
    config: ASDConfig,
    pretrained: Optional[Union[str, Path]] = None,
    model_config: Optional[ModelConfig] = None,
) -> Tuple[ASDModel, NormalizationStats]:
    """
    An ASD model whose encoder comes from a pretraining checkpoint, or a
    freshly initialized one (``pretrained=None``) for the from-scratch control.
    """
    if pretrained is not None:
        mae, stats = load_pretrained(pretrained)
        model = ASDModel(mae.config, config)
        model.encoder.load_state_dict(mae.encoder.state_dict())
        return model, stats
    if model_config is None:
        raise DataError("a model config is required without a pretrained checkpoint")
    return ASDModel(model_config, config), NormalizationStats.identity()


def optimizer_groups(model: ASDModel, config: ASDConfig) -> List[Dict]:
    groups = [{"params": model.head_parameters(), "lr": config.head_lr, "name": "head"}]
    if not config.freeze_pretrained:
        groups.append({"params": list(model.encoder.parameters()), "lr": config.pretrained_lr, "name": "pretrained"})
    return groups


@dataclass
class ASDTrainResult:
    model: ASDModel
    losses: List[float]
    lrs: List[Tuple[float, ...]]


def finetune_asd(
    model: ASDModel,
    tracks: Sequence[FaceTrack],
    clips: Dict[str, RawClip],
    stats: NormalizationStats,
    config: ASDConfig,
    workdir: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    device: Optional[Union[str, torch.device]] = None,
    show_progress: bool = False,
) -> ASDTrainResult:
    """
    Finetune with per-frame binary cross-entropy.

    The head and fusion decoder train at ``head_lr`` and the encoder at
    ``pretrained_lr`` (or not at all when frozen); both decay by
    ``lr_decay`` after every epoch.

    :param max_steps: Stop early after this many optimizer steps
    :raises DataError: If no track carries labels
    """
    labeled = [t for t in tracks if t.labels is not None]
    if not labeled:
        raise DataError("cannot finetune ASD on a label-free dataset")

    device = torch.device(device) if device is not None else default_device()
    model.to(device)
    model.encoder.requires_grad_(not config.freeze_pretrained)

    optimizer = torch.optim.Adam(optimizer_groups(model, config))
    scheduler = torch.optim.lr_scheduler.ExponentialLR(optimizer, gamma=config.lr_decay)
    dataset = TrackDataset(labeled, clips, stats, model.model_config.tubelet_depth, training=True, seed=config.seed)
    metrics = MetricsWriter(Path(workdir) / "metrics.jsonl") if workdir is not None else None

    generator = torch.Generator()
    losses: List[float] = []
    lrs: List[Tuple[float, ...]] = []
    step = 0
    logger.info(
        f"Finetuning ASD on {len(labeled)} tracks, lr={config.head_lr}/{config.pretrained_lr}, "
        f"frozen={config.freeze_pretrained}"
    )
    try:
        for epoch in tqdm(range(config.epochs), disable=not show_progress, desc="asd"):
            dataset.set_epoch(epoch)
            generator.manual_seed(int(derive_rng(config.seed, epoch).integers(2**62)))
            loader = DataLoader(
                dataset,
                batch_size=config.batch_size,
                shuffle=True,
                generator=generator,
                num_workers=config.num_workers,
                collate_fn=collate_tracks,
            )
            model.train()
            for batch in loader:
                logits = _forward_batch(model, batch, device)
                loss = F.binary_cross_entropy_with_logits(logits, batch["labels"].to(device))
                if not torch.isfinite(loss):
                    ids = [f"{labeled[i].clip_id}/{labeled[i].face_id}" for i in batch["indices"].tolist()]
                    raise NonFiniteLossError(f"non-finite ASD loss at step {step}", batch_ids=ids)
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(loss.item())
                if metrics is not None:
                    metrics.capture_event({"step": step, "epoch": epoch, "loss": loss.item()})
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            scheduler.step()
            lrs.append(tuple(group["lr"] for group in optimizer.param_groups))
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if metrics is not None:
            metrics.close()

    if workdir is not None:
        save_asd(model, stats, Path(workdir) / "asd.pt")
    return ASDTrainResult(model=model, losses=losses, lrs=lrs)


def save_asd(model: ASDModel, stats: NormalizationStats, path: Union[str, Path]) -> Path:
    return save_checkpoint(
        path,
        kind="asd",
        modules={"model": model},
        configs={"model": model.model_config, "asd": model.config},
        stats=stats,
    )


def load_asd(path: Union[str, Path]) -> Tuple[ASDModel, NormalizationStats]:
    payload = load_checkpoint(path, kind="asd")
    model = ASDModel(checkpoint_config(payload, "model", ModelConfig), checkpoint_config(payload, "asd", ASDConfig))
    model.load_state_dict(payload["state"]["model"])
    return model, checkpoint_stats(payload)


@dataclass
class PredictionRow:
    clip_id: str
    face_id: str
    frame_idx: int
    score: float
    label: int


def predict_tracks(
    model: ASDModel,
    tracks: Sequence[FaceTrack],
    clips: Dict[str, RawClip],
    stats: NormalizationStats,
    batch_size: int = 64,
    device: Optional[Union[str, torch.device]] = None,
) -> List[PredictionRow]:
    """
    Score every frame of every track, right channel hidden.
    """
    device = torch.device(device) if device is not None else default_device()
    model.to(device).eval()
    dataset = TrackDataset(tracks, clips, stats, model.model_config.tubelet_depth, training=False)
    loader = DataLoader(dataset, batch_size=batch_size, collate_fn=collate_tracks)

    rows: List[PredictionRow] = []
    with torch.no_grad():
        for batch in loader:
            scores = torch.sigmoid(_forward_batch(model, batch, device)).cpu().numpy()
            for index, track_scores in zip(batch["indices"].tolist(), scores):
                track = tracks[index]
                for frame, score in enumerate(track_scores):
                    label = int(track.labels[frame]) if track.labels is not None else -1
                    rows.append(PredictionRow(track.clip_id, track.face_id, frame, float(score), label))
    return rows


def evaluate_map(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Pooled frame-level average precision in [0, 1].

    Precision is taken at every distinct score threshold and weighted by the
    recall gained there, so tied scores collapse into a single point of the
    precision-recall curve.

    :raises DataError: If there is no positive frame
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape:
        raise DataError(f"{scores.shape[0]} scores but {labels.shape[0]} labels")
    if not np.any(labels == 1):
        raise DataError("undefined AP: no positive frames")
    return float(average_precision_score(labels, scores))


def write_predictions(rows: Sequence[PredictionRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["clip_id", "face_id", "frame_idx", "score", "label"])
        for row in rows:
            writer.writerow([row.clip_id, row.face_id, row.frame_idx, f"{row.score:.17g}", row.label])
    return path


def read_predictions(path: Union[str, Path]) -> List[PredictionRow]:
    with open(path, newline="", encoding="utf-8") as f:
        return [
            PredictionRow(r["clip_id"], r["face_id"], int(r["frame_idx"]), float(r["score"]), int(r["label"]))
            for r in csv.DictReader(f)
        ]


def score_predictions(rows: Sequence[PredictionRow]) -> float:
    labeled = [r for r in rows if r.label >= 0]
    return evaluate_map([r.score for r in labeled], [r.label for r in labeled])


def score_predictions_file(path: Union[str, Path]) -> float:
    """
    mAP of a predictions CSV ``clip_id,face_id,frame_idx,score,label``.
    """
    return score_predictions(read_predictions(path))
