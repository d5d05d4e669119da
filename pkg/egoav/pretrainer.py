"""
pretrainer module

Self-supervised pretraining: coupled flip augmentation, mixed audio
masking, AdamW with linear warmup and half-cycle cosine decay, per-step
metrics, rotating checkpoints, and the inpainting check that compares true,
zeroed and shuffled video conditioning.
"""
import json
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy import stats as scipy_stats
from torch.utils.data import DataLoader
from tqdm.auto import tqdm

from .checkpoint import (
    CheckpointRotation,
    checkpoint_config,
    checkpoint_stats,
    load_checkpoint,
    restore_rng_state,
    save_checkpoint,
)
from .common import derive_rng
from .config import MaskingConfig, ModelConfig, TrainConfig
from .data import ClipBatch, ClipDataset, collate_clips, derangement, epoch_generator
from .errors import DataError, NonFiniteLossError
from .logging import get_logger
from .masking import channel_mask, mask_batch, sample_batch_masks, token_mask
from .metrics import MetricsWriter
from .model import SpatialMAE
from .tokenizer import NormalizationStats, RawClip


logger = get_logger(__name__)

NO_DECAY_NAMES = ("channel_embed", "modality_embed", "mask_token")
VALIDATION_KEY = 2**31 - 1


def lr_at_step(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """
    Linear warmup to ``peak_lr`` over ``warmup_epochs``, then half-cycle
    cosine down to 0 at the end of the last epoch.
    """
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    if step < warmup:
        return config.peak_lr * step / warmup
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return max(0.0, config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class ScheduleState:
    steps_per_epoch: int
    step: int = 0
    current_lr: float = 0.0


def augment(clip: RawClip, rng: np.random.Generator, prob: float = 0.5) -> RawClip:
    """
    With probability ``prob``, mirror every frame horizontally and swap the
    left and right waveform channels together.
    """
    if rng.random() >= prob:
        return clip
    return flip_clip(clip)


def flip_clip(clip: RawClip) -> RawClip:
    return RawClip(
        frames=np.ascontiguousarray(clip.frames[:, :, ::-1]),
        waveform=np.ascontiguousarray(clip.waveform[::-1]),
        clip_id=clip.clip_id,
        dataset=clip.dataset,
        start_time=clip.start_time,
    )


def param_groups(model: torch.nn.Module, weight_decay: float) -> List[Dict]:
    """
    Split parameters into a decayed group and a group without decay holding
    norms, biases and the learned embeddings.
    """
    decay, no_decay = [], []
    for name, param in model.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or any(key in name for key in NO_DECAY_NAMES):
            no_decay.append(param)
        else:
            decay.append(param)
    return [
        {"params": decay, "weight_decay": weight_decay, "name": "decay"},
        {"params": no_decay, "weight_decay": 0.0, "name": "no_decay"},
    ]


def default_device() -> torch.device:
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


@dataclass
class TrainResult:
    losses: List[float] = field(default_factory=list)
    mask_modes: List[str] = field(default_factory=list)
    checkpoints: List[Path] = field(default_factory=list)
    best_val_loss: Optional[float] = None
    steps: int = 0

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


class Pretrainer:
    """
    Owns the model, the optimizer and the run directory of one pretraining run.

    :param config: The training recipe
    :param model: The model to train in place
    :param stats: Corpus normalization stats, stored with every checkpoint
    :param workdir: Run directory for checkpoints and metrics
    :param device: Defaults to CUDA when available
    :param show_progress: Show a tqdm progress bar
    """

    def __init__(
        self,
        config: TrainConfig,
        model: SpatialMAE,
        stats: NormalizationStats,
        workdir: Union[str, Path],
        device: Optional[Union[str, torch.device]] = None,
        show_progress: bool = False,
    ):
        self.config = config
        self.model = model
        self.stats = stats
        self.workdir = Path(workdir)
        self.device = torch.device(device) if device is not None else default_device()
        self.show_progress = show_progress

        self.model.to(self.device)
        self.optimizer = torch.optim.AdamW(
            param_groups(model, config.weight_decay), lr=0.0, betas=tuple(config.betas)
        )
        self.epoch = 0
        self.step = 0
        self.best_val_loss: Optional[float] = None

    def dataset(self, clips: Sequence[RawClip], train: bool = True) -> ClipDataset:
        transform = partial(augment, prob=self.config.augment_flip_prob) if train else None
        return ClipDataset(
            clips,
            self.stats,
            tubelet_depth=self.model.config.tubelet_depth,
            transform=transform,
            seed=self.config.seed,
        )

    def resume(self, path: Union[str, Path]) -> None:
        payload = load_checkpoint(path, kind="pretrain")
        self.model.load_state_dict(payload["state"]["model"])
        if payload.get("optimizer"):
            self.optimizer.load_state_dict(payload["optimizer"])
        counters = payload.get("counters", {})
        self.epoch = counters.get("epoch", 0)
        self.step = counters.get("step", 0)
        self.best_val_loss = counters.get("best_val_loss")
        restore_rng_state(payload.get("rng", {}))
        logger.info(f"Resumed from {path} at epoch {self.epoch}, step {self.step}")

    def save(self, path: Path) -> Path:
        return save_checkpoint(
            path,
            kind="pretrain",
            modules={"model": self.model},
            configs={"model": self.model.config, "train": self.config},
            stats=self.stats,
            optimizer=self.optimizer,
            counters={"epoch": self.epoch, "step": self.step, "best_val_loss": self.best_val_loss},
        )

    def schedule_config(self, steps_per_epoch: int) -> TrainConfig:
        """
        The recipe with ``epochs`` shortened to fit ``max_steps``.
        """
        config = self.config
        if config.max_steps is None:
            return config
        epochs = max(1, math.ceil(config.max_steps / steps_per_epoch))
        warmup = min(config.warmup_epochs, epochs - 1)
        if warmup != config.warmup_epochs:
            logger.warning(f"max_steps leaves {epochs} epochs, warmup shortened to {warmup}")
        return config.model_copy(update={"epochs": epochs, "warmup_epochs": warmup})

    def train_step(self, batch: ClipBatch, masking: MaskingConfig, lr: float):
        specs = sample_batch_masks(masking, derive_rng(masking.seed, self.step), len(batch), batch.audio.shape[1])
        masked = mask_batch(batch.audio, batch.audio_coords, specs)

        self.model.train()
        loss, _ = self.model(batch.video, batch.video_coords, masked)
        if not torch.isfinite(loss):
            dump = self.workdir / f"nonfinite-step-{self.step}.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps({"step": self.step, "clip_ids": batch.clip_ids}, indent=2))
            raise NonFiniteLossError(
                f"non-finite loss {loss.item()} at step {self.step}, batch written to {dump}",
                batch_ids=batch.clip_ids,
            )

        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if self.config.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        return loss.item(), masked.mode

    def validation_loss(self, loader: DataLoader) -> float:
        masking = self.config.masking
        total, count = 0.0, 0
        self.model.eval()
        with torch.no_grad():
            for i, batch in enumerate(loader):
                batch = batch.to(self.device)
                rng = derive_rng(masking.seed, VALIDATION_KEY, i)
                specs = sample_batch_masks(masking, rng, len(batch), batch.audio.shape[1])
                loss, _ = self.model(batch.video, batch.video_coords, mask_batch(batch.audio, batch.audio_coords, specs))
                total += loss.item() * len(batch)
                count += len(batch)
        return total / count

    def train(
        self,
        clips: Sequence[RawClip],
        val_clips: Optional[Sequence[RawClip]] = None,
    ) -> TrainResult:
        """
        Run the recipe, resuming from the current epoch/step counters.

        :param clips: Training clips
        :param val_clips: Optional validation clips for best-checkpoint tracking
        :raises NonFiniteLossError: On a NaN or infinite loss
        """
        if len(clips) == 0:
            raise DataError("cannot pretrain on an empty dataset")

        config = self.config
        train_set = self.dataset(clips, train=True)
        steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
        schedule = self.schedule_config(steps_per_epoch)
        max_steps = config.max_steps or schedule.epochs * steps_per_epoch
        val_loader = None
        if val_clips:
            val_loader = DataLoader(
                self.dataset(val_clips, train=False),
                batch_size=config.batch_size,
                collate_fn=collate_clips,
            )

        result = TrainResult(best_val_loss=self.best_val_loss)
        rotation = CheckpointRotation(self.workdir / "checkpoints", keep_last=config.keep_last)
        metrics = MetricsWriter(self.workdir / "metrics.jsonl", append=self.step > 0)
        progress = tqdm(total=max_steps, initial=self.step, disable=not self.show_progress, desc="pretrain")

        logger.info(
            f"Pretraining on {len(train_set)} clips: {schedule.epochs} epochs x "
            f"{steps_per_epoch} steps, r={config.masking.r}"
        )
        try:
            while self.epoch < schedule.epochs and self.step < max_steps:
                train_set.set_epoch(self.epoch)
                loader = DataLoader(
                    train_set,
                    batch_size=config.batch_size,
                    shuffle=True,
                    generator=epoch_generator(config.seed, self.epoch),
                    num_workers=config.num_workers,
                    collate_fn=collate_clips,
                )
                for batch in loader:
                    if self.step >= max_steps:
                        break
                    lr = lr_at_step(schedule, self.step, steps_per_epoch)
                    loss, mode = self.train_step(batch.to(self.device), config.masking, lr)
                    metrics.capture_event(
                        {"step": self.step, "epoch": self.epoch, "loss": loss, "lr": lr, "mask_mode": mode}
                    )
                    result.losses.append(loss)
                    result.mask_modes.append(mode)
                    self.step += 1
                    progress.update(1)

                self.epoch += 1
                if val_loader is not None:
                    val_loss = self.validation_loss(val_loader)
                    logger.info(f"epoch {self.epoch}: val loss {val_loss:.4f}")
                    if self.best_val_loss is None or val_loss < self.best_val_loss:
                        self.best_val_loss = val_loss
                        result.checkpoints.append(self.save(self.workdir / "checkpoints" / "best.pt"))
                path = self.save(rotation.path_for(self.epoch))
                rotation.register(path)
                result.checkpoints.append(path)
        except KeyboardInterrupt:
            path = self.save(self.workdir / "checkpoints" / "interrupted.pt")
            logger.warning(f"Interrupted at step {self.step}, saved {path}")
            raise
        finally:
            progress.close()
            metrics.close()

        last = self.save(self.workdir / "checkpoints" / "last.pt")
        result.checkpoints.append(last)
        result.best_val_loss = self.best_val_loss
        result.steps = self.step
        if result.losses:
            logger.info(f"Pretraining done: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}")
        return result


def load_pretrained(path: Union[str, Path]):
    """
    Rebuild a pretrained model and its normalization stats from a checkpoint.
    """
    payload = load_checkpoint(path, kind="pretrain")
    model = SpatialMAE(checkpoint_config(payload, "model", ModelConfig))
    model.load_state_dict(payload["state"]["model"])
    return model, checkpoint_stats(payload)


class InpaintingReport(BaseModel):
    """
    Mean masked loss with true, zeroed and shuffled video conditioning.
    """
    mask_mode: str
    n_clips: int
    true_video_loss: float
    zero_video_loss: float
    shuffled_video_loss: float
    fraction_true_better: float = Field(description="Clips where true video beats shuffled video")
    p_value: float = Field(description="One-sided paired t-test, true < shuffled")
    per_clip: Dict[str, List[float]] = Field(default_factory=dict)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path


def _eval_masks(mode: str, masking: MaskingConfig, seed: int, start: int, size: int, num_tokens: int):
    if mode == "channel":
        return [
            channel_mask("L" if derive_rng(seed, start + i).random() < 0.5 else "R", num_tokens)
            for i in range(size)
        ]
    if mode == "token":
        return [token_mask(derive_rng(seed, start + i), masking.token_mask_ratio, num_tokens) for i in range(size)]
    return sample_batch_masks(masking, derive_rng(seed, start), size, num_tokens)


def evaluate_inpainting(
    model: SpatialMAE,
    clips: Sequence[RawClip],
    stats: NormalizationStats,
    mask_mode: Literal["channel", "token", "mixed"] = "channel",
    masking: Optional[MaskingConfig] = None,
    seed: int = 0,
    batch_size: int = 16,
    device: Optional[Union[str, torch.device]] = None,
) -> InpaintingReport:
    """
    Inpainting loss of a frozen model under three video conditions.

    The same masks are used for all three conditions. Shuffled video pairs
    every clip with another clip's video through a random derangement.

    :param mask_mode: ``channel`` hides one random channel per clip,
        ``token`` hides random tokens, ``mixed`` follows the training protocol
    """
    if len(clips) == 0:
        raise DataError("cannot evaluate inpainting on an empty dataset")

    masking = masking or MaskingConfig()
    device = torch.device(device) if device is not None else default_device()
    dataset = ClipDataset(clips, stats, tubelet_depth=model.config.tubelet_depth)
    perm = derangement(len(dataset), derive_rng(seed, len(dataset)))
    model.to(device).eval()

    losses: Dict[str, List[float]] = {"true": [], "zero": [], "shuffled": []}
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            indices = list(range(start, min(start + batch_size, len(dataset))))
            batch = collate_clips([dataset[i] for i in indices]).to(device)
            shuffled = torch.stack([dataset[int(perm[i])].video for i in indices]).to(device)
            specs = _eval_masks(mask_mode, masking, seed, start, len(indices), batch.audio.shape[1])
            masked = mask_batch(batch.audio, batch.audio_coords, specs)

            for name, video in (
                ("true", batch.video),
                ("zero", torch.zeros_like(batch.video)),
                ("shuffled", shuffled),
            ):
                _, pred = model(video, batch.video_coords, masked)
                for row in range(len(indices)):
                    losses[name].append(model.loss(pred[row], masked.target_tokens[row]).item())

    true, shuffled = np.asarray(losses["true"]), np.asarray(losses["shuffled"])
    if len(true) > 1 and np.any(true != shuffled):
        p_value = float(scipy_stats.ttest_rel(true, shuffled, alternative="less").pvalue)
    else:
        p_value = 1.0

    report = InpaintingReport(
        mask_mode=mask_mode,
        n_clips=len(true),
        true_video_loss=float(true.mean()),
        zero_video_loss=float(np.mean(losses["zero"])),
        shuffled_video_loss=float(shuffled.mean()),
        fraction_true_better=float(np.mean(true < shuffled)),
        p_value=p_value,
        per_clip=losses,
    )
    logger.info(
        f"Inpainting ({mask_mode}): true={report.true_video_loss:.4f} "
        f"zero={report.zero_video_loss:.4f} shuffled={report.shuffled_video_loss:.4f} "
        f"p={report.p_value:.3g}"
    )
    return report
