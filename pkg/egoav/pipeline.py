"""
pipeline module

Manifest-level stages chained by the command line: normalization stats,
pretraining, downstream finetuning and evaluation, and the channel-masking
frequency sweep that pretrains once per ``r`` under a shared step budget and
scores every checkpoint on one downstream task.
"""
import csv
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .asd import (
    ASDModel,
    FaceTrack,
    build_asd_model,
    finetune_asd,
    predict_tracks,
    score_predictions,
    tracks_from_labels,
    write_predictions,
)
from .config import RunConfig
from .denoise import DenoiseModel, DenoiseReport, build_denoiser, evaluate_denoiser, train_denoiser
from .errors import DataError
from .logging import get_logger
from .model import SpatialMAE
from .pretrainer import Pretrainer, TrainResult, evaluate_inpainting, load_pretrained
from .scenes import ManifestClips
from .tokenizer import NormalizationStats, RawClip, compute_norm_stats_parallel


logger = get_logger(__name__)

PathLike = Union[str, Path]


def stats_path(manifest: PathLike) -> Path:
    return Path(manifest).parent / "stats.json"


def corpus_stats(manifest: PathLike, workers: int = 0, recompute: bool = False) -> NormalizationStats:
    """
    Normalization stats of the training split, cached next to the manifest.
    """
    path = stats_path(manifest)
    if path.exists() and not recompute:
        return NormalizationStats.load(path)

    clips = ManifestClips(manifest, split="train")
    if len(clips) == 0:
        raise DataError(f"{manifest} has no training clips to compute stats on")
    stats = compute_norm_stats_parallel(clips, workers=workers, corpus_id=Path(manifest).parent.name)
    stats.save(path)
    logger.info(f"Saved normalization stats to {path}")
    return stats


def load_tracks(clips: ManifestClips, crop_size: int) -> Tuple[List[FaceTrack], Dict[str, RawClip]]:
    """
    Face tracks of every labeled clip, and all clips by id.
    """
    tracks: List[FaceTrack] = []
    by_id: Dict[str, RawClip] = {}
    for index in range(len(clips)):
        clip, labels = clips.load(index)
        by_id[clip.clip_id] = clip
        if labels is not None:
            tracks.extend(tracks_from_labels(clip, labels, crop_size))
    return tracks, by_id


def pretrain(
    config: RunConfig,
    manifest: PathLike,
    run_dir: PathLike,
    resume: Optional[PathLike] = None,
    show_progress: bool = False,
) -> Tuple[Path, TrainResult]:
    """
    Pretrain on the manifest's train split, tracking the val split when present.

    :return: The last checkpoint and the training result
    """
    run_dir = Path(run_dir)
    stats = corpus_stats(manifest, config.workers)
    trainer = Pretrainer(config.train, SpatialMAE(config.model), stats, run_dir, show_progress=show_progress)
    if resume is not None:
        trainer.resume(resume)

    val_clips = ManifestClips(manifest, split="val")
    result = trainer.train(ManifestClips(manifest, split="train"), val_clips if len(val_clips) else None)
    return run_dir / "checkpoints" / "last.pt", result


class ASDReport(BaseModel):
    split: str
    map: float
    n_frames: int
    prevalence: float

    def save(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    def summary(self) -> str:
        return (
            f"ASD on {self.split}: mAP {100 * self.map:.2f} over {self.n_frames} frames "
            f"(random baseline {100 * self.prevalence:.2f})"
        )


def finetune_asd_stage(
    config: RunConfig,
    manifest: PathLike,
    run_dir: PathLike,
    checkpoint: Optional[PathLike] = None,
    show_progress: bool = False,
) -> Tuple[ASDModel, NormalizationStats]:
    """
    Finetune ASD from a pretraining checkpoint, or from scratch when
    ``checkpoint`` is None. Writes ``asd.pt`` and ``metrics.jsonl`` to ``run_dir``.
    """
    model, stats = build_asd_model(config.asd, checkpoint, config.model)
    if checkpoint is None:
        stats = corpus_stats(manifest, config.workers)

    tracks, clips = load_tracks(ManifestClips(manifest, split="train"), config.asd.crop_size)
    result = finetune_asd(
        model,
        tracks,
        clips,
        stats,
        config.asd,
        workdir=run_dir,
        max_steps=config.asd.max_steps,
        show_progress=show_progress,
    )
    return result.model, stats


def evaluate_asd_stage(
    model: ASDModel,
    stats: NormalizationStats,
    manifest: PathLike,
    out_dir: PathLike,
    split: str = "test",
) -> ASDReport:
    """
    Score every frame of the split, write ``predictions.csv`` and ``report.json``.
    """
    tracks, clips = load_tracks(ManifestClips(manifest, split=split), model.config.crop_size)
    if not tracks:
        raise DataError(f"no labeled face tracks in the {split} split")
    rows = predict_tracks(model, tracks, clips, stats)
    write_predictions(rows, Path(out_dir) / "predictions.csv")

    labels = np.asarray([r.label for r in rows if r.label >= 0])
    report = ASDReport(
        split=split,
        map=score_predictions(rows),
        n_frames=len(labels),
        prevalence=float(labels.mean()) if len(labels) else 0.0,
    )
    report.save(Path(out_dir) / "report.json")
    logger.info(report.summary())
    return report


def finetune_denoise_stage(
    config: RunConfig,
    manifest: PathLike,
    run_dir: PathLike,
    checkpoint: Optional[PathLike] = None,
    show_progress: bool = False,
) -> Tuple[DenoiseModel, NormalizationStats]:
    """
    Train a denoiser, its encoder taken from ``checkpoint`` in the pretrained
    vision mode. Writes ``denoise.pt`` and ``metrics.jsonl`` to ``run_dir``.
    """
    num_frames = config.corpus.fps
    model, stats = build_denoiser(config.denoise, checkpoint, config.model, num_frames=num_frames)
    if checkpoint is None:
        stats = corpus_stats(manifest, config.workers)

    result = train_denoiser(
        model,
        ManifestClips(manifest, split="train"),
        stats,
        config.denoise,
        workdir=run_dir,
        max_steps=config.denoise.max_steps,
        show_progress=show_progress,
    )
    return result.model, stats


def evaluate_denoise_stage(
    config: RunConfig,
    model: Optional[DenoiseModel],
    stats: NormalizationStats,
    manifest: PathLike,
    out_dir: PathLike,
    mask: str = "model",
    split: str = "test",
    write_audio: bool = False,
) -> DenoiseReport:
    clips = ManifestClips(manifest, split=split)
    report = evaluate_denoiser(
        model,
        clips,
        stats,
        config.denoise,
        mask=mask,
        seed=config.seed,
        out_dir=Path(out_dir) / "audio" if write_audio else None,
    )
    report.save(Path(out_dir) / "report.json")
    return report


class SweepRow(BaseModel):
    r: float
    metric: str
    value: float
    checkpoint: str


def sweep_config(config: RunConfig, r_percent: float) -> RunConfig:
    """
    The run config of one sweep point: masking ratio ``r_percent / 100`` and
    the shared pretraining budget.
    """
    masking = config.train.masking.model_copy(update={"r": r_percent / 100.0})
    train = config.train.model_copy(update={"masking": masking, "max_steps": config.sweep.steps})
    return config.model_copy(update={"train": train})


def run_sweep(
    config: RunConfig,
    manifest: PathLike,
    workdir: PathLike,
    show_progress: bool = False,
) -> List[SweepRow]:
    """
    Pretrain once per ``r`` in ``config.sweep.r_values`` and evaluate the
    downstream ``config.sweep.task`` on the test split.
    """
    workdir = Path(workdir)
    rows: List[SweepRow] = []
    for r in config.sweep.r_values:
        point = sweep_config(config, r)
        run_dir = workdir / f"r{r:g}"
        logger.info(f"Sweep point r={r:g}%: pretraining {config.sweep.steps} steps in {run_dir}")
        checkpoint, _ = pretrain(point, manifest, run_dir / "pretrain", show_progress=show_progress)

        task = config.sweep.task
        if task == "inpaint":
            model, stats = load_pretrained(checkpoint)
            report = evaluate_inpainting(
                model, ManifestClips(manifest, split="test"), stats, mask_mode="channel", seed=config.seed
            )
            report.save(run_dir / "inpaint" / "report.json")
            metric, value = "channel_mse", report.true_video_loss
        elif task == "asd":
            model, stats = finetune_asd_stage(point, manifest, run_dir / "asd", checkpoint, show_progress)
            metric, value = "mAP", 100 * evaluate_asd_stage(model, stats, manifest, run_dir / "asd").map
        else:
            model, stats = finetune_denoise_stage(point, manifest, run_dir / "denoise", checkpoint, show_progress)
            report = evaluate_denoise_stage(point, model, stats, manifest, run_dir / "denoise")
            metric, value = "SI-SDRi", report.si_sdri_mean

        rows.append(SweepRow(r=r, metric=metric, value=value, checkpoint=str(checkpoint)))
        logger.info(f"r={r:g}%: {metric}={value:.4f}")
    return rows


def format_table(rows: List[SweepRow]) -> str:
    """
    Plain-text table, one row per ``r``.
    """
    metric = rows[0].metric if rows else "value"
    lines = [f"{'r (%)':>8} | {metric:>10}", f"{'-' * 8}-+-{'-' * 10}"]
    lines += [f"{row.r:>8g} | {row.value:>10.4f}" for row in rows]
    return "\n".join(lines)


def write_table(rows: List[SweepRow], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["r", "metric", "value", "checkpoint"])
        for row in rows:
            writer.writerow([f"{row.r:g}", row.metric, f"{row.value:.17g}", row.checkpoint])
    return path
