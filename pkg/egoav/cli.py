"""
cli module

``egoav <command> [options]``: corpus generation, normalization stats,
pretraining, the r-sweep, downstream finetuning and evaluation, and
attention heatmaps.

Every command resolves the layered `RunConfig` (defaults < ``--config`` file
< ``EGOAV_*`` environment < flags), echoes it, and writes it as
``config.ini`` next to its outputs. Relative paths start from ``--workdir``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from . import pipeline
from .asd import load_asd, score_predictions_file
from .config import ModelConfig, RunConfig, load_run_config, write_run_config
from .denoise import load_denoiser
from .errors import ConfigError, EgoAVError
from .logging import (
    add_file_handler,
    get_logger,
    set_formatting,
    set_verbosity_debug,
    set_verbosity_info,
    unset_handler,
)
from .masking import finetune_mask
from .plotting import save_attention
from .pretrainer import load_pretrained
from .scenes import ManifestClips, generate_corpus
from .tokenizer import tokenize_clip


logger = get_logger(__name__)

TINY_BATCH = 8


def _set(overrides: Dict[str, Any], dotted: str, value: Any) -> None:
    if value is None:
        return
    *parents, key = dotted.split(".")
    node = overrides
    for parent in parents:
        node = node.setdefault(parent, {})
    node[key] = value


def flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Nested config overrides carried by the parsed flags.
    """
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        for key in ("seed", "corpus.seed", "model.seed", "train.seed", "train.masking.seed", "asd.seed", "denoise.seed"):
            _set(overrides, key, args.seed)
    _set(overrides, "workers", args.workers)

    if getattr(args, "tiny", False):
        overrides["model"] = {**ModelConfig.tiny().model_dump(mode="json"), **overrides.get("model", {})}
        for section in ("train", "asd", "denoise"):
            _set(overrides, f"{section}.batch_size", TINY_BATCH)

    command = args.command
    if command == "generate":
        _set(overrides, "corpus.n_scenes", args.scenes)
        _set(overrides, "corpus.scene_seconds", args.seconds)
        _set(overrides, "corpus.max_pan", args.pan)
        if args.highlight_active:
            _set(overrides, "corpus.highlight_active", True)
    elif command in ("pretrain", "sweep-r"):
        _set(overrides, "train.max_steps", getattr(args, "steps", None) if command == "pretrain" else None)
        _set(overrides, "train.masking.r", getattr(args, "mask_r", None))
        _set(overrides, "train.epochs", getattr(args, "epochs", None))
        if command == "sweep-r":
            _set(overrides, "sweep.r_values", args.r)
            _set(overrides, "sweep.steps", args.steps)
            _set(overrides, "sweep.task", args.task)
    elif command == "finetune-asd":
        _set(overrides, "asd.max_steps", args.steps)
        _set(overrides, "asd.epochs", args.epochs)
        _set(overrides, "asd.fusion.out_dim", args.fusion_dim)
        if args.freeze:
            _set(overrides, "asd.freeze_pretrained", True)
    elif command == "finetune-denoise":
        _set(overrides, "denoise.max_steps", args.steps)
        _set(overrides, "denoise.epochs", args.epochs)
        _set(overrides, "denoise.snr_db", args.snr)
        _set(overrides, "denoise.vision", args.vision)
    elif command == "eval-denoise":
        _set(overrides, "denoise.snr_db", args.snr)
    return overrides


class Context:
    """
    Resolved config and paths of one command invocation.
    """

    def __init__(self, args: argparse.Namespace, config: RunConfig):
        self.args = args
        self.config = config
        self.workdir = Path(args.workdir)
        self.show_progress = args.verbose > 0

    def path(self, value: Optional[str]) -> Optional[Path]:
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else self.workdir / path

    def run_dir(self, default: str) -> Path:
        return self.workdir / (getattr(self.args, "name", None) or default)

    def manifest(self) -> Path:
        path = self.path(self.args.manifest)
        if path is None:
            raise ConfigError("a --manifest is required")
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        return path

    def checkpoint(self, required: bool = True) -> Optional[Path]:
        """
        The ``--checkpoint`` path, None with ``--from-scratch``.

        :raises ConfigError: If a required checkpoint is missing
        """
        if getattr(self.args, "from_scratch", False):
            return None
        path = self.path(self.args.checkpoint)
        if path is None:
            if required:
                raise ConfigError("a --checkpoint is required unless --from-scratch is given")
            return None
        if not path.exists():
            raise ConfigError(f"checkpoint not found: {path}")
        return path


def cmd_generate(ctx: Context) -> Path:
    out = ctx.path(ctx.args.out)
    manifest = generate_corpus(ctx.config.corpus, out, workers=ctx.config.workers)
    print(manifest)
    return manifest


def cmd_stats(ctx: Context) -> Path:
    manifest = ctx.manifest()
    pipeline.corpus_stats(manifest, ctx.config.workers, recompute=True)
    path = pipeline.stats_path(manifest)
    print(path)
    return path


def cmd_pretrain(ctx: Context) -> Path:
    run_dir = ctx.run_dir("pretrain")
    checkpoint, result = pipeline.pretrain(
        ctx.config, ctx.manifest(), run_dir, resume=ctx.path(ctx.args.resume), show_progress=ctx.show_progress
    )
    if result.losses:
        print(f"loss {result.initial_loss:.6f} -> {result.final_loss:.6f} over {result.steps} steps")
    print(checkpoint)
    return run_dir


def cmd_sweep_r(ctx: Context) -> Path:
    run_dir = ctx.run_dir("sweep")
    rows = pipeline.run_sweep(ctx.config, ctx.manifest(), run_dir, show_progress=ctx.show_progress)
    table = pipeline.write_table(rows, run_dir / "sweep.csv")
    print(pipeline.format_table(rows))
    return table


def cmd_finetune_asd(ctx: Context) -> Path:
    run_dir = ctx.run_dir("asd")
    pipeline.finetune_asd_stage(ctx.config, ctx.manifest(), run_dir, ctx.checkpoint(), ctx.show_progress)
    path = run_dir / "asd.pt"
    print(path)
    return path


def cmd_eval_asd(ctx: Context) -> float:
    if ctx.args.predictions is not None:
        value = score_predictions_file(ctx.path(ctx.args.predictions))
        print(f"mAP {100 * value:.2f}")
        return value

    model, stats = load_asd(ctx.checkpoint())
    report = pipeline.evaluate_asd_stage(model, stats, ctx.manifest(), ctx.run_dir("eval-asd"), split=ctx.args.split)
    print(report.summary())
    return report.map


def cmd_finetune_denoise(ctx: Context) -> Path:
    run_dir = ctx.run_dir("denoise")
    checkpoint = ctx.checkpoint(required=ctx.config.denoise.vision == "pretrained")
    pipeline.finetune_denoise_stage(ctx.config, ctx.manifest(), run_dir, checkpoint, ctx.show_progress)
    path = run_dir / "denoise.pt"
    print(path)
    return path


def cmd_eval_denoise(ctx: Context) -> float:
    manifest = ctx.manifest()
    config = ctx.config
    model = None
    if ctx.args.mask == "model":
        model, stats = load_denoiser(ctx.checkpoint())
        denoise = model.config.model_copy(update={"snr_db": config.denoise.snr_db})
        config = config.model_copy(update={"denoise": denoise})
    else:
        stats = pipeline.corpus_stats(manifest, config.workers)

    report = pipeline.evaluate_denoise_stage(
        config,
        model,
        stats,
        manifest,
        ctx.run_dir("eval-denoise"),
        mask=ctx.args.mask,
        split=ctx.args.split,
        write_audio=ctx.args.write_audio,
    )
    print(report.summary())
    return report.si_sdri_mean


def cmd_attend(ctx: Context) -> Path:
    model, stats = load_pretrained(ctx.checkpoint())
    model.eval()
    clips = ManifestClips(ctx.manifest(), split=ctx.args.split)
    if ctx.args.clip is not None:
        ids = [r.clip_id for r in clips.records]
        if ctx.args.clip not in ids:
            raise ConfigError(f"clip {ctx.args.clip} is not in the {ctx.args.split} split")
        index = ids.index(ctx.args.clip)
    else:
        index = ctx.args.index
        if not 0 <= index < len(clips):
            raise ConfigError(f"clip index {index} out of range for {len(clips)} clips")

    clip = clips[index]
    tokens = tokenize_clip(clip, stats, tubelet_depth=model.config.tubelet_depth)
    keep = finetune_mask("R", training=False, num_tokens=tokens.audio.num_tokens).unmasked_tensor()
    maps = model.attention_maps(
        tokens.video.tokens[None],
        tokens.video.grid,
        tokens.audio.flat()[keep][None],
        tokens.audio.grid[keep][None],
        layer_idx=ctx.args.layer,
    )
    frame = clip.frames[clip.num_frames // 2]
    path = save_attention(maps[0].numpy(), ctx.run_dir("attend"), clip.clip_id, frame=frame)
    print(path)
    return path


COMMANDS: Dict[str, Callable[[Context], Any]] = {
    "generate": cmd_generate,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "sweep-r": cmd_sweep_r,
    "finetune-asd": cmd_finetune_asd,
    "eval-asd": cmd_eval_asd,
    "finetune-denoise": cmd_finetune_denoise,
    "eval-denoise": cmd_eval_denoise,
    "attend": cmd_attend,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egoav", description=__doc__.split("\n\n")[1])
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--workdir", default=".", help="Root of every relative path")
    parser.add_argument("--workers", type=int, help="Process pool size")
    parser.add_argument("--seed", type=int, help="Root seed of every stage")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def manifest_arg(p: argparse.ArgumentParser, required: bool = True) -> None:
        p.add_argument("--manifest", required=required, help="Clip manifest (JSONL)")

    def run_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--name", help="Output directory under --workdir")
        p.add_argument("--tiny", action="store_true", help="Smoke profile: dim 96, 2/2/2 layers, batch 8")
        p.add_argument("--steps", type=int, help="Stop after this many optimizer steps")
        p.add_argument("--epochs", type=int)

    p = sub.add_parser("generate", help="Render a synthetic corpus")
    p.add_argument("--out", required=True, help="Corpus directory")
    p.add_argument("--scenes", type=int)
    p.add_argument("--seconds", type=int)
    p.add_argument("--pan", type=float, help="Camera pan amplitude")
    p.add_argument("--highlight-active", action="store_true")

    p = sub.add_parser("stats", help="Compute normalization stats of the train split")
    manifest_arg(p)

    p = sub.add_parser("pretrain", help="Self-supervised pretraining")
    manifest_arg(p)
    run_args(p)
    p.add_argument("--mask-r", type=float, help="Channel masking frequency in [0, 1]")
    p.add_argument("--resume", help="Checkpoint to resume from")

    p = sub.add_parser("sweep-r", help="Pretrain and evaluate for each channel masking frequency")
    manifest_arg(p)
    p.add_argument("--name")
    p.add_argument("--tiny", action="store_true")
    p.add_argument("--r", type=float, nargs="*", help="Percentages, default 0 20 50 80 100")
    p.add_argument("--steps", type=int, help="Pretraining budget per r")
    p.add_argument("--task", choices=["asd", "denoise", "inpaint"])

    p = sub.add_parser("finetune-asd", help="Finetune active speaker detection")
    manifest_arg(p)
    run_args(p)
    p.add_argument("--checkpoint", help="Pretraining checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--freeze", action="store_true", help="Freeze the pretrained encoder")
    p.add_argument("--fusion-dim", type=int, choices=[128, 512])

    p = sub.add_parser("eval-asd", help="Frame-level mAP")
    manifest_arg(p, required=False)
    p.add_argument("--name")
    p.add_argument("--checkpoint", help="ASD checkpoint")
    p.add_argument("--predictions", help="Score a predictions CSV offline")
    p.add_argument("--split", default="test")

    p = sub.add_parser("finetune-denoise", help="Train the spatial audio denoiser")
    manifest_arg(p)
    run_args(p)
    p.add_argument("--checkpoint", help="Pretraining checkpoint")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--snr", type=float, help="Mixing SNR in dB")
    p.add_argument("--vision", choices=["none", "frames", "pretrained"])

    p = sub.add_parser("eval-denoise", help="SI-SDRi and STFT distance")
    manifest_arg(p)
    p.add_argument("--name")
    p.add_argument("--checkpoint", help="Denoiser checkpoint")
    p.add_argument("--snr", type=float)
    p.add_argument("--mask", choices=["model", "ideal", "all-ones-debug"], default="model")
    p.add_argument("--split", default="test")
    p.add_argument("--write-audio", action="store_true")

    p = sub.add_parser("attend", help="Attention heatmap of a clip")
    manifest_arg(p)
    p.add_argument("--name")
    p.add_argument("--checkpoint", help="Pretraining checkpoint")
    p.add_argument("--clip", help="Clip id")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--layer", type=int, default=-1, help="Shared encoder layer")
    return parser


def output_dir(ctx: Context) -> Path:
    """
    Where the resolved config and run log of a command go.
    """
    if ctx.args.command == "generate":
        return ctx.path(ctx.args.out)
    if ctx.args.command == "stats":
        return ctx.manifest().parent
    if ctx.args.command == "eval-asd" and ctx.args.predictions is not None:
        return ctx.path(ctx.args.predictions).parent
    defaults = {"sweep-r": "sweep", "finetune-asd": "asd", "finetune-denoise": "denoise"}
    return ctx.run_dir(defaults.get(ctx.args.command, ctx.args.command))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if args.verbose > 1:
        set_verbosity_debug()
    elif args.verbose:
        set_verbosity_info()
    set_formatting()

    handler = None
    try:
        config = load_run_config(args.config, flag_overrides(args))
        ctx = Context(args, config)
        out = output_dir(ctx)
        resolved = write_run_config(config, out / "config.ini")
        handler = add_file_handler(out / "run.log")
        print(resolved.read_text(encoding="utf-8"), end="")
        print(f"# config {config.hash()} -> {resolved}")

        COMMANDS[args.command](ctx)
    except (ConfigError, ValidationError) as e:
        print(f"egoav {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (EgoAVError, RuntimeError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"egoav {args.command}: {e}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            unset_handler(handler)
            handler.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
