"""
checkpoint module

A checkpoint is a single ``torch.save`` archive:

    {schema_version, kind, configs: {name: json}, state: {name: state_dict},
     stats: json, optimizer, counters: {epoch, step, ...}, rng: {...}}

Loading checks ``schema_version`` and ignores keys it does not know, so newer
writers stay readable.
"""
import os
import random
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel

from .errors import DataError
from .logging import get_logger
from .tokenizer import NormalizationStats


logger = get_logger(__name__)

SCHEMA_VERSION = 1


def rng_state() -> Dict[str, Any]:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng_state(state: Dict[str, Any]) -> None:
    if "python" in state:
        random.setstate(state["python"])
    if "numpy" in state:
        np.random.set_state(state["numpy"])
    if "torch" in state:
        torch.set_rng_state(state["torch"])


def save_checkpoint(
    path: Union[str, Path],
    kind: str,
    modules: Dict[str, torch.nn.Module],
    configs: Dict[str, BaseModel],
    stats: Optional[NormalizationStats] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    counters: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint atomically.

    :param path: Destination file
    :param kind: ``"pretrain"``, ``"asd"`` or ``"denoise"``
    :param modules: Named modules whose state dicts are stored
    :param configs: Named pydantic configs, stored as JSON
    :param stats: Normalization stats of the training corpus
    :param optimizer: Optimizer whose state is stored for resuming
    :param counters: Epoch/step counters and best metrics
    """
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "configs": {name: cfg.model_dump_json() for name, cfg in configs.items()},
        "state": {name: module.state_dict() for name, module in modules.items()},
        "stats": stats.model_dump_json() if stats is not None else None,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "counters": dict(counters or {}),
        "rng": rng_state(),
    }

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.debug(f"Saved {kind} checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    """
    Read a checkpoint archive.

    :param kind: Expected kind, checked when given
    :raises DataError: If the file is missing, of the wrong kind or too new
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")

    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("schema_version", 0)
    if version > SCHEMA_VERSION:
        raise DataError(f"{path}: schema_version {version} is newer than supported {SCHEMA_VERSION}")
    if kind is not None and payload.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, got {payload.get('kind')}")
    return payload


def checkpoint_config(payload: Dict[str, Any], name: str, model: type) -> Any:
    return model.model_validate_json(payload["configs"][name])


def checkpoint_stats(payload: Dict[str, Any]) -> NormalizationStats:
    raw = payload.get("stats")
    return NormalizationStats.model_validate_json(raw) if raw else NormalizationStats.identity()


class CheckpointRotation:
    """
    Keeps the newest ``keep_last`` epoch checkpoints in a directory.
    """

    def __init__(self, directory: Union[str, Path], keep_last: int = 3):
        self.directory = Path(directory)
        self.keep_last = keep_last
        self.saved: List[Path] = sorted(self.directory.glob("epoch-*.pt"))

    def path_for(self, epoch: int) -> Path:
        return self.directory / f"epoch-{epoch:04d}.pt"

    def register(self, path: Path) -> None:
        if path not in self.saved:
            self.saved.append(path)
        while len(self.saved) > self.keep_last:
            stale = self.saved.pop(0)
            stale.unlink(missing_ok=True)
            logger.debug(f"Removed old checkpoint {stale}")
