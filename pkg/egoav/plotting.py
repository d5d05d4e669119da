"""
plotting module

Attention heatmap rendering. Maps are upsampled to frame resolution with
nearest-neighbor repetition and blended over the frame with a black to
yellow colormap: the brighter the yellow, the higher the attention score.
"""
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

from .errors import DataError  # noqa: E402
from .logging import get_logger  # noqa: E402


logger = get_logger(__name__)

ATTENTION_CMAP = LinearSegmentedColormap.from_list("attention", [(0.0, 0.0, 0.0), (1.0, 1.0, 0.0)], N=256)


def upsample_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """
    Repeat every cell of a rows x cols grid over its pixel patch.

    Rows cover ``ceil(height / rows)`` pixels each, so zero-padded bottom
    patches are cropped away.
    """
    rows, cols = grid.shape
    if width % cols:
        raise DataError(f"width {width} is not a multiple of {cols} columns")
    patch = width // cols
    up = np.repeat(np.repeat(grid, patch, axis=0), patch, axis=1)
    if up.shape[0] < height:
        raise DataError(f"a {rows}-row grid does not cover {height} pixel rows")
    return up[:height]


def overlay(frame: np.ndarray, grid: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """
    Blend an attention grid in [0, 1] over an H x W x 3 frame in [0, 1].

    :return: H x W x 3 float image in [0, 1]
    """
    H, W = frame.shape[:2]
    heat = ATTENTION_CMAP(np.clip(upsample_nearest(grid, H, W), 0.0, 1.0))[..., :3]
    return np.clip((1.0 - alpha) * frame[..., :3] + alpha * heat, 0.0, 1.0)


def save_attention(
    grid: np.ndarray,
    out_dir: Union[str, Path],
    name: str,
    frame: Optional[np.ndarray] = None,
    alpha: float = 0.6,
) -> Path:
    """
    Write ``<name>.npy`` (the raw grid) and ``<name>.png`` (the overlay).

    Without a frame the heatmap alone is saved at patch resolution x16.

    :return: The PNG path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = np.asarray(grid, dtype=np.float32)
    np.save(out_dir / f"{name}.npy", grid)

    if frame is None:
        rows, cols = grid.shape
        image = ATTENTION_CMAP(upsample_nearest(grid, rows * 16, cols * 16))[..., :3]
    else:
        image = overlay(np.asarray(frame, dtype=np.float64), grid, alpha)

    path = out_dir / f"{name}.png"
    plt.imsave(path, image)
    logger.debug(f"Saved attention overlay {path}")
    return path
