import matplotlib.pyplot as plt
import numpy as np
import pytest

from egoav.errors import DataError
from egoav.plotting import ATTENTION_CMAP, overlay, save_attention, upsample_nearest


def test_upsample_repeats_cells():
    grid = np.arange(6, dtype=np.float32).reshape(2, 3)
    up = upsample_nearest(grid, 32, 48)
    assert up.shape == (32, 48)
    assert np.all(up[:16, :16] == 0) and np.all(up[16:, 32:] == 5)


def test_upsample_crops_padded_rows():
    grid = np.ones((15, 22))
    assert upsample_nearest(grid, 240, 352).shape == (240, 352)
    with pytest.raises(DataError, match="multiple of"):
        upsample_nearest(grid, 240, 350)
    with pytest.raises(DataError, match="does not cover"):
        upsample_nearest(np.ones((2, 22)), 240, 352)


def test_colormap_goes_black_to_yellow():
    np.testing.assert_allclose(ATTENTION_CMAP(0.0)[:3], (0.0, 0.0, 0.0))
    np.testing.assert_allclose(ATTENTION_CMAP(1.0)[:3], (1.0, 1.0, 0.0))


def test_overlay_blends():
    frame = np.full((16, 32, 3), 0.5)
    grid = np.array([[0.0, 1.0]])
    image = overlay(frame, grid, alpha=0.5)
    assert image.shape == (16, 32, 3)
    np.testing.assert_allclose(image[0, 0], [0.25, 0.25, 0.25])
    np.testing.assert_allclose(image[0, -1], [0.75, 0.75, 0.25])
    assert image.min() >= 0.0 and image.max() <= 1.0


def test_save_attention(tmp_path):
    grid = np.random.default_rng(0).random((3, 4))
    path = save_attention(grid, tmp_path / "maps", "clip", frame=np.zeros((48, 64, 3)))
    assert path == tmp_path / "maps" / "clip.png"
    np.testing.assert_allclose(np.load(tmp_path / "maps" / "clip.npy"), grid.astype(np.float32))
    assert plt.imread(path).shape[:2] == (48, 64)

    bare = save_attention(grid, tmp_path / "maps", "bare")
    assert plt.imread(bare).shape[:2] == (48, 64)
