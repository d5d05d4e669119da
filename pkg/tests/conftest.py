import numpy as np
import pytest

from egoav.config import CorpusConfig, ModelConfig
from egoav.scenes import generate_corpus
from egoav.tokenizer import RawClip


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_clip():
    """
    Random clip factory: ``make_clip(seed, height=48, width=64)``.
    """

    def factory(seed: int = 0, height: int = 48, width: int = 64, frames: int = 5, samples: int = 16000):
        gen = np.random.default_rng(seed)
        return RawClip(
            frames=gen.random((frames, height, width, 3)).astype(np.float32),
            waveform=(0.1 * gen.standard_normal((2, samples))).astype(np.float32),
            clip_id=f"clip{seed:03d}",
        )

    return factory


@pytest.fixture
def tiny_model_config():
    return ModelConfig.tiny()


@pytest.fixture
def small_corpus_config():
    return CorpusConfig(n_scenes=4, scene_seconds=2, height=48, width=64, sprite_radius=6, max_speakers=2, seed=3)


@pytest.fixture
def small_corpus(tmp_path, small_corpus_config):
    """
    A rendered 4-scene corpus; returns the manifest path.
    """
    return generate_corpus(small_corpus_config, tmp_path / "corpus")
