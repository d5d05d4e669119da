import numpy as np
import pytest
import soundfile as sf
from pydantic import ValidationError

from egoav import scenes
from egoav.config import CorpusConfig
from egoav.errors import DataError
from egoav.scenes import (
    ManifestClips,
    ManifestRecord,
    SceneSpec,
    SpeakerSpec,
    azimuth_of,
    binauralize,
    generate_corpus,
    load_clip,
    mirror_spec,
    read_manifest,
    render_scene,
    sample_scene,
)


def speaker(x, y=0.5, active=True, frames=5, **kwargs):
    return SpeakerSpec(
        id=kwargs.pop("id", "spk0"),
        radius=6,
        positions=[(x, y)] * frames,
        activity=[active] * frames,
        **kwargs,
    )


def scene(*speakers, **kwargs):
    return SceneSpec(height=32, width=48, seconds=1, speakers=list(speakers), seed=4, **kwargs)


def test_azimuth_mapping():
    assert azimuth_of(0.0) == -90.0
    assert azimuth_of(0.5) == 0.0
    assert azimuth_of(1.0) == 90.0
    assert azimuth_of(1.7) == 90.0


def test_binauralize_center_is_diotic(rng):
    mono = rng.standard_normal(4000)
    out = binauralize(mono, 0.0)
    assert out.shape == (2, 4000)
    assert np.array_equal(out[0], out[1])
    np.testing.assert_allclose(out[0], np.cos(np.pi / 4) * mono)


def test_binauralize_hard_left(rng):
    mono = rng.standard_normal(4000)
    out = binauralize(mono, -90.0)
    np.testing.assert_allclose(out[0], mono)
    assert np.max(np.abs(out[1])) < 1e-12


def test_binauralize_delays_far_ear(rng):
    mono = rng.standard_normal(32000)
    out = binauralize(mono, 45.0)
    left, right = out[0], out[1]

    # the left ear trails the right by 45 / 90 * 0.45 ms * 16 kHz = 3.6 samples
    pad = 16
    lags = list(range(-pad, pad + 1))
    corr = [np.dot(left[pad + k : len(mono) - pad + k], right[pad : len(mono) - pad]) for k in lags]
    assert lags[int(np.argmax(corr))] == 4


def test_binauralize_mirrored_azimuths_swap_channels(rng):
    mono = rng.standard_normal(2000)
    a, b = binauralize(mono, 30.0), binauralize(mono, -30.0)
    np.testing.assert_array_equal(a[0], b[1])
    np.testing.assert_array_equal(a[1], b[0])


def test_mirrored_scene_swaps_channels_and_flips_frames():
    spec = scene(speaker(0.25, id="a"), speaker(0.75, y=0.25, active=False, id="b", source="tone"))
    rendered = render_scene(spec)
    mirrored = render_scene(mirror_spec(spec))
    np.testing.assert_array_equal(mirrored.frames, rendered.frames[:, :, ::-1])
    np.testing.assert_allclose(mirrored.waveform, rendered.waveform[::-1], atol=1e-7)


def test_left_speaker_is_louder_on_the_left():
    rendered = render_scene(scene(speaker(0.2)))
    rms = np.sqrt(np.mean(rendered.waveform**2, axis=1))
    assert rms[0] > rms[1]


def test_stems_and_ambient_sum_to_the_mixture():
    rendered = render_scene(scene(speaker(0.25, id="a"), speaker(0.75, id="b", source="tone")))
    assert set(rendered.stems) == {"a", "b"}
    total = rendered.ambient + sum(rendered.stems.values())
    np.testing.assert_allclose(total, rendered.waveform, atol=1e-6)


def test_silent_speaker_leaves_only_ambient():
    rendered = render_scene(scene(speaker(0.5, active=False)))
    assert not np.any(rendered.stems["spk0"])
    np.testing.assert_array_equal(rendered.waveform, rendered.ambient)
    assert all(not s["active"] for f in rendered.labels["frames"] for s in f["speakers"])


def test_render_shapes_and_labels():
    rendered = render_scene(scene(speaker(0.5)))
    assert rendered.frames.shape == (5, 32, 48, 3)
    assert rendered.waveform.shape == (2, 16000)
    assert np.max(np.abs(rendered.waveform)) <= 1.0
    np.testing.assert_array_equal(np.round(rendered.frames * 255) / 255, rendered.frames)

    frame = rendered.labels["frames"][0]["speakers"][0]
    assert frame["id"] == "spk0" and frame["active"]
    x, y, w, h = frame["bbox"]
    assert x == pytest.approx(0.5 - 6 / 48) and w == pytest.approx(12 / 48)


def test_render_is_deterministic():
    spec = scene(speaker(0.3, seed=9))
    a, b = render_scene(spec), render_scene(spec)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.waveform, b.waveform)


def test_duplicate_ids_are_rejected():
    with pytest.raises(DataError, match="overlapping sprite ids"):
        render_scene(scene(speaker(0.25), speaker(0.75)))


def test_scene_validation():
    with pytest.raises(ValidationError, match="at least one speaker"):
        SceneSpec(speakers=[])
    with pytest.raises(ValidationError, match="divisible by 16"):
        SceneSpec(width=50, speakers=[speaker(0.5, frames=25)])
    with pytest.raises(ValidationError, match="unit square"):
        speaker(1.5)
    with pytest.raises(ValidationError, match="one entry per frame"):
        SpeakerSpec(id="x", positions=[(0.5, 0.5)], activity=[True, False])
    with pytest.raises(ValidationError, match="3 frames"):
        scene(speaker(0.5, frames=3))


def test_sample_scene_is_reproducible():
    config = CorpusConfig(n_scenes=3, height=48, width=64, sprite_radius=6)
    assert sample_scene(config, 1) == sample_scene(config, 1)
    assert sample_scene(config, 1) != sample_scene(config, 2)
    spec = sample_scene(config, 0)
    assert config.min_speakers <= len(spec.speakers) <= config.max_speakers
    assert spec.num_frames == 25


def test_corpus_layout(tmp_path):
    config = CorpusConfig(n_scenes=10, scene_seconds=5, height=48, width=64, sprite_radius=6)
    manifest = generate_corpus(config, tmp_path / "corpus")
    records = read_manifest(manifest)
    assert len(records) == 50
    assert records[0].clip_id == "scene0000-00"
    assert not (tmp_path / "corpus" / "manifest.jsonl.tmp").exists()

    scenes = {}
    for record in records:
        scenes.setdefault(record.scene_id, set()).add(record.split)
    assert all(len(splits) == 1 for splits in scenes.values())
    assert sum(r.split == "train" for r in records) == 40

    clip, labels = ManifestClips(manifest).load(7)
    assert clip.frames.shape == (5, 48, 64, 3)
    assert clip.waveform.shape == (2, 16000)
    assert len(labels["frames"]) == 5
    assert set(labels["stems"]) == {s["id"] for s in labels["frames"][0]["speakers"]}


def test_corpus_is_deterministic(tmp_path, small_corpus_config):
    a = generate_corpus(small_corpus_config, tmp_path / "a")
    b = generate_corpus(small_corpus_config, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()


def test_failed_corpus_keeps_earlier_media(tmp_path, monkeypatch):
    out = tmp_path / "corpus"
    config = CorpusConfig(n_scenes=2, scene_seconds=1, height=48, width=64, sprite_radius=6, max_speakers=2)
    manifest = generate_corpus(config, out)
    before = manifest.read_bytes()

    write_wav = scenes.write_wav

    def failing_write_wav(path, waveform, sample_rate):
        if "scene0003" in str(path):
            raise OSError("disk full")
        write_wav(path, waveform, sample_rate)

    monkeypatch.setattr(scenes, "write_wav", failing_write_wav)
    with pytest.raises(OSError, match="disk full"):
        generate_corpus(config.model_copy(update={"n_scenes": 4}), out)

    assert sorted(p.name for p in (out / "media").iterdir()) == ["scene0000", "scene0001"]
    assert manifest.read_bytes() == before
    assert not (out / "manifest.jsonl.tmp").exists()
    assert all((out / r.audio_path).is_file() for r in read_manifest(manifest))


def test_loaded_clip_matches_render(small_corpus, small_corpus_config):
    clips = ManifestClips(small_corpus)
    record = clips.records[0]
    rendered = render_scene(sample_scene(small_corpus_config, 0))

    clip, _ = load_clip(record, small_corpus.parent)
    assert record.clip_id == "scene0000-00"
    np.testing.assert_array_equal(clip.frames, rendered.frames[:5])
    np.testing.assert_array_equal(clip.waveform, rendered.waveform[:, :16000])
    assert len(clips[1:3]) == 2


def test_load_clip_rejects_bad_audio(tmp_path):
    np.save(tmp_path / "v.npy", np.zeros((5, 16, 16, 3), dtype=np.uint8))
    sf.write(tmp_path / "mono.wav", np.zeros(16000, dtype=np.float32), 16000)
    sf.write(tmp_path / "fast.wav", np.zeros((48000, 2), dtype=np.float32), 48000)

    mono = ManifestRecord(clip_id="m", video_path="v.npy", audio_path="mono.wav")
    with pytest.raises(DataError, match="mono.wav: expected 2 channels"):
        load_clip(mono, tmp_path)
    fast = ManifestRecord(clip_id="f", video_path="v.npy", audio_path="fast.wav")
    with pytest.raises(DataError, match="expected 16 kHz"):
        load_clip(fast, tmp_path)
