import numpy as np
import pytest
import torch

from egoav.asd import (
    ASDHead,
    FaceTrack,
    FusionDecoder,
    PredictionRow,
    asd_forward,
    build_asd_model,
    crop_face,
    evaluate_map,
    finetune_asd,
    fuse_features,
    load_asd,
    predict_tracks,
    read_predictions,
    score_predictions,
    score_predictions_file,
    write_predictions,
)
from egoav.config import ASDConfig, CorpusConfig, FusionConfig, MaskingConfig, ModelConfig, RunConfig, TrainConfig
from egoav.errors import DataError
from egoav.model import EncoderOutput
from egoav.pipeline import evaluate_asd_stage, finetune_asd_stage, load_tracks, pretrain
from egoav.scenes import ManifestClips, generate_corpus
from egoav.tokenizer import NormalizationStats, video_grid


IDENTITY = NormalizationStats.identity()


def brute_force_ap(scores, labels):
    """
    Mean over positives of the precision at that positive's score threshold.
    """
    positives = [i for i, label in enumerate(labels) if label == 1]
    total = 0.0
    for i in positives:
        above = [j for j in range(len(scores)) if scores[j] >= scores[i]]
        total += sum(labels[j] for j in above) / len(above)
    return total / len(positives)


@pytest.fixture
def asd_config():
    return ASDConfig(epochs=2, batch_size=4, crop_size=16)


@pytest.fixture
def train_tracks(small_corpus):
    return load_tracks(ManifestClips(small_corpus, split="train"), crop_size=16)


def test_map_hand_example():
    assert evaluate_map([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.8333, abs=1e-4)
    assert evaluate_map([0.9, 0.8, 0.7, 0.1], [1, 1, 0, 0]) == 1.0


def test_map_constant_scores_is_prevalence():
    labels = [1, 0, 0, 1, 0, 0, 0, 0]
    assert evaluate_map([0.5] * 8, labels) == pytest.approx(0.25)


def test_map_invariant_to_monotone_transform(rng):
    scores = rng.random(100)
    labels = (rng.random(100) < 0.3).astype(int)
    labels[0] = 1
    assert evaluate_map(np.exp(3 * scores) - 7, labels) == pytest.approx(evaluate_map(scores, labels), abs=1e-12)


def test_map_matches_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        labels = (rng.random(n) < rng.uniform(0.05, 0.9)).astype(int)
        labels[rng.integers(n)] = 1
        # coarse scores so that ties occur
        scores = rng.integers(0, 25, size=n) / 25.0
        assert evaluate_map(scores, labels) == pytest.approx(brute_force_ap(scores, labels), abs=1e-9)


def test_map_errors():
    with pytest.raises(DataError, match="undefined AP"):
        evaluate_map([0.1, 0.2], [0, 0])
    with pytest.raises(DataError):
        evaluate_map([0.1, 0.2], [1])


def test_fusion_output_shapes():
    fusion = FusionDecoder(96, FusionConfig()).eval()
    for tokens in (12, 400):
        enc = EncoderOutput(f_av=torch.randn(2, tokens, 96), num_video=6, video_coords=video_grid(1, 2, 3), audio_coords=None)
        assert fuse_features(enc, 5, fusion).shape == (2, 5, 128)

    wide = FusionDecoder(96, FusionConfig(out_dim=512)).eval()
    assert wide.decode(torch.randn(1, 20, 96), torch.arange(5)).shape == (1, 5, 512)
    assert wide(torch.randn(1, 20, 96), 5).shape == (1, 5, 128)


def test_fusion_duplicate_queries_give_identical_rows():
    fusion = FusionDecoder(96, FusionConfig()).eval()
    with torch.no_grad():
        out = fusion.decode(torch.randn(1, 30, 96), torch.tensor([0, 3, 3]))
    torch.testing.assert_close(out[0, 1], out[0, 2])
    assert not torch.equal(out[0, 0], out[0, 1])


def test_fusion_constant_memory_gives_constant_rows():
    fusion = FusionDecoder(96, FusionConfig()).eval()
    with torch.no_grad():
        fusion.memory_proj.weight.zero_()
        out = fusion.decode(torch.randn(1, 30, 96), torch.arange(5))
    for t in range(1, 5):
        torch.testing.assert_close(out[0, t], out[0, 0])


def test_fusion_needs_frames():
    fusion = FusionDecoder(96, FusionConfig())
    with pytest.raises(DataError, match="T=0"):
        fusion.decode(torch.randn(1, 10, 96), torch.arange(0))


def make_track(T=6, size=16, seed=0):
    gen = np.random.default_rng(seed)
    return FaceTrack(
        clip_id="clip",
        face_id="spk0",
        crops=gen.random((T, size, size, 3)),
        bboxes=gen.random((T, 4)),
        labels=gen.integers(0, 2, T),
    )


def test_head_scores_are_probabilities():
    head = ASDHead(ASDConfig()).eval()
    track = make_track()
    scores = asd_forward(head, track, torch.randn(6, 128))
    assert scores.shape == (6,)
    assert torch.all((scores > 0) & (scores < 1))


def test_head_is_per_frame():
    head = ASDHead(ASDConfig()).eval()
    track = make_track()
    fused = torch.randn(6, 128)
    perm = np.array([3, 0, 5, 1, 4, 2])
    permuted = FaceTrack(
        clip_id="clip", face_id="spk0", crops=track.crops[perm], bboxes=track.bboxes[perm], labels=track.labels[perm]
    )
    with torch.no_grad():
        a = asd_forward(head, track, fused)
        b = asd_forward(head, permuted, fused[torch.from_numpy(perm)])
    torch.testing.assert_close(b, a[torch.from_numpy(perm)])


def test_head_rejects_misaligned_inputs():
    head = ASDHead(ASDConfig())
    with pytest.raises(DataError, match="fused features cover 4 frames"):
        asd_forward(head, make_track(), torch.randn(4, 128))
    with pytest.raises(DataError):
        FaceTrack(clip_id="c", face_id="f", crops=np.zeros((3, 8, 8, 3)), bboxes=np.zeros((2, 4)))


@pytest.mark.parametrize("out_dim", [128, 512])
def test_fused_features_feed_the_head(out_dim):
    config = ASDConfig(fusion=FusionConfig(out_dim=out_dim))
    fusion = FusionDecoder(96, config.fusion).eval()
    head = ASDHead(config).eval()
    enc = EncoderOutput(f_av=torch.randn(1, 12, 96), num_video=6, video_coords=video_grid(1, 2, 3), audio_coords=None)
    with torch.no_grad():
        scores = asd_forward(head, make_track(T=5), fuse_features(enc, 5, fusion))
    assert scores.shape == (5,)
    assert torch.all((scores > 0) & (scores < 1))


def test_head_rejects_foreign_fused_features():
    head = ASDHead(ASDConfig())
    with pytest.raises(DataError, match="hold 2 clips"):
        asd_forward(head, make_track(), torch.randn(2, 6, 128))
    with pytest.raises(DataError, match="the head expects 128"):
        asd_forward(head, make_track(), torch.randn(6, 512))


def test_crop_face_size():
    frame = np.random.default_rng(0).random((48, 64, 3)).astype(np.float32)
    assert crop_face(frame, [0.1, 0.2, 0.25, 0.3], 16).shape == (16, 16, 3)
    assert crop_face(frame, [0.99, 0.99, 0.0, 0.0], 8).shape == (8, 8, 3)


def test_tracks_follow_labels(train_tracks):
    tracks, clips = train_tracks
    assert tracks
    for track in tracks:
        assert track.crops.shape == (clips[track.clip_id].num_frames, 16, 16, 3)
        assert set(np.unique(track.labels)) <= {0, 1}
        assert np.all((track.bboxes >= 0) & (track.bboxes <= 1))


def test_finetune_decays_both_groups(train_tracks, tiny_model_config, asd_config):
    tracks, clips = train_tracks
    model, _ = build_asd_model(asd_config, None, tiny_model_config)
    result = finetune_asd(model, tracks, clips, IDENTITY, asd_config, device="cpu")
    assert result.lrs[0] == pytest.approx((1e-4 * 0.95, 1e-5 * 0.95))
    assert result.lrs[1] == pytest.approx((1e-4 * 0.95**2, 1e-5 * 0.95**2))
    assert all(np.isfinite(result.losses))


def test_frozen_encoder_is_untouched(train_tracks, tiny_model_config):
    tracks, clips = train_tracks
    config = ASDConfig(epochs=1, batch_size=4, crop_size=16, freeze_pretrained=True)
    model, _ = build_asd_model(config, None, tiny_model_config)
    encoder = [p.detach().clone() for p in model.encoder.parameters()]
    head = [p.detach().clone() for p in model.head.parameters()]

    finetune_asd(model, tracks, clips, IDENTITY, config, device="cpu")
    for old, new in zip(encoder, model.encoder.parameters()):
        assert torch.equal(old, new)
        assert new.grad is None
    assert any(not torch.equal(old, new) for old, new in zip(head, model.head.parameters()))


def test_finetune_needs_labels(train_tracks, tiny_model_config, asd_config):
    tracks, clips = train_tracks
    unlabeled = [FaceTrack(t.clip_id, t.face_id, t.crops, t.bboxes) for t in tracks]
    model, _ = build_asd_model(asd_config, None, tiny_model_config)
    with pytest.raises(DataError, match="label-free"):
        finetune_asd(model, unlabeled, clips, IDENTITY, asd_config, device="cpu")


def test_checkpoint_and_predictions(tmp_path, train_tracks, tiny_model_config):
    tracks, clips = train_tracks
    config = ASDConfig(epochs=1, batch_size=4, crop_size=16, max_steps=1)
    model, _ = build_asd_model(config, None, tiny_model_config)
    finetune_asd(model, tracks, clips, IDENTITY, config, workdir=tmp_path, device="cpu")
    assert (tmp_path / "metrics.jsonl").is_file()

    restored, stats = load_asd(tmp_path / "asd.pt")
    assert stats == IDENTITY
    rows = predict_tracks(model, tracks, clips, IDENTITY, device="cpu")
    again = predict_tracks(restored, tracks, clips, IDENTITY, device="cpu")
    assert [r.score for r in rows] == [r.score for r in again]
    assert len(rows) == sum(t.num_frames for t in tracks)
    assert all(0.0 < r.score < 1.0 for r in rows)

    path = write_predictions(rows, tmp_path / "predictions.csv")
    assert read_predictions(path) == rows


def test_predictions_file_is_scored_like_rows(tmp_path):
    rows = [
        PredictionRow("c", "a", 0, 0.9, 1),
        PredictionRow("c", "a", 1, 0.8, 0),
        PredictionRow("c", "b", 0, 0.7, 1),
        PredictionRow("c", "b", 1, 0.6, -1),
    ]
    path = write_predictions(rows, tmp_path / "p.csv")
    assert score_predictions_file(path) == score_predictions(rows) == pytest.approx(0.8333, abs=1e-4)


@pytest.mark.slow
def test_overfit_four_tracks(train_tracks, tiny_model_config):
    tracks, clips = train_tracks
    labeled = [t for t in tracks if 0 < t.labels.sum() < t.num_frames][:4] or tracks[:4]
    config = ASDConfig(epochs=200, batch_size=4, crop_size=16, head_lr=1e-3, max_steps=200)
    model, _ = build_asd_model(config, None, tiny_model_config)
    finetune_asd(model, labeled, clips, IDENTITY, config, device="cpu")
    rows = predict_tracks(model, labeled, clips, IDENTITY, device="cpu")
    assert score_predictions(rows) == pytest.approx(1.0)


@pytest.mark.slow
def test_pretrained_features_beat_scratch(tmp_path):
    config = RunConfig(
        corpus=CorpusConfig(n_scenes=60, scene_seconds=5, height=96, width=128, sprite_radius=12, min_speakers=2),
        model=ModelConfig.tiny(),
        train=TrainConfig(epochs=40, warmup_epochs=2, batch_size=16, peak_lr=5e-4, masking=MaskingConfig(r=1.0)),
        asd=ASDConfig(epochs=10, batch_size=16, crop_size=32),
    )
    manifest = generate_corpus(config.corpus, tmp_path / "corpus")
    checkpoint, _ = pretrain(config, manifest, tmp_path / "pretrain")

    reports = {}
    for name, source in (("pretrained", checkpoint), ("scratch", None)):
        model, stats = finetune_asd_stage(config, manifest, tmp_path / name, source)
        reports[name] = evaluate_asd_stage(model, stats, manifest, tmp_path / name)

    assert 100 * (reports["pretrained"].map - reports["scratch"].map) >= 3.0
    for report in reports.values():
        assert report.map > report.prevalence
