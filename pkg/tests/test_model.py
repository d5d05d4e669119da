import numpy as np
import pytest
import torch

from egoav.config import ModelConfig
from egoav.errors import ConfigError, DataError
from egoav.masking import MaskSpec, channel_mask, mask_batch, token_mask
from egoav.model import SpatialMAE, masked_mse, sincos_embedding
from egoav.tokenizer import audio_grid, video_grid


def small_config(**overrides):
    values = dict(
        enc_layers_uni=2,
        enc_layers_shared=2,
        enc_dim=48,
        enc_heads=4,
        dec_layers_shared=1,
        dec_layers_audio=1,
        dec_dim=24,
        dec_heads=4,
        video_patch=4,
        tubelet_depth=1,
        audio_patch=(2, 4),
    )
    values.update(overrides)
    return ModelConfig(**values)


def make_inputs(config, batch=2, seed=0, dtype=torch.float32):
    """
    6 video tokens on a 1x2x3 grid and 12 audio tokens (2 channels x 3 x 2).
    """
    gen = torch.Generator().manual_seed(seed)
    video = torch.randn(batch, 6, config.video_token_dim, generator=gen, dtype=dtype)
    audio = torch.randn(batch, 12, config.audio_token_dim, generator=gen, dtype=dtype)
    return video, video_grid(1, 2, 3), audio, audio_grid(3, 2)


def test_identical_coordinates_identical_embeddings():
    coords = torch.tensor([[1, 2, 3], [4, 5, 6], [1, 2, 3]])
    emb = sincos_embedding(coords, 48)
    assert torch.equal(emb[0], emb[2])
    assert not torch.equal(emb[0], emb[1])


def test_zero_coordinates_alternate_zero_one():
    emb = sincos_embedding(torch.zeros(1, 3, dtype=torch.long), 48)[0]
    assert emb[0::2].eq(0).all()
    assert emb[1::2].eq(1).all()


def test_embedding_similarity_decays_with_distance():
    dim = 384
    coords = torch.stack([torch.arange(49), torch.zeros(49, dtype=torch.long)], dim=1)
    emb = sincos_embedding(coords, dim).double()
    sims = torch.nn.functional.cosine_similarity(emb[:1], emb, dim=1)

    omega = 10000.0 ** (-2.0 * np.arange(dim // 4) / (dim // 2))
    closed_form = [(np.cos(d * omega).sum() + dim // 4) / (dim // 2) for d in range(49)]
    np.testing.assert_allclose(sims.numpy(), closed_form, atol=1e-6)
    assert sims[0].item() == pytest.approx(1.0)
    assert torch.all(sims[1:] < 1.0)
    assert sims[1] > sims[48]


def test_embedding_dim_must_split_across_axes():
    with pytest.raises(ConfigError, match="not divisible"):
        sincos_embedding(torch.zeros(2, 3), 50)


def test_encoder_rows_for_full_size_clip(tiny_model_config):
    model = SpatialMAE(tiny_model_config)
    video = torch.randn(1, 330, tiny_model_config.video_token_dim)
    audio = torch.randn(1, 784, 32)
    batch = mask_batch(audio, audio_grid(49, 8), [channel_mask("R")])
    with torch.no_grad():
        enc = model.encode(video, video_grid(1, 15, 22), batch.unmasked_tokens, batch.unmasked_coords, batch.target_coords)
        pred = model.decode(enc)
    assert enc.f_av.shape == (1, 722, 96)
    assert enc.f_v.shape[1] == 330 and enc.f_a.shape[1] == 392
    assert pred.shape == (1, 392, 32)


def test_all_audio_masked():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    spec = token_mask(np.random.default_rng(0), 1.0, 12)
    batch = mask_batch(audio, ac, [spec, spec])
    with torch.no_grad():
        enc = model.encode(video, vc, batch.unmasked_tokens, batch.unmasked_coords, batch.target_coords)
        pred = model.decode(enc)
    assert enc.f_av.shape[1] == 6
    assert pred.shape == (2, 12, config.audio_token_dim)


def test_empty_mask_gives_empty_prediction():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    batch = mask_batch(audio, ac, [MaskSpec.empty(12), MaskSpec.empty(12)])
    with torch.no_grad():
        enc = model.encode(video, vc, batch.unmasked_tokens, batch.unmasked_coords, batch.target_coords)
        pred = model.decode(enc)
    assert pred.shape == (2, 0, config.audio_token_dim)
    with pytest.raises(DataError, match="no masked tokens"):
        model.loss(pred, batch.target_tokens)


def test_masked_values_never_reach_the_encoder():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    specs = [channel_mask("L", 12), channel_mask("R", 12)]
    perturbed = audio.clone()
    for row, spec in enumerate(specs):
        perturbed[row, spec.masked_tensor()] += 100.0

    outputs = []
    for tokens in (audio, perturbed):
        batch = mask_batch(tokens, ac, specs)
        with torch.no_grad():
            outputs.append(model.encode(video, vc, batch.unmasked_tokens, batch.unmasked_coords).f_av)
    assert torch.equal(outputs[0], outputs[1])


def test_gradient_only_at_masked_positions():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config, batch=1)
    spec = token_mask(np.random.default_rng(1), 0.5, 12)
    batch = mask_batch(audio, ac, [spec])

    full_target = audio.clone().requires_grad_(True)
    _, pred = model(video, vc, batch)
    loss = model.loss(pred, full_target[:, spec.masked_tensor()])
    loss.backward()
    grad = full_target.grad[0].abs().sum(dim=-1)
    assert torch.all(grad[spec.unmasked_tensor()] == 0)
    assert torch.all(grad[spec.masked_tensor()] > 0)


def test_video_conditions_the_prediction():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    batch = mask_batch(audio, ac, [channel_mask("L", 12)] * 2)
    changed = video.clone()
    changed[:, 3] += 1.0
    with torch.no_grad():
        _, a = model(video, vc, batch)
        _, b = model(changed, vc, batch)
    assert not torch.allclose(a, b)


def test_masked_positions_get_distinct_predictions():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config, batch=1)
    with torch.no_grad():
        _, pred = model(video, vc, mask_batch(audio, ac, [channel_mask("R", 12)]))
    assert not torch.allclose(pred[0, 0], pred[0, 1])


def test_permuting_audio_permutes_features_without_embeddings(monkeypatch):
    monkeypatch.setattr(
        "egoav.model.sincos_embedding",
        lambda coords, dim, temperature=10000.0: torch.zeros(*coords.shape[:-1], dim),
    )
    config = small_config()
    model = SpatialMAE(config)
    with torch.no_grad():
        model.encoder.channel_embed.zero_()
        model.encoder.modality_embed.zero_()
    video, vc, audio, ac = make_inputs(config, batch=1)
    coords = ac[None]
    perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))

    with torch.no_grad():
        base = model.encode(video, vc, audio, coords).f_a
        permuted = model.encode(video, vc, audio[:, perm], coords[:, perm]).f_a
    torch.testing.assert_close(permuted, base[:, perm], atol=1e-5, rtol=1e-5)


def test_loss_is_mean_of_summed_squares():
    assert masked_mse(torch.ones(2, 32), torch.ones(2, 32)).item() == 0.0
    assert masked_mse(torch.ones(2, 32), torch.zeros(2, 32)).item() == pytest.approx(32.0)

    gen = torch.Generator().manual_seed(0)
    pred, target = torch.randn(7, 32, generator=gen), torch.randn(7, 32, generator=gen)
    brute = 0.0
    for i in range(7):
        for j in range(32):
            brute += (pred[i, j].item() - target[i, j].item()) ** 2
    assert masked_mse(pred, target).item() == pytest.approx(brute / 7, rel=1e-6)
    assert masked_mse(pred, target, per_element=True).item() == pytest.approx(brute / (7 * 32), rel=1e-6)


def test_gradients_match_finite_differences():
    config = small_config()
    model = SpatialMAE(config).double()
    video, vc, audio, ac = make_inputs(config, dtype=torch.float64)
    batch = mask_batch(audio, ac, [channel_mask("L", 12), channel_mask("R", 12)])

    loss = model(video, vc, batch)[0]
    loss.backward()

    eps = 1e-6
    params = [
        model.encoder.video_proj.weight,
        model.encoder.av_blocks[0].attn.qkv.weight,
        model.encoder.channel_embed,
        model.decoder.mask_token,
        model.decoder.head.bias,
    ]
    with torch.no_grad():
        for param in params:
            flat, grad = param.view(-1), param.grad.view(-1)
            for i in grad.abs().topk(3).indices.tolist():
                original = flat[i].item()
                flat[i] = original + eps
                up = model(video, vc, batch)[0].item()
                flat[i] = original - eps
                down = model(video, vc, batch)[0].item()
                flat[i] = original
                numeric = (up - down) / (2 * eps)
                assert abs(numeric - grad[i].item()) <= 1e-5 * abs(grad[i].item())


def test_initialization():
    config = small_config(dec_dim=384, dec_heads=6)
    model = SpatialMAE(config)
    for module in model.modules():
        if isinstance(module, torch.nn.LayerNorm):
            assert torch.all(module.weight == 1.0)
            assert torch.all(module.bias == 0.0)
    assert 0.012 <= model.decoder.mask_token.std().item() <= 0.028
    for table in (model.encoder.channel_embed, model.encoder.modality_embed, model.decoder.channel_embed):
        assert table.abs().max().item() <= 0.04


def test_initialization_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    a = SpatialMAE(small_config(seed=7))
    after = torch.rand(1)
    b = SpatialMAE(small_config(seed=7))
    assert torch.equal(before, after)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_token_dim_mismatch():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    with pytest.raises(DataError, match="video token dim"):
        model.encode(video[..., :10], vc, audio, ac[None].expand(2, -1, -1))


def test_decode_needs_mask():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config)
    enc = model.encode(video, vc, audio, ac[None].expand(2, -1, -1))
    with pytest.raises(DataError, match="no MaskSpec"):
        model.decode(enc)


def test_attention_maps_full_size_grid(tiny_model_config):
    model = SpatialMAE(tiny_model_config).eval()
    video = torch.randn(1, 330, tiny_model_config.video_token_dim)
    coords = audio_grid(49, 8)[:392][None]
    maps = model.attention_maps(video, video_grid(1, 15, 22), torch.randn(1, 392, 32), coords)
    assert maps.shape == (1, 15, 22)
    assert maps.min().item() >= 0.0
    assert maps.max().item() == pytest.approx(1.0)
    again = model.attention_maps(video, video_grid(1, 15, 22), torch.randn(1, 392, 32), coords)
    assert again.shape == maps.shape


def test_uniform_attention_gives_constant_map():
    config = small_config()
    model = SpatialMAE(config).eval()
    attn = model.encoder.av_blocks[-1].attn
    with torch.no_grad():
        attn.qkv.weight[: config.enc_dim] = 0.0
        attn.qkv.bias[: config.enc_dim] = 0.0
    video, vc, audio, ac = make_inputs(config, batch=1)
    maps = model.attention_maps(video, vc, audio, ac[None])
    torch.testing.assert_close(maps, torch.ones(1, 2, 3))


def test_attention_map_errors():
    config = small_config()
    model = SpatialMAE(config)
    video, vc, audio, ac = make_inputs(config, batch=1)
    with pytest.raises(ConfigError, match="invalid layer"):
        model.attention_maps(video, vc, audio, ac[None], layer_idx=2)
    with pytest.raises(DataError):
        model.attention_maps(video, vc, audio[:, :0], ac[None, :0])
