import pytest
import torch

from diff_fae.models.diffusion import (
    LatentDiffusion,
    NoiseSchedule,
    ddim_sample,
    ddim_timesteps,
    diffusion_loss,
    loss_acr,
    loss_ldm,
    merge_cross_attention,
    q_sample,
)
from diff_fae.models.unet import ConditionalUNet
from diff_fae.utils.config_loader import DiffusionConfig

LATENT = 8
TOKENS = 4
ID_DIM = 6


def toy_config(**kwargs) -> DiffusionConfig:
    values = dict(timesteps=50, latent_channels=4, base_channels=8, channel_multipliers=[1, 2], num_res_blocks=1,
                  attention_resolutions=[8, 4], num_heads=2, context_dim=8, use_identity=True)
    values.update(kwargs)
    return DiffusionConfig(**values)


def toy_inputs(dtype=torch.float32, batch: int = 2):
    generator = torch.Generator().manual_seed(0)
    z0 = torch.randn(batch, 4, LATENT, LATENT, generator=generator).to(dtype)
    f_r = torch.randn(batch, 4, LATENT, LATENT, generator=generator).to(dtype)
    tokens = torch.randn(batch, TOKENS, 8, generator=generator).to(dtype)
    f_id = torch.nn.functional.normalize(torch.randn(batch, ID_DIM, generator=generator), dim=-1).to(dtype)
    masks = torch.randn(batch, TOKENS, LATENT, LATENT, generator=generator).softmax(dim=1).to(dtype)
    return z0, f_r, tokens, f_id, masks


@pytest.fixture
def unet():
    torch.manual_seed(0)
    return ConditionalUNet(toy_config(), LATENT, id_dim=ID_DIM)


def test_schedule_is_decreasing_from_one():
    schedule = NoiseSchedule(timesteps=50)
    assert schedule.alpha_bar[0].item() == 1.0
    assert torch.all(schedule.alpha_bar[1:] < schedule.alpha_bar[:-1])
    assert 0 < schedule.alpha_bar[-1].item() < 1


def test_q_sample_mixes_signal_and_noise():
    schedule = NoiseSchedule(timesteps=50)
    z0, noise = torch.ones(1, 1, 2, 2), torch.full((1, 1, 2, 2), 2.0)
    t = torch.tensor([10])
    alpha_bar = schedule.alpha_bar[10]
    expected = alpha_bar.sqrt() + 2.0 * (1 - alpha_bar).sqrt()
    torch.testing.assert_close(q_sample(schedule, z0, t, noise), expected.expand(1, 1, 2, 2))


@pytest.mark.parametrize("t", [0, 51])
def test_q_sample_rejects_out_of_range_timesteps(t):
    schedule = NoiseSchedule(timesteps=50)
    with pytest.raises(ValueError, match="Timesteps"):
        q_sample(schedule, torch.zeros(1, 1, 2, 2), torch.tensor([t]), torch.zeros(1, 1, 2, 2))


def test_bad_betas_raise():
    with pytest.raises(ValueError):
        NoiseSchedule(timesteps=10, beta_start=0.1, beta_end=0.01)


def test_perfect_predictor_has_zero_loss():
    noise = torch.randn(2, 4, 3, 3)
    assert loss_ldm(noise, noise.clone()).item() == 0.0


def test_uniform_attention_against_one_hot_masks():
    attention = torch.full((1, 4, 2, 2), 0.25)
    masks = torch.zeros(1, 4, 2, 2)
    masks[:, 0] = 1.0
    assert loss_acr(attention, masks).item() == pytest.approx(0.1875)


def test_acr_shape_mismatch_raises():
    with pytest.raises(ValueError, match="differ in shape"):
        loss_acr(torch.zeros(1, 4, 2, 2), torch.zeros(1, 3, 2, 2))


def test_merge_single_layer_at_target_resolution():
    probs = torch.rand(2, 16, TOKENS).softmax(dim=-1)
    merged = merge_cross_attention([probs], 4)
    torch.testing.assert_close(merged, probs.transpose(1, 2).reshape(2, TOKENS, 4, 4))


def test_merged_attention_sums_to_one_per_pixel():
    layers = [torch.rand(1, n, TOKENS).softmax(dim=-1) for n in (64, 16, 4)]
    merged = merge_cross_attention(layers, LATENT)
    assert merged.shape == (1, TOKENS, LATENT, LATENT)
    torch.testing.assert_close(merged.sum(dim=1), torch.ones(1, LATENT, LATENT))


def test_attention_rows_are_probability_vectors(unet):
    z0, f_r, tokens, f_id, _ = toy_inputs()
    _, record = unet(z0, torch.tensor([5, 40]), f_r, tokens, f_id, return_attention=True)
    assert len(record) >= 3
    for probs in record:
        assert probs.min() >= 0
        torch.testing.assert_close(probs.sum(dim=-1), torch.ones(probs.shape[:2]))


def test_identity_token_is_required(unet):
    z0, f_r, tokens, _, _ = toy_inputs()
    with pytest.raises(ValueError, match="f_id is required"):
        unet(z0, torch.tensor([1, 2]), f_r, tokens, None)


def test_token_size_must_match_context(unet):
    z0, f_r, _, f_id, _ = toy_inputs()
    with pytest.raises(ValueError, match="context_dim"):
        unet(z0, torch.tensor([1, 2]), f_r, torch.randn(2, TOKENS, 5), f_id)


def test_zeroed_key_value_projections_ignore_tokens(unet):
    for attention in unet.cross_attention_modules():
        torch.nn.init.zeros_(attention.to_k.weight)
        torch.nn.init.zeros_(attention.to_v.weight)
    z0, f_r, tokens, f_id, _ = toy_inputs()
    t = torch.tensor([3, 30])
    with torch.no_grad():
        a = unet(z0, t, f_r, tokens, f_id)
        b = unet(z0, t, f_r, torch.randn_like(tokens), f_id)
    torch.testing.assert_close(a, b)


def test_zero_acr_weight_leaves_gradients_of_denoising_loss(unet):
    z0, f_r, tokens, f_id, masks = toy_inputs()
    schedule = NoiseSchedule(timesteps=50)

    def gradients(query_masks):
        unet.zero_grad()
        losses = diffusion_loss(unet, schedule, z0, f_r, tokens, f_id, query_masks, 0.0,
                                torch.Generator().manual_seed(3))
        losses.total.backward()
        return [p.grad.clone() for p in unet.parameters() if p.grad is not None]

    with_masks, without_masks = gradients(masks), gradients(None)
    assert len(with_masks) == len(without_masks)
    for a, b in zip(with_masks, without_masks):
        torch.testing.assert_close(a, b, rtol=0, atol=0)


def test_denoiser_gradient_matches_finite_differences():
    torch.manual_seed(0)
    unet = ConditionalUNet(toy_config(), LATENT, id_dim=ID_DIM).double()
    schedule = NoiseSchedule(timesteps=50)
    z0, f_r, tokens, f_id, masks = toy_inputs(torch.float64)
    weight = unet.cross_attention_modules()[0].to_k.weight

    def total_loss() -> torch.Tensor:
        losses = diffusion_loss(unet, schedule, z0, f_r, tokens, f_id, masks, 0.5,
                                torch.Generator().manual_seed(7))
        return losses.total

    unet.zero_grad()
    total_loss().backward()
    analytic = weight.grad.reshape(-1)[:4].clone()

    eps = 1e-6
    flat = weight.data.view(-1)
    with torch.no_grad():
        for i in range(4):
            original = flat[i].item()
            flat[i] = original + eps
            upper = total_loss().item()
            flat[i] = original - eps
            lower = total_loss().item()
            flat[i] = original
            numeric = (upper - lower) / (2 * eps)
            assert abs(numeric - analytic[i].item()) <= 1e-3 * abs(analytic[i].item()) + 1e-8


def test_ddim_timesteps_descend_from_total():
    steps = ddim_timesteps(50, 4)
    assert steps[0] == 50 and steps[-1] == 1
    assert steps == sorted(steps, reverse=True) and len(steps) == 4


def test_ddim_rejects_more_steps_than_timesteps():
    with pytest.raises(ValueError, match="exceeds"):
        ddim_timesteps(10, 11)


def test_ddim_recovers_signal_with_oracle_noise():
    schedule = NoiseSchedule(timesteps=50)
    target = torch.randn(1, 2, 3, 3, generator=torch.Generator().manual_seed(1))

    def oracle(z_t, t):
        alpha_bar = schedule.alpha_bar[t].reshape(-1, 1, 1, 1)
        return (z_t - alpha_bar.sqrt() * target) / (1 - alpha_bar).sqrt()

    torch.testing.assert_close(ddim_sample(oracle, schedule, target.shape, steps=5, seed=0), target)


def test_sampling_is_seed_deterministic():
    torch.manual_seed(0)
    model = LatentDiffusion(toy_config(ddim_steps=3), LATENT, id_dim=ID_DIM).eval()
    _, f_r, tokens, f_id, _ = toy_inputs()
    a = model.sample(f_r, tokens, f_id, steps=3, seed=11)
    b = model.sample(f_r, tokens, f_id, steps=3, seed=11)
    c = model.sample(f_r, tokens, f_id, steps=3, seed=12)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert not torch.allclose(a, c)


def test_latent_scale_normalizes_std():
    model = LatentDiffusion(toy_config(), LATENT, id_dim=ID_DIM)
    latents = 5.0 * torch.randn(4, 4, LATENT, LATENT)
    model.set_latent_scale(latents)
    assert (latents * model.latent_scale).std().item() == pytest.approx(1.0, rel=1e-5)


def test_attention_maps_cover_each_requested_timestep():
    torch.manual_seed(0)
    model = LatentDiffusion(toy_config(), LATENT, id_dim=ID_DIM).eval()
    z0, f_r, tokens, f_id, _ = toy_inputs()
    records = model.attention_maps(z0, f_r, tokens, f_id, [40, 10], seed=0)
    assert len(records) == 2
    merged = merge_cross_attention(records[0], LATENT)
    assert merged.shape == (2, TOKENS, LATENT, LATENT)
