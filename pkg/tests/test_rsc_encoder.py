import pytest
import torch

from diff_fae.models.fae_model import resize_masks
from diff_fae.models.rsc_encoder import RSCEncoder, SlotAttention


@pytest.fixture
def rsc(tiny_config):
    torch.manual_seed(0)
    return RSCEncoder(tiny_config.rsc, tiny_config.image_size).eval()


def test_tokens_and_masks_shapes(rsc):
    semantic = rsc(torch.rand(2, 3, 32, 32))
    assert semantic.tokens.shape == (2, 4, 16)
    assert semantic.attn_masks.shape == (2, 4, 16, 16)
    assert semantic.num_tokens == 4


def test_masks_partition_every_position(rsc):
    masks = rsc(torch.rand(2, 3, 32, 32)).attn_masks
    assert masks.min() >= 0
    torch.testing.assert_close(masks.sum(dim=1), torch.ones(2, 16, 16))


def test_evaluation_tokens_are_deterministic(rsc):
    image = torch.rand(1, 3, 32, 32)
    torch.testing.assert_close(rsc(image).tokens, rsc(image).tokens)


def test_sampled_initialization_uses_generator(rsc):
    image = torch.rand(1, 3, 32, 32)
    a = rsc(image, sample=True, generator=torch.Generator().manual_seed(1)).tokens
    b = rsc(image, sample=True, generator=torch.Generator().manual_seed(1)).tokens
    c = rsc(image, sample=True, generator=torch.Generator().manual_seed(2)).tokens
    torch.testing.assert_close(a, b)
    assert not torch.allclose(a, c)


def test_slot_attention_is_permutation_equivariant():
    torch.manual_seed(0)
    attention = SlotAttention(dim=8, iterations=3, hidden_dim=16).eval()
    inputs = torch.randn(1, 20, 8)
    slots = torch.randn(1, 4, 8)
    order = torch.tensor([2, 0, 3, 1])
    tokens, masks = attention(inputs, slots)
    permuted_tokens, permuted_masks = attention(inputs, slots[:, order])
    torch.testing.assert_close(permuted_tokens, tokens[:, order], rtol=1e-5, atol=1e-5)
    torch.testing.assert_close(permuted_masks, masks[:, order], rtol=1e-5, atol=1e-5)


def test_slot_masks_follow_circular_shift():
    torch.manual_seed(0)
    attention = SlotAttention(dim=8, iterations=3, hidden_dim=16).eval()
    features = torch.randn(1, 8, 6, 6)
    position = 0.1 * torch.randn(1, 8, 6, 6)
    slots = torch.randn(1, 4, 8)
    shifts, dims = (2, -1), (2, 3)

    def masks_of(grid: torch.Tensor) -> torch.Tensor:
        _, masks = attention(grid.flatten(2).transpose(1, 2), slots)
        return masks.reshape(1, 4, 6, 6)

    masks = masks_of(features + position)
    shifted = masks_of(torch.roll(features, shifts, dims) + torch.roll(position, shifts, dims))
    torch.testing.assert_close(shifted, torch.roll(masks, shifts, dims), rtol=1e-5, atol=1e-5)


def test_slot_attention_rejects_non_finite_inputs():
    attention = SlotAttention(dim=8, iterations=1, hidden_dim=16)
    inputs = torch.randn(1, 5, 8)
    inputs[0, 0, 0] = float("nan")
    with pytest.raises(RuntimeError, match="non-finite"):
        attention(inputs, torch.randn(1, 2, 8))


def test_decoder_reconstructs_at_image_size(rsc):
    semantic = rsc(torch.rand(2, 3, 32, 32))
    rgb, alpha, merged = rsc.decode_slots(semantic.tokens)
    assert rgb.shape == (2, 4, 3, 32, 32)
    torch.testing.assert_close(alpha.sum(dim=1), torch.ones(2, 1, 32, 32))
    assert merged.shape == (2, 3, 32, 32)


def test_reconstruction_loss_backpropagates(rsc):
    rsc.train()
    loss = rsc.reconstruction_loss(torch.rand(2, 3, 32, 32), generator=torch.Generator().manual_seed(0))
    loss.backward()
    assert rsc.init_tokens.mu.grad is not None
    assert rsc.encoder.conv_in.weight.grad is not None


def test_slot_masks_upsample_to_image(rsc):
    masks = rsc.slot_masks(torch.rand(1, 3, 32, 32))
    assert masks.shape == (1, 4, 32, 32)


def test_wrong_image_size_raises(rsc):
    with pytest.raises(ValueError, match="Expected"):
        rsc(torch.rand(1, 3, 16, 16))


@pytest.mark.parametrize("size", [4, 32])
def test_resized_masks_stay_normalized(size):
    masks = torch.rand(2, 4, 16, 16).softmax(dim=1)
    resized = resize_masks(masks, size)
    assert resized.shape == (2, 4, size, size)
    torch.testing.assert_close(resized.sum(dim=1), torch.ones(2, size, size))


def test_reconstruction_gradient_matches_finite_differences(rsc):
    model = rsc.double()
    image = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    tokens = model(image, sample=False).tokens.detach().requires_grad_(True)

    def loss(t: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.mse_loss(model.decode_slots(t)[2], image)

    loss(tokens).backward()
    analytic = tokens.grad[0, 0]
    eps = 1e-6
    with torch.no_grad():
        for i in range(4):
            upper, lower = tokens.detach().clone(), tokens.detach().clone()
            upper[0, 0, i] += eps
            lower[0, 0, i] -= eps
            numeric = (loss(upper) - loss(lower)).item() / (2 * eps)
            assert abs(numeric - analytic[i].item()) <= 1e-3 * abs(analytic[i].item()) + 1e-9
