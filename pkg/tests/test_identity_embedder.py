import pytest
import torch
import torch.nn.functional as F

from diff_fae.models.identity_embedder import (
    ArcMarginHead,
    IdentityEmbedder,
    IdentityModulation,
    adain,
    adain_inject,
)


@pytest.fixture
def embedder(tiny_config):
    torch.manual_seed(0)
    return IdentityEmbedder(tiny_config.identity, tiny_config.image_size).eval()


def test_embeddings_are_unit_norm(embedder):
    tokens = embedder(torch.rand(3, 3, 32, 32))
    assert tokens.shape == (3, 8)
    torch.testing.assert_close(tokens.norm(dim=-1), torch.ones(3))


def test_untrained_embedder_refuses_to_embed(embedder):
    with pytest.raises(RuntimeError, match="train-id"):
        embedder.embed(torch.rand(1, 3, 32, 32))
    embedder.mark_trained()
    assert embedder.embed(torch.rand(1, 3, 32, 32)).shape == (1, 8)


def test_zero_margin_gives_scaled_cosine():
    torch.manual_seed(0)
    head = ArcMarginHead(embedding_dim=8, n_classes=5, margin=0.0, scale=16.0)
    embeddings = F.normalize(torch.randn(4, 8), dim=-1)
    labels = torch.tensor([0, 1, 2, 3])
    expected = 16.0 * F.linear(embeddings, F.normalize(head.weight, dim=-1))
    torch.testing.assert_close(head(embeddings, labels), expected)


def test_margin_only_penalizes_the_target_class():
    torch.manual_seed(0)
    plain = ArcMarginHead(embedding_dim=8, n_classes=5, margin=0.0)
    margin = ArcMarginHead(embedding_dim=8, n_classes=5, margin=0.3)
    margin.load_state_dict(plain.state_dict())
    embeddings = F.normalize(torch.randn(4, 8), dim=-1)
    labels = torch.tensor([0, 1, 2, 3])
    a, b = plain(embeddings, labels), margin(embeddings, labels)
    target = F.one_hot(labels, 5).bool()
    torch.testing.assert_close(a[~target], b[~target])
    assert torch.all(b[target] < a[target])


def test_margin_still_penalizes_near_antipodal_embeddings():
    head = ArcMarginHead(embedding_dim=2, n_classes=2, margin=0.2, scale=1.0)
    plain = ArcMarginHead(embedding_dim=2, n_classes=2, margin=0.0, scale=1.0)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2))
        plain.weight.copy_(torch.eye(2))
    embeddings = torch.tensor([[-1.0, 0.05]])
    labels = torch.tensor([0])
    assert head(embeddings, labels)[0, 0] < plain(embeddings, labels)[0, 0]


def test_margin_logit_decreases_with_target_angle():
    head = ArcMarginHead(embedding_dim=2, n_classes=2, margin=0.5, scale=1.0)
    with torch.no_grad():
        head.weight.copy_(torch.eye(2))
    angles = torch.linspace(0.0, 3.1, 64)
    embeddings = torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1)
    logits = head(embeddings, torch.zeros(64, dtype=torch.long))[:, 0]
    assert torch.all(logits[1:] < logits[:-1])


def test_fresh_modulation_is_plain_instance_norm():
    modulation = IdentityModulation(id_dim=8, channels=6)
    features = torch.randn(2, 6, 4, 4)
    out = adain_inject(features, torch.randn(2, 8), modulation)
    torch.testing.assert_close(out, F.instance_norm(features, eps=1e-5))


def test_adain_applies_scale_and_bias():
    features = torch.randn(1, 2, 3, 3)
    scale, bias = torch.tensor([[2.0, 0.5]]), torch.tensor([[1.0, -1.0]])
    out = adain(features, scale, bias)
    normalized = F.instance_norm(features, eps=1e-5)
    torch.testing.assert_close(out[:, 0], 2.0 * normalized[:, 0] + 1.0)
    torch.testing.assert_close(out[:, 1], 0.5 * normalized[:, 1] - 1.0)


def test_channel_mismatch_raises():
    modulation = IdentityModulation(id_dim=8, channels=4)
    with pytest.raises(ValueError, match="channels"):
        adain_inject(torch.randn(1, 6, 4, 4), torch.randn(1, 8), modulation)


def test_adain_output_statistics():
    torch.manual_seed(0)
    features = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    scale = torch.tensor([[1.5, -0.5, 2.0], [0.3, 1.0, -1.2]], dtype=torch.float64)
    bias = torch.tensor([[0.1, -0.2, 0.3], [1.0, 0.0, -1.0]], dtype=torch.float64)
    out = adain(features, scale, bias)
    torch.testing.assert_close(out.mean(dim=(2, 3)), bias, rtol=0, atol=1e-4)
    torch.testing.assert_close(out.std(dim=(2, 3), unbiased=False), scale.abs(), rtol=0, atol=1e-4)


def test_adain_on_constant_channel_returns_bias():
    features = torch.full((1, 1, 4, 4), 3.0)
    out = adain(features, torch.tensor([[2.0]]), torch.tensor([[0.7]]))
    torch.testing.assert_close(out, torch.full_like(out, 0.7), rtol=0, atol=1e-2)


def test_adain_is_idempotent_on_statistics():
    torch.manual_seed(1)
    features = torch.randn(1, 4, 6, 6)
    scale, bias = torch.rand(1, 4) + 0.5, torch.randn(1, 4)
    out = adain(features, scale, bias)
    torch.testing.assert_close(adain(out, scale, bias), out, rtol=0, atol=1e-4)
