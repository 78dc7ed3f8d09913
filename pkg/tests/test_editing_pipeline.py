import pytest
import torch

from diff_fae.data.dataset import image_to_tensor, load_manifest, load_pair_record
from diff_fae.models.rsc_encoder import SemanticTokens
from diff_fae.pipeline import EditingPipeline, condition_images
from diff_fae.utils.errors import MissingPrerequisiteError
from diff_fae.utils.image_io import load_png


def tokens(value: float) -> SemanticTokens:
    return SemanticTokens(tokens=torch.full((2, 4, 6), value), attn_masks=torch.full((2, 4, 3, 3), 0.25))


def test_swap_replaces_only_named_tokens():
    mixed = EditingPipeline.swap_tokens(tokens(0.0), tokens(1.0), [3, 1])
    assert torch.all(mixed.tokens[:, [1, 3]] == 1.0)
    assert torch.all(mixed.tokens[:, [0, 2]] == 0.0)
    assert mixed.attn_masks is None


def test_swap_leaves_inputs_untouched():
    source = tokens(0.0)
    EditingPipeline.swap_tokens(source, tokens(1.0), [0])
    assert torch.all(source.tokens == 0.0)


def test_empty_swap_is_identity():
    mixed = EditingPipeline.swap_tokens(tokens(0.5), tokens(1.0), [])
    torch.testing.assert_close(mixed.tokens, tokens(0.5).tokens)


def test_swap_rejects_out_of_range_index():
    with pytest.raises(IndexError, match="out of range"):
        EditingPipeline.swap_tokens(tokens(0.0), tokens(1.0), [4])


def test_swap_rejects_mismatched_shapes():
    donor = SemanticTokens(tokens=torch.zeros(2, 5, 6), attn_masks=None)
    with pytest.raises(ValueError, match="differ"):
        EditingPipeline.swap_tokens(tokens(0.0), donor, [0])


def test_mask_tiles_end_with_colored_argmax():
    masks = torch.rand(4, 8, 8).softmax(dim=0)
    tiles = EditingPipeline.mask_tiles(masks)
    assert len(tiles) == 5
    assert tiles[0].shape == (8, 8, 1)
    assert tiles[-1].shape == (8, 8, 3)


def test_pipeline_needs_a_dataset(empty_config):
    with pytest.raises(MissingPrerequisiteError, match="synth-data"):
        EditingPipeline(empty_config)


def test_pipeline_needs_trained_checkpoints(tiny_config):
    with pytest.raises(MissingPrerequisiteError, match="train-ae"):
        EditingPipeline(tiny_config)


def test_condition_images_match_stored_renders(data_root, template):
    records = load_manifest(data_root, "test")
    coeffs = [load_pair_record(data_root, r)["query_coeffs"] for r in records]
    images, coverage = condition_images(template, coeffs, 32)
    assert images.shape == (len(records), 3, 32, 32)
    assert coverage.shape == (len(records), 32, 32)
    levels = images * 255.0
    torch.testing.assert_close(levels, levels.round(), rtol=0, atol=1e-3)
    stored = torch.stack([image_to_tensor(load_png(data_root / r.paths["query_render"])) for r in records])
    torch.testing.assert_close(images, stored, rtol=0, atol=1.01 / 255.0)
    assert (images == stored).float().mean() > 0.99
