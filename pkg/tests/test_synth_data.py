from pathlib import Path

import numpy as np
import pytest
import torch

from diff_fae.data.dataset import (
    ImageDataset,
    PairDataset,
    build_dataset,
    load_dataset_template,
    load_manifest,
    load_pair_record,
    split_identities,
)
from diff_fae.data.synth_data import (
    LABELS,
    MIN_BACKGROUND_FRACTION,
    MIN_FACE_FRACTION,
    label_fractions,
    make_pair,
    sample_identity,
)


@pytest.fixture(scope="module")
def pair(template):
    return make_pair(template, sample_identity(3, template.d_shape, template.d_albedo), seed=1, height=32, width=32)


def test_pair_is_deterministic(template, pair):
    again = make_pair(template, sample_identity(3, template.d_shape, template.d_albedo), seed=1, height=32, width=32)
    np.testing.assert_array_equal(pair.source_image, again.source_image)
    np.testing.assert_array_equal(pair.query_mask, again.query_mask)


def test_pair_frames_meet_label_floors(pair):
    for mask in (pair.source_mask, pair.query_mask):
        fractions = label_fractions(mask)
        assert fractions["face"] >= MIN_FACE_FRACTION
        assert fractions["background"] >= MIN_BACKGROUND_FRACTION
        assert set(np.unique(mask)) <= set(range(len(LABELS)))


def test_pair_shares_identity_attributes(pair):
    np.testing.assert_array_equal(pair.source_coeffs.shape, pair.query_coeffs.shape)
    np.testing.assert_array_equal(pair.source_coeffs.albedo.coefficients, pair.query_coeffs.albedo.coefficients)
    assert not np.array_equal(pair.source_coeffs.pose, pair.query_coeffs.pose)


def test_pair_images_are_unit_range(pair):
    for image in (pair.source_image, pair.query_image, pair.source_render, pair.query_render):
        assert image.shape == (32, 32, 3)
        assert image.min() >= 0.0 and image.max() <= 1.0


def test_split_is_identity_disjoint():
    splits = split_identities(list(range(10)), split_seed=3)
    assert sorted(splits.values()).count("train") == 8
    assert set(splits) == set(range(10))


def test_split_needs_five_identities():
    with pytest.raises(ValueError, match="at least 5"):
        split_identities([0, 1, 2, 3], split_seed=0)


def test_manifest_keeps_identities_apart(data_root):
    records = load_manifest(data_root)
    train = {r.identity_id for r in records if r.split == "train"}
    test = {r.identity_id for r in records if r.split == "test"}
    assert len(train) == 8 and len(test) == 2
    assert not train & test
    for record in records:
        for relative in record.paths.values():
            assert (Path(data_root) / relative).exists()


def test_dataset_template_is_stored(data_root, template):
    np.testing.assert_array_equal(load_dataset_template(data_root).faces, template.faces)


def test_pair_dataset_items(data_root):
    dataset = PairDataset(data_root, load_manifest(data_root, "train"))
    item = dataset[0]
    assert item["source"].shape == (3, 32, 32)
    assert item["query_render"].shape == (3, 32, 32)
    assert item["query_mask"].dtype == torch.int64
    assert item["source"].min() >= 0 and item["source"].max() <= 1


def test_image_dataset_serves_both_frames(data_root):
    records = load_manifest(data_root, "train")
    dataset = ImageDataset(data_root, records)
    assert len(dataset) == 2 * len(records)
    assert dataset.n_classes == 8
    assert dataset[1]["target"].ndim == 1


def test_image_dataset_reads_each_pair_record_once(data_root, monkeypatch):
    records = load_manifest(data_root, "train")
    reads = []

    def counting_load(root, record):
        reads.append(record.pair_id)
        return load_pair_record(root, record)

    monkeypatch.setattr("diff_fae.data.dataset.load_pair_record", counting_load)
    dataset = ImageDataset(data_root, records)
    first = [dataset[i]["target"] for i in range(len(dataset))]
    second = [dataset[i]["target"] for i in range(len(dataset))]
    assert sorted(reads) == sorted(r.pair_id for r in records)
    for a, b in zip(first, second):
        torch.testing.assert_close(a, b)
    torch.testing.assert_close(first[1], torch.from_numpy(
        load_pair_record(data_root, records[0])["query_coeffs"].attribute_vector()).float())


def test_empty_manifest_is_rejected(data_root):
    with pytest.raises(ValueError, match="non-empty"):
        PairDataset(data_root, [])


def test_rebuild_reproduces_images(tmp_path, template, data_root):
    build_dataset(tmp_path, template, 10, 1, split_seed=0, image_size=32)
    first = load_manifest(data_root)[0]
    for role in ("source", "query_render"):
        assert (tmp_path / first.paths[role]).read_bytes() == (Path(data_root) / first.paths[role]).read_bytes()
