import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from diff_fae.data.dataset import ManifestRecord
from diff_fae.data.synth_data import BACKGROUND
from diff_fae.evaluation import cross_identity_pairs
from diff_fae.evaluation.metrics import (
    EvalReport,
    attribute_distances,
    csim,
    describe_assignment,
    fid_proxy,
    frechet_distance,
    hungarian_miou,
    iou_matrix,
    masked_change_ratio,
    nanmean,
    region_assignment,
    reports_match,
)
from diff_fae.evaluation.suite import background_change, pose_background_change
from diff_fae.geometry.coefficients import attribute_slices
from diff_fae.models.identity_embedder import IdentityEmbedder


def label_map(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 4, size=(2, 8, 8))


def make_report(**kwargs) -> EvalReport:
    values = dict(apd=0.1, aed=0.2, ald=0.3, csim=0.9, miou=0.6, fid_proxy=1.5, n_samples=4, config_digest="abc")
    values.update(kwargs)
    return EvalReport(**values)


@pytest.fixture
def embedder(tiny_config):
    torch.manual_seed(0)
    model = IdentityEmbedder(tiny_config.identity, tiny_config.image_size).eval()
    model.mark_trained()
    return model


def test_permuted_tokens_give_perfect_miou():
    gt = label_map()
    permutation = np.array([2, 0, 3, 1])
    assert hungarian_miou(permutation[gt], gt, n_pred=4) == pytest.approx(1.0)


def test_extra_tokens_do_not_hurt_a_perfect_match():
    gt = label_map()
    assert hungarian_miou(gt + 4, gt, n_pred=8) == pytest.approx(1.0)


def test_single_token_scores_below_one():
    gt = label_map()
    assert hungarian_miou(np.zeros_like(gt), gt, n_pred=4) < 0.5


def test_iou_matrix_values():
    pred = np.array([[0, 0], [1, 1]])
    gt = np.array([[0, 1], [1, 1]])
    iou = iou_matrix(pred, gt, n_pred=2, n_gt=2)
    np.testing.assert_allclose(iou, [[0.5, 1 / 4], [0.0, 2 / 3]])


def test_region_assignment_names_regions():
    gt = label_map()
    assignment = region_assignment(np.array([1, 2, 3, 0])[gt], gt, n_pred=4)
    assert assignment == {"face": 1, "hair": 2, "clothes": 3, "background": 0}
    assert describe_assignment(assignment).startswith("background->0")
    assert describe_assignment({}) == "unassigned"


def test_matching_attributes_have_zero_distance():
    slices = attribute_slices(d_shape=4, d_expr=4)
    vectors = np.random.default_rng(0).normal(size=(3, slices["camera"].stop))
    assert attribute_distances(vectors, vectors, slices) == {"apd": 0.0, "aed": 0.0, "ald": 0.0}


def test_pose_offset_only_moves_apd():
    slices = attribute_slices(d_shape=4, d_expr=4)
    target = np.zeros((2, slices["camera"].stop))
    output = target.copy()
    output[:, slices["pose"].start] = 3.0
    output[:, slices["pose"].start + 1] = 4.0
    distances = attribute_distances(output, target, slices)
    assert distances["apd"] == pytest.approx(5.0)
    assert distances["aed"] == 0.0 and distances["ald"] == 0.0


def test_csim_of_identical_images_is_one(embedder):
    images = torch.rand(3, 3, 32, 32)
    assert csim(images, images, embedder) == pytest.approx(1.0, abs=1e-5)


def test_frechet_distance_of_identical_sets_is_zero():
    features = np.random.default_rng(0).normal(size=(50, 6))
    assert frechet_distance(features, features) == pytest.approx(0.0, abs=1e-4)


def test_frechet_distance_sees_mean_shift():
    features = np.random.default_rng(0).normal(size=(50, 6))
    assert frechet_distance(features, features + 1.0) == pytest.approx(6.0, rel=1e-3)


def test_fid_proxy_runs_on_embedder_features(embedder):
    images = torch.rand(6, 3, 32, 32)
    assert fid_proxy(images, images, embedder) == pytest.approx(0.0, abs=1e-2)


def test_masked_change_ratio():
    before = np.zeros((4, 4, 3))
    after = before.copy()
    after[:2] = 0.5
    after[3, 0] = 0.5
    region = np.zeros((4, 4), dtype=bool)
    region[:2] = True
    assert masked_change_ratio(before, after, region) == pytest.approx(8 / 9)
    assert math.isnan(masked_change_ratio(before, before, region))


def test_report_rejects_out_of_range_values():
    with pytest.raises(ValueError, match="csim"):
        make_report(csim=1.5)
    with pytest.raises(ValueError, match="apd"):
        make_report(apd=-0.1)
    with pytest.raises(ValueError, match="miou"):
        make_report(miou=1.2)


def test_report_is_written_as_text_and_json(tmp_path):
    report = make_report(miou_by_slots={"2": 0.4, "4": 0.6})
    text_path, json_path = report.save(tmp_path)
    assert "miou_by_slots.4: 0.600000" in text_path.read_text()
    assert json.loads(json_path.read_text())["apd"] == pytest.approx(0.1)


def test_reports_match_ignores_timing_and_nan():
    a = make_report(seconds_per_edit=0.1)
    b = make_report(seconds_per_edit=9.0)
    assert reports_match(a, b)
    assert not reports_match(a, make_report(apd=0.2))


def test_nanmean_skips_nan():
    assert nanmean([1.0, float("nan"), 3.0]) == 2.0
    assert math.isnan(nanmean([float("nan")]))


def test_cross_identity_pairs_are_deterministic():
    records = [ManifestRecord(f"{i:06d}_0000", identity_id=i // 2, split="test", paths={}) for i in range(6)]
    pairs = cross_identity_pairs(records, 10, seed=3)
    assert pairs == cross_identity_pairs(records, 10, seed=3)
    assert len(pairs) == 10
    assert all(records[s].identity_id != records[q].identity_id for s, q in pairs)


def test_cross_identity_pairs_need_two_identities():
    records = [ManifestRecord("000000_0000", identity_id=0, split="test", paths={})]
    with pytest.raises(ValueError, match="two test identities"):
        cross_identity_pairs(records, 1, seed=0)


class RecordingPipeline:
    """Stands in for EditingPipeline.edit: brightens the frame and covers its left half."""

    def __init__(self):
        self.calls = []

    def edit(self, sources, source_coeffs, query_coeffs, only=None, tokens=None, seed=None):
        self.calls.append({"only": only, "query_coeffs": list(query_coeffs), "seed": seed})
        output = sources + 0.25
        output[..., :2] = 1.0
        coverage = np.zeros((sources.shape[0],) + tuple(sources.shape[-2:]), dtype=bool)
        coverage[..., :2] = True
        return SimpleNamespace(output=output, coverage=coverage)


def test_background_change_skips_covered_and_foreground_pixels():
    sources = torch.zeros(1, 3, 4, 4)
    outputs = torch.full_like(sources, 0.5)
    outputs[..., 0, :] = 0.1
    masks = np.full((1, 4, 4), BACKGROUND)
    masks[:, 1] = 0
    coverage = np.zeros((1, 4, 4), dtype=bool)
    coverage[:, 2] = True
    assert background_change(outputs, sources, masks, coverage) == pytest.approx((0.1 + 0.5) / 2)


def test_pose_background_change_edits_only_the_pose():
    pipeline = RecordingPipeline()
    sources = torch.zeros(2, 3, 4, 4)
    masks = np.full((2, 4, 4), BACKGROUND)
    change = pose_background_change(pipeline, sources, ["s0", "s1"], ["q0", "q1"], masks, seed=7)
    assert pipeline.calls == [{"only": ["pose"], "query_coeffs": ["q0", "q1"], "seed": 7}]
    assert change == pytest.approx(0.25)


def test_report_carries_pose_background_change():
    report = make_report(background_change_pose=0.03)
    assert "background_change_pose" in report.deterministic_fields()
    assert not reports_match(report, make_report(background_change_pose=0.05))
