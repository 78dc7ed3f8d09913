"""
Evaluation metrics: attribute distances, identity similarity, Hungarian-matched
mask IoU, a Fréchet distance over embedder features and the masked change
ratio used for token-swap editing.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from ..data.synth_data import LABELS
from ..models.identity_embedder import IdentityEmbedder

logger = logging.getLogger(__name__)

FID_EPS = 1e-6
DISTANCE_BLOCKS = {"apd": "pose", "aed": "expression", "ald": "lighting"}


def iou_matrix(pred: np.ndarray, gt: np.ndarray, n_pred: int, n_gt: int = len(LABELS)) -> np.ndarray:
    """IoU between every predicted token region and every ground-truth label, (n_pred, n_gt)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"Prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    pred_onehot = np.stack([(pred == i).reshape(-1) for i in range(n_pred)]).astype(np.float64)
    gt_onehot = np.stack([(gt == j).reshape(-1) for j in range(n_gt)]).astype(np.float64)
    intersection = pred_onehot @ gt_onehot.T
    union = pred_onehot.sum(1)[:, None] + gt_onehot.sum(1)[None, :] - intersection
    return np.divide(intersection, union, out=np.zeros_like(intersection), where=union > 0)


def match_regions(iou: np.ndarray) -> Dict[int, int]:
    """Hungarian assignment maximizing total IoU; ground-truth label -> token index."""
    rows, cols = linear_sum_assignment(-iou)
    return {int(c): int(r) for r, c in zip(rows, cols)}


def hungarian_miou(pred: np.ndarray, gt: np.ndarray, n_pred: int, n_gt: int = len(LABELS)) -> float:
    """
    Mean over images of the Hungarian-matched IoU averaged over ground-truth labels.

    Args:
        pred: (N, H, W) token index per pixel (argmax of slot masks)
        gt: (N, H, W) ground-truth labels
        n_pred: Number of tokens
        n_gt: Number of ground-truth labels

    Returns:
        mIoU in [0, 1]; labels without a matched token count as 0
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    scores = []
    for p, g in zip(pred, gt):
        iou = iou_matrix(p, g, n_pred, n_gt)
        assignment = match_regions(iou)
        present = [j for j in range(n_gt) if (g == j).any()]
        scores.append(np.mean([iou[assignment[j], j] if j in assignment else 0.0 for j in present]))
    return float(np.mean(scores))


def region_assignment(pred: np.ndarray, gt: np.ndarray, n_pred: int) -> Dict[str, int]:
    """Dataset-level token index per region name from IoU accumulated over all images."""
    iou = iou_matrix(np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1), n_pred)
    return {LABELS[label]: token for label, token in match_regions(iou).items()}


def attribute_distances(
    output_attributes: np.ndarray,
    query_attributes: np.ndarray,
    slices: Mapping[str, slice],
) -> Dict[str, float]:
    """
    Mean L2 distance per attribute block: pose -> apd, expression -> aed, lighting -> ald.

    Args:
        output_attributes: (N, dim) attributes estimated from the edited images
        query_attributes: (N, dim) ground-truth query attributes
        slices: Attribute block slices

    Returns:
        Dictionary with apd, aed and ald
    """
    output_attributes = np.asarray(output_attributes, dtype=np.float64)
    query_attributes = np.asarray(query_attributes, dtype=np.float64)
    if output_attributes.shape != query_attributes.shape:
        raise ValueError(
            f"Attribute arrays differ in shape: {output_attributes.shape} vs {query_attributes.shape}"
        )
    return {
        name: float(np.linalg.norm(output_attributes[:, slices[block]] - query_attributes[:, slices[block]],
                                   axis=1).mean())
        for name, block in DISTANCE_BLOCKS.items()
    }


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cosine_similarity(a, b, dim=-1).clamp(-1.0, 1.0)


@torch.no_grad()
def csim(outputs: torch.Tensor, sources: torch.Tensor, embedder: IdentityEmbedder) -> float:
    """Mean cosine similarity between identity tokens of outputs and sources."""
    if outputs.shape != sources.shape:
        raise ValueError(f"Outputs {tuple(outputs.shape)} and sources {tuple(sources.shape)} differ in shape")
    return float(cosine_similarity(embedder.embed(outputs), embedder.embed(sources)).mean())


def frechet_distance(features_a: np.ndarray, features_b: np.ndarray, eps: float = FID_EPS) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    mu_a, mu_b = features_a.mean(axis=0), features_b.mean(axis=0)
    eye = eps * np.eye(features_a.shape[1])
    sigma_a = np.cov(features_a, rowvar=False) + eye
    sigma_b = np.cov(features_b, rowvar=False) + eye
    covmean = linalg.sqrtm(sigma_a @ sigma_b)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    distance = float(np.sum((mu_a - mu_b) ** 2) + np.trace(sigma_a + sigma_b - 2.0 * covmean))
    return max(distance, 0.0)


@torch.no_grad()
def fid_proxy(outputs: torch.Tensor, references: torch.Tensor, embedder: IdentityEmbedder) -> float:
    """
    Fréchet distance over penultimate identity-embedder features.

    Not comparable to Inception FID.
    """
    return frechet_distance(
        embedder.features(outputs).double().cpu().numpy(),
        embedder.features(references).double().cpu().numpy(),
    )


def masked_change_ratio(
    before: np.ndarray,
    after: np.ndarray,
    region: np.ndarray,
    threshold: float = 0.05,
) -> float:
    """
    Share of changed-pixel mass falling inside ``region``.

    A pixel counts as changed when its mean absolute RGB change exceeds
    ``threshold``; its mass is that change. Returns NaN when nothing changed.
    """
    change = np.abs(np.asarray(after, dtype=np.float64) - np.asarray(before, dtype=np.float64)).mean(axis=-1)
    changed = change > threshold
    total = change[changed].sum()
    if total == 0:
        return float("nan")
    return float(change[changed & np.asarray(region, dtype=bool)].sum() / total)


@dataclass
class EvalReport:
    apd: float
    aed: float
    ald: float
    csim: float
    miou: float
    fid_proxy: float
    n_samples: int
    config_digest: str
    attention_mse: float = float("nan")
    background_change: float = float("nan")
    background_change_pose: float = float("nan")
    swap_success_rate: float = float("nan")
    self_edit_l1: float = float("nan")
    seconds_per_edit: float = float("nan")
    miou_by_slots: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("apd", "aed", "ald"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not -1.0 - 1e-6 <= self.csim <= 1.0 + 1e-6:
            raise ValueError(f"csim must lie in [-1, 1], got {self.csim}")
        if not 0.0 <= self.miou <= 1.0:
            raise ValueError(f"miou must lie in [0, 1], got {self.miou}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    def deterministic_fields(self) -> Dict[str, float]:
        """Numeric fields expected to be reproducible across runs (timing excluded)."""
        values = {k: v for k, v in self.to_dict().items() if isinstance(v, float) and k != "seconds_per_edit"}
        values.update({f"miou_by_slots.{k}": v for k, v in self.miou_by_slots.items()})
        return values

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, dict):
                for sub_key, sub_value in value.items():
                    lines.append(f"{key}.{sub_key}: {sub_value:.6f}")
            elif isinstance(value, float):
                lines.append(f"{key}: {value:.6f}")
            else:
                lines.append(f"{key}: {value}")
        return "\n".join(lines) + "\n"

    def save(self, output_dir: Union[str, Path]) -> Tuple[Path, Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        text_path = output_dir / "eval_report.txt"
        json_path = output_dir / "eval_report.json"
        text_path.write_text(self.to_text(), encoding="utf-8")
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        logger.info(f"Evaluation report written to {text_path}")
        return text_path, json_path


def nanmean(values: Sequence[float]) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


def reports_match(a: EvalReport, b: EvalReport, tolerance: float = 1e-6) -> bool:
    """Field-wise comparison of two reports, NaN equal to NaN."""
    fields_a, fields_b = a.deterministic_fields(), b.deterministic_fields()
    if fields_a.keys() != fields_b.keys():
        return False
    for key, value in fields_a.items():
        other = fields_b[key]
        if math.isnan(value) and math.isnan(other):
            continue
        if not abs(value - other) <= tolerance:
            return False
    return True


def describe_assignment(assignment: Optional[Mapping[str, int]]) -> str:
    if not assignment:
        return "unassigned"
    return ", ".join(f"{region}->{token}" for region, token in sorted(assignment.items(), key=lambda x: x[1]))
