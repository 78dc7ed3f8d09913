"""
Evaluation metrics and the end-to-end evaluation suite.
"""

from .metrics import (
    EvalReport,
    attribute_distances,
    csim,
    fid_proxy,
    frechet_distance,
    hungarian_miou,
    iou_matrix,
    masked_change_ratio,
    match_regions,
    region_assignment,
    reports_match,
)
from .suite import cross_identity_pairs, eval_suite

__all__ = [
    "EvalReport",
    "attribute_distances",
    "csim",
    "fid_proxy",
    "frechet_distance",
    "hungarian_miou",
    "iou_matrix",
    "masked_change_ratio",
    "match_regions",
    "region_assignment",
    "reports_match",
    "cross_identity_pairs",
    "eval_suite",
]
