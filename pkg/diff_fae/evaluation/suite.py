"""
End-to-end evaluation of trained checkpoints on held-out identities.
"""

import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..data.dataset import ManifestRecord, image_to_tensor, load_manifest, load_pair_record
from ..data.synth_data import BACKGROUND
from ..geometry.coefficients import PhysicalCoefficients
from ..models.diffusion import ddim_timesteps, loss_acr, merge_cross_attention
from ..pipeline.components import load_embedder, load_estimator, load_rsc
from ..pipeline.editing_pipeline import EditingPipeline
from ..utils.checkpoint import STAGE_COMMANDS, stage_checkpoint
from ..utils.config_loader import RunConfig, config_digest
from ..utils.errors import MissingPrerequisiteError
from ..utils.image_io import load_png
from .metrics import (
    EvalReport,
    attribute_distances,
    csim,
    fid_proxy,
    hungarian_miou,
    masked_change_ratio,
    nanmean,
)

logger = logging.getLogger(__name__)

SLOT_ABLATIONS = (2, 4, 8)


@dataclass
class EvalSample:
    """One side of an evaluation pair loaded from the manifest."""
    image: torch.Tensor
    coeffs: PhysicalCoefficients
    mask: np.ndarray
    render: torch.Tensor


def load_sample(data_root: Path, record: ManifestRecord, role: str) -> EvalSample:
    """Image, coefficients, label mask and conditioning render of one role (source or query)."""
    arrays = load_pair_record(data_root, record)
    return EvalSample(
        image=image_to_tensor(load_png(data_root / record.paths[role])),
        coeffs=arrays[f"{role}_coeffs"],
        mask=arrays[f"{role}_mask"],
        render=image_to_tensor(load_png(data_root / record.paths[f"{role}_render"])),
    )


def cross_identity_pairs(records: Sequence[ManifestRecord], n: int, seed: int) -> List[Tuple[int, int]]:
    """
    Deterministic (source, query) record indices with differing identities.

    Args:
        records: Test-split records
        n: Number of pairs
        seed: Seed of ``numpy.random.default_rng``

    Returns:
        List of index pairs into ``records``
    """
    identities = np.array([r.identity_id for r in records])
    if len(np.unique(identities)) < 2:
        raise ValueError("Cross-identity evaluation needs at least two test identities")
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        source = int(rng.integers(len(records)))
        candidates = np.flatnonzero(identities != identities[source])
        pairs.append((source, int(rng.choice(candidates))))
    return pairs


def background_change(outputs: torch.Tensor, sources: torch.Tensor, source_masks: np.ndarray,
                      coverage: np.ndarray) -> float:
    """Mean absolute change over source background pixels left uncovered by the condition render."""
    change = (outputs - sources).abs().mean(dim=1).cpu().numpy()
    values = []
    for diff, labels, covered in zip(change, source_masks, coverage):
        region = (labels == BACKGROUND) & ~covered
        values.append(float(diff[region].mean()) if region.any() else float("nan"))
    return nanmean(values)


def pose_background_change(pipeline: EditingPipeline, sources: torch.Tensor,
                           source_coeffs: Sequence[PhysicalCoefficients],
                           query_coeffs: Sequence[PhysicalCoefficients], source_masks: np.ndarray,
                           seed: int) -> float:
    """Uncovered background change of edits that take only the pose (and camera) from the queries."""
    result = pipeline.edit(sources, source_coeffs, query_coeffs, only=["pose"], seed=seed)
    return background_change(result.output.cpu(), sources.cpu(), source_masks, result.coverage)


@torch.no_grad()
def attention_mse(pipeline: EditingPipeline, sources: torch.Tensor, queries: torch.Tensor,
                  query_renders: torch.Tensor, seed: int) -> float:
    """Mean ‖A_cross − M_Q‖² of same-identity pairs, averaged over the sampled timesteps."""
    config = pipeline.config
    model = pipeline.model
    device = pipeline.device
    sources, queries, query_renders = sources.to(device), queries.to(device), query_renders.to(device)
    z0 = pipeline.autoencoder.encode(queries)
    f_r = pipeline.autoencoder.encode(query_renders)
    tokens = model.semantic_tokens(sources).tokens
    masks = model.query_masks(queries)
    timesteps = ddim_timesteps(config.diffusion.timesteps, config.evaluation.attention_timesteps)
    records = model.diffusion.attention_maps(z0, f_r, tokens, pipeline.identity_tokens(sources), timesteps, seed)
    return float(np.mean([
        loss_acr(merge_cross_attention(record, masks.shape[-1]), masks).item() for record in records
    ]))


@torch.no_grad()
def slot_ablation_miou(config: RunConfig, images: torch.Tensor, masks: np.ndarray,
                       device: torch.device) -> Dict[str, float]:
    """Test mIoU of every pretrained region encoder whose slot-count checkpoint exists."""
    scores = {}
    for num_slots in SLOT_ABLATIONS:
        ablation = replace(config, rsc=replace(config.rsc, num_slots=num_slots))
        if not stage_checkpoint(ablation, "rsc").exists():
            continue
        rsc, _ = load_rsc(ablation, device)
        pred = rsc.slot_masks(images.to(device)).argmax(dim=1).cpu().numpy()
        scores[str(num_slots)] = hungarian_miou(pred, masks, num_slots)
    return scores


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def eval_suite(
    config: RunConfig,
    n: Optional[int] = None,
    seed: Optional[int] = None,
    pipeline: Optional[EditingPipeline] = None,
    output_dir: Optional[str] = None,
) -> EvalReport:
    """
    Evaluate the trained checkpoints on cross-identity test pairs.

    Args:
        config: Run configuration naming the checkpoints
        n: Number of pairs (``evaluation.n_samples`` by default)
        seed: Pair-drawing and sampling seed (the run seed by default)
        pipeline: Already loaded pipeline
        output_dir: Where to write the report, if given

    Returns:
        EvalReport
    """
    n = n or config.evaluation.n_samples
    seed = config.seed if seed is None else seed
    data_root = Path(config.paths.data_root)
    try:
        records = load_manifest(data_root, "test")
    except FileNotFoundError:
        raise MissingPrerequisiteError(str(data_root / "manifest.jsonl"), STAGE_COMMANDS["dataset"])
    if not records:
        raise ValueError(f"Manifest under {data_root} has no test records")

    pipeline = pipeline or EditingPipeline(config)
    device = pipeline.device
    embedder = pipeline.embedder or load_embedder(config, device)
    estimator, floor = load_estimator(config, device, pipeline.template)
    if floor:
        logger.info("Estimator validation floor: " + ", ".join(f"{k}={v:.4f}" for k, v in floor.items()))
    batch_size = config.diffusion.batch_size
    eval_config = config.evaluation
    swap_regions = ["background"] if "background" in pipeline.region_assignment else []
    if not swap_regions:
        logger.warning("No token is assigned to the background region; swap success is reported as NaN")

    pairs = cross_identity_pairs(records, n, seed)
    outputs, references, sources_all, source_masks = [], [], [], []
    estimated, targets = [], []
    background, pose_background, self_l1, swap_hits, attention = [], [], [], [], []
    edit_seconds = 0.0

    for batch in tqdm(list(_batches(pairs, batch_size)), desc="Evaluating"):
        source_samples = [load_sample(data_root, records[s], "source") for s, _ in batch]
        query_samples = [load_sample(data_root, records[q], "query") for _, q in batch]
        sources = torch.stack([s.image for s in source_samples])
        queries = torch.stack([q.image for q in query_samples])
        source_coeffs = [s.coeffs for s in source_samples]
        masks = np.stack([s.mask for s in source_samples])

        started = time.perf_counter()
        result = pipeline.edit(sources, source_coeffs, [q.coeffs for q in query_samples], seed=seed)
        edit_seconds += time.perf_counter() - started

        outputs.append(result.output.cpu())
        references.append(queries)
        sources_all.append(sources)
        source_masks.append(masks)
        estimated.append(estimator.predict(result.output).double().cpu().numpy())
        targets.append(np.stack([q.coeffs.attribute_vector() for q in query_samples]))
        background.append(background_change(result.output.cpu(), sources, masks, result.coverage))

        # same-identity pairs of the sources: pose-only edit, self edit, attention fit and token swap
        own_queries = [load_sample(data_root, records[s], "query") for s, _ in batch]
        pose_background.append(pose_background_change(
            pipeline, sources, source_coeffs, [q.coeffs for q in own_queries], masks, seed,
        ))
        attention.append(attention_mse(
            pipeline, sources, torch.stack([q.image for q in own_queries]),
            torch.stack([q.render for q in own_queries]), seed,
        ))
        reference = pipeline.edit(sources, source_coeffs, source_coeffs, seed=seed)
        self_l1.append(float((reference.output.cpu() - sources).abs().mean()))
        if swap_regions:
            swapped = pipeline.swap_edit(sources, source_coeffs, queries, swap_regions, seed=seed)
            for before, after, labels in zip(reference.output.cpu(), swapped.output.cpu(), masks):
                ratio = masked_change_ratio(before.permute(1, 2, 0).numpy(), after.permute(1, 2, 0).numpy(),
                                            labels == BACKGROUND, eval_config.swap_threshold)
                swap_hits.append(bool(ratio >= eval_config.swap_mass_ratio))

    outputs_t, sources_t = torch.cat(outputs).to(device), torch.cat(sources_all).to(device)
    distances = attribute_distances(np.concatenate(estimated), np.concatenate(targets), estimator.slices)
    gt_masks = np.concatenate(source_masks)
    pred_masks = pipeline.masks(sources_t).argmax(dim=1).cpu().numpy()
    miou = hungarian_miou(pred_masks, gt_masks, pipeline.num_tokens)

    report = EvalReport(
        apd=distances["apd"],
        aed=distances["aed"],
        ald=distances["ald"],
        csim=csim(outputs_t, sources_t, embedder),
        miou=miou,
        fid_proxy=fid_proxy(outputs_t, torch.cat(references).to(device), embedder),
        n_samples=len(pairs),
        config_digest=config_digest(config, "diffusion"),
        attention_mse=float(np.mean(attention)),
        background_change=nanmean(background),
        background_change_pose=miou * nanmean(pose_background),
        swap_success_rate=float(np.mean(swap_hits)) if swap_hits else float("nan"),
        self_edit_l1=float(np.mean(self_l1)),
        seconds_per_edit=edit_seconds / len(pairs),
        miou_by_slots=slot_ablation_miou(config, sources_t, gt_masks, device),
    )
    logger.info(f"Evaluation over {report.n_samples} pairs:\n{report.to_text()}")
    if output_dir is not None:
        report.save(output_dir)
    return report
