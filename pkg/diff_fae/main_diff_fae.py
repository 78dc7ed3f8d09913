#!/usr/bin/env python3
"""
Main entry point for the DiffFAE facial appearance editing pipeline.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import torch

from diff_fae.data import build_dataset, load_manifest
from diff_fae.data.dataset import load_dataset_template
from diff_fae.evaluation.suite import eval_suite, load_sample
from diff_fae.geometry import (
    PhysicalCoefficients,
    load_coefficients,
    make_toy_template,
    render_condition,
)
from diff_fae.geometry.coefficients import EDITABLE_FIELDS, changed_fields
from diff_fae.geometry.flame_lite import yaw_pose
from diff_fae.pipeline import EditingPipeline
from diff_fae.training import (
    AutoencoderTrainer,
    DiffusionTrainer,
    EstimatorTrainer,
    IdentityTrainer,
    RSCTrainer,
)
from diff_fae.utils.config_loader import RunConfig, build_run_config, save_config
from diff_fae.utils.errors import CheckpointMismatchError, ConfigError, MissingPrerequisiteError
from diff_fae.utils.image_io import save_png

EXIT_OK, EXIT_CONFIG, EXIT_PREREQUISITE, EXIT_RUNTIME = 0, 2, 3, 4
ARTIFACT_MANIFEST = "artifacts.json"

TRAINERS = {
    "train-ae": AutoencoderTrainer,
    "pretrain-rsc": RSCTrainer,
    "train-id": IdentityTrainer,
    "train-estimator": EstimatorTrainer,
    "train-diffusion": DiffusionTrainer,
}


def setup_logging(log_level: str = "INFO", log_file: Optional[Path] = None):
    """Set up logging configuration."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="User YAML config merged over the preset")
    common.add_argument("--preset", type=str, choices=["desk", "paper"], help="Named preset (default: desk)")
    common.add_argument("--seed", type=int, help="Global seed propagated to every stochastic component")
    common.add_argument("--out", type=str, help="Output directory for artifacts (overrides paths.output_dir)")
    common.add_argument("--device", type=str, choices=["auto", "cpu", "cuda"], help="Compute device")
    common.add_argument("--log_level", type=str, default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Logging level")

    parser = argparse.ArgumentParser(
        description="DiffFAE: facial appearance editing with a latent diffusion model",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth-data", parents=[common], help="Synthesize the paired-portrait dataset")
    synth.add_argument("--n-identities", type=int, help="Number of identities")
    synth.add_argument("--pairs-per-identity", type=int, help="Source/query pairs per identity")
    synth.add_argument("--workers", type=int, help="Worker processes")

    commands.add_parser("train-ae", parents=[common], help="Train the latent autoencoder")
    rsc = commands.add_parser("pretrain-rsc", parents=[common], help="Pretrain the region encoder")
    rsc.add_argument("--num-slots", type=int, help="Number of semantic tokens")
    commands.add_parser("train-id", parents=[common], help="Train the identity embedder")
    commands.add_parser("train-estimator", parents=[common], help="Train the coefficient estimator")

    diffusion = commands.add_parser("train-diffusion", parents=[common], help="Train the conditional denoiser")
    diffusion.add_argument("--num-slots", type=int, help="Number of semantic tokens")
    diffusion.add_argument("--acr-weight", type=float, help="Attention-constraint weight; 0 disables it")
    diffusion.add_argument("--no-identity", action="store_true", help="Train without identity-token injection")
    diffusion.add_argument("--freeze-encoder", action="store_true", help="Keep the pretrained region encoder frozen")
    diffusion.add_argument("--max-steps", type=int, help="Number of optimizer steps")

    edit = commands.add_parser("edit", parents=[common], help="Edit a test source towards a query")
    edit.add_argument("--source", type=str, help="Source pair id (default: first test pair)")
    edit.add_argument("--query", type=str, help="Query pair id (default: the source's own query)")
    edit.add_argument("--query-coeffs", type=str, help="Coefficient container supplying the query attributes")
    edit.add_argument("--estimate-query", action="store_true",
                      help="Estimate the query attributes from the query image")
    edit.add_argument("--only", nargs="+", choices=list(EDITABLE_FIELDS), help="Edit only these attributes")
    edit.add_argument("--swap", nargs="+", help="Region names whose tokens come from the donor")
    edit.add_argument("--donor", type=str, help="Donor pair id for --swap")
    edit.add_argument("--save-attention", action="store_true", help="Write per-layer cross-attention maps")
    edit.add_argument("--num-slots", type=int, help="Number of semantic tokens")
    edit.add_argument("--acr-weight", type=float, help="Select the checkpoint trained with this weight")
    edit.add_argument("--no-identity", action="store_true", help="Use the no-identity checkpoint")

    masks = commands.add_parser("masks", parents=[common], help="Visualize semantic token masks on test images")
    masks.add_argument("--n", type=int, default=8, help="Number of test images")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate on cross-identity test pairs")
    evaluate.add_argument("--n", type=int, help="Number of pairs")
    evaluate.add_argument("--num-slots", type=int, help="Number of semantic tokens")
    evaluate.add_argument("--acr-weight", type=float, help="Select the checkpoint trained with this weight")
    evaluate.add_argument("--no-identity", action="store_true", help="Evaluate the no-identity checkpoint")

    render = commands.add_parser("render", parents=[common], help="Render the head model")
    render.add_argument("--coeffs", type=str, help="Coefficient container (zero coefficients when omitted)")
    render.add_argument("--yaw", type=float, help="Head yaw in degrees")
    render.add_argument("--size", type=int, help="Image side (default: image_size)")
    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested config overrides from command-line flags."""
    overrides: Dict[str, Any] = {}

    def put(section: Optional[str], key: str, value: Any):
        if value is None:
            return
        target = overrides.setdefault(section, {}) if section else overrides
        target[key] = value

    put(None, "seed", args.seed)
    put(None, "device", args.device)
    put("paths", "output_dir", args.out)
    put("synth", "n_identities", getattr(args, "n_identities", None))
    put("synth", "pairs_per_identity", getattr(args, "pairs_per_identity", None))
    put("synth", "num_workers", getattr(args, "workers", None))
    put("rsc", "num_slots", getattr(args, "num_slots", None))
    put("diffusion", "acr_weight", getattr(args, "acr_weight", None))
    put("diffusion", "max_steps", getattr(args, "max_steps", None))
    if getattr(args, "no_identity", False):
        put("diffusion", "use_identity", False)
    if getattr(args, "freeze_encoder", False):
        put("diffusion", "freeze_encoder", True)
    return overrides


class Artifacts:
    """Files produced by one command, written as a manifest under the output directory."""

    def __init__(self, output_dir: Path, command: str):
        self.output_dir = output_dir
        self.command = command
        self.files: List[str] = []

    def add(self, path: Path) -> Path:
        self.files.append(str(path))
        return path

    def write(self) -> Path:
        path = self.output_dir / ARTIFACT_MANIFEST
        entries: Dict[str, List[str]] = {}
        if path.exists():
            entries = json.loads(path.read_text(encoding="utf-8"))
        entries[self.command] = sorted(set(self.files))
        path.write_text(json.dumps(entries, indent=2, sort_keys=True), encoding="utf-8")
        return path


def run_synth_data(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    synth = config.synth
    template = make_toy_template(synth.template_seed, synth.n_vertices, synth.d_shape, synth.d_expr, synth.d_albedo)
    records = build_dataset(
        config.paths.data_root, template, synth.n_identities, synth.pairs_per_identity,
        split_seed=config.seed, image_size=config.image_size, max_yaw_deg=synth.max_yaw_deg,
        num_workers=synth.num_workers,
    )
    artifacts.add(Path(config.paths.data_root) / "manifest.jsonl")
    artifacts.add(Path(config.paths.data_root) / "template.safetensors")
    logging.getLogger(__name__).info(f"✅ Synthesized {len(records)} pairs")


def run_training(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    with TRAINERS[args.command](config) as trainer:
        artifacts.add(trainer.train())
        artifacts.add(trainer.output_dir / "train_log.jsonl")


def _find_record(config: RunConfig, pair_id: Optional[str]):
    records = load_manifest(config.paths.data_root)
    if pair_id is None:
        test = [r for r in records if r.split == "test"]
        if not test:
            raise ValueError("Manifest has no test records")
        return test[0]
    for record in records:
        if record.pair_id == pair_id:
            return record
    raise ValueError(f"Pair '{pair_id}' not found in {config.paths.data_root}/manifest.jsonl")


def run_edit(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    logger = logging.getLogger(__name__)
    data_root = Path(config.paths.data_root)
    out = Path(config.paths.output_dir)
    pipeline = EditingPipeline(config)
    logger.debug(f"Pipeline: {pipeline.describe()}")

    source_record = _find_record(config, args.source)
    source = load_sample(data_root, source_record, "source")
    query_record = _find_record(config, args.query) if args.query else source_record
    query = load_sample(data_root, query_record, "query")
    images = source.image.unsqueeze(0)

    if args.swap:
        if not args.donor:
            raise ValueError("--swap requires --donor <pair_id>")
        donor = load_sample(data_root, _find_record(config, args.donor), "source")
        result = pipeline.swap_edit(images, [source.coeffs], donor.image.unsqueeze(0), args.swap)
        name = f"swap_{'_'.join(args.swap)}_{source_record.pair_id}"
    else:
        if args.query_coeffs:
            query_coeffs = load_coefficients(args.query_coeffs)
        elif args.estimate_query:
            query_coeffs = pipeline.estimate_query(query.image.unsqueeze(0), [source.coeffs])[0]
        else:
            query_coeffs = query.coeffs
        result = pipeline.edit(images, [source.coeffs], [query_coeffs], only=args.only)
        name = f"edit_{source_record.pair_id}"
        logger.info(f"Render coefficients differ from the source in: "
                    f"{changed_fields(source.coeffs, result.coefficients[0]) or 'nothing'}")

    masks = pipeline.masks(images)
    artifacts.add(save_png(out / f"{name}.png", pipeline.edit_grid(result, masks)))
    artifacts.add(save_png(out / f"{name}_output.png", result.output[0]))
    if args.save_attention:
        per_layer, mean = pipeline.attention_layers(result)
        artifacts.add(save_png(out / f"{name}_attention.png", pipeline.attention_grid(result, per_layer, mean)))
        logger.info(f"Saved cross-attention maps of {len(per_layer)} layers")


def run_masks(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    data_root = Path(config.paths.data_root)
    pipeline = EditingPipeline(config)
    records = load_manifest(data_root, "test")[:args.n]
    images = torch.stack([load_sample(data_root, r, "source").image for r in records])
    artifacts.add(save_png(Path(config.paths.output_dir) / "masks.png", pipeline.masks_grid(images)))


def run_eval(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    out = Path(config.paths.output_dir)
    report = eval_suite(config, n=args.n, seed=config.seed, output_dir=str(out))
    artifacts.add(out / "eval_report.txt")
    artifacts.add(out / "eval_report.json")
    logging.getLogger(__name__).info(
        f"📊 apd={report.apd:.4f} aed={report.aed:.4f} ald={report.ald:.4f} csim={report.csim:.4f} "
        f"miou={report.miou:.4f}"
    )


def run_render(config: RunConfig, args: argparse.Namespace, artifacts: Artifacts):
    try:
        template = load_dataset_template(config.paths.data_root)
    except FileNotFoundError:
        synth = config.synth
        template = make_toy_template(synth.template_seed, synth.n_vertices, synth.d_shape,
                                     synth.d_expr, synth.d_albedo)
    if args.coeffs:
        coeffs = load_coefficients(args.coeffs)
    else:
        coeffs = PhysicalCoefficients.zeros(template.d_shape, template.d_expr, template.d_albedo)
    if args.yaw is not None:
        pose = coeffs.pose.copy()
        pose[:3] = yaw_pose(np.deg2rad(args.yaw))[:3]
        coeffs = replace(coeffs, pose=pose)
    size = args.size or config.image_size
    rendered = render_condition(template, coeffs, size, size)
    out = Path(config.paths.output_dir)
    artifacts.add(save_png(out / "render.png", rendered.image))
    logging.getLogger(__name__).info(
        f"Rendered {template.n_vertices} vertices, {int(rendered.coverage_mask.sum())} covered pixels"
    )


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace, Artifacts], None]] = {
    "synth-data": run_synth_data,
    "edit": run_edit,
    "masks": run_masks,
    "eval": run_eval,
    "render": run_render,
    **{name: run_training for name in TRAINERS},
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the DiffFAE pipeline."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    logger = logging.getLogger(__name__)

    try:
        config = build_run_config(args.config, args.preset, config_overrides(args))
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return EXIT_CONFIG

    output_dir = Path(config.paths.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(args.log_level, output_dir / "diff_fae.log")
    logger.info(f"🚀 Starting '{args.command}' (preset {config.preset}, seed {config.seed})")
    logger.info(f"Output directory: {output_dir}")

    artifacts = Artifacts(output_dir, args.command)
    status = EXIT_OK
    try:
        config_file = output_dir / f"config_{args.command}.yaml"
        save_config(config.to_dict(), str(config_file))
        artifacts.add(config_file)
        COMMANDS[args.command](config, args, artifacts)
        logger.info(f"🎉 '{args.command}' completed successfully!")
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        status = EXIT_CONFIG
    except MissingPrerequisiteError as e:
        logger.error(f"❌ {e}")
        status = EXIT_PREREQUISITE
    except CheckpointMismatchError as e:
        logger.error(f"❌ {e}")
        status = EXIT_RUNTIME
    except Exception as e:
        logger.error(f"❌ '{args.command}' failed: {e}")
        logging.error("Command failed", exc_info=True)
        status = EXIT_RUNTIME
    finally:
        artifacts.write()
        logger.info("🧹 Cleanup completed")
    return status


if __name__ == "__main__":
    sys.exit(main())
