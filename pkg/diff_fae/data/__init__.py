"""
Synthetic portrait data: procedural generation and manifest-backed datasets.
"""

from .dataset import (
    ImageDataset,
    ManifestRecord,
    PairDataset,
    build_dataset,
    load_dataset_template,
    load_manifest,
    load_pair_record,
    split_identities,
)
from .synth_data import (
    LABELS,
    IdentitySpec,
    SamplePair,
    compose_portrait,
    label_fractions,
    make_pair,
    sample_identity,
    sample_scene,
)

__all__ = [
    "ImageDataset",
    "ManifestRecord",
    "PairDataset",
    "build_dataset",
    "load_dataset_template",
    "load_manifest",
    "load_pair_record",
    "split_identities",
    "LABELS",
    "IdentitySpec",
    "SamplePair",
    "compose_portrait",
    "label_fractions",
    "make_pair",
    "sample_identity",
    "sample_scene",
]
