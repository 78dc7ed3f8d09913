"""
Editing pipeline over trained checkpoints.
"""

from .components import (
    inference_device,
    load_autoencoder,
    load_editing_model,
    load_embedder,
    load_estimator,
    load_rsc,
    load_template_for,
)
from .editing_pipeline import EditingPipeline, EditResult, condition_images

__all__ = [
    "inference_device",
    "load_autoencoder",
    "load_editing_model",
    "load_embedder",
    "load_estimator",
    "load_rsc",
    "load_template_for",
    "EditingPipeline",
    "EditResult",
    "condition_images",
]
