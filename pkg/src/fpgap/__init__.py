"""Exact ReLU-network verification, float32 inference backends and
adversarial examples that live in the gap between the two."""

from .core import (
    Conv2d, Dense, Flatten, Network, PerturbationSet, Precision, PreconditionError, QuantizationScheme,
    ReLU, ShapeError, cw_loss, linf_distance, next_after, widen_to_double,
)
from .modelio import ModelFormatError, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "Conv2d", "Dense", "Flatten", "ModelFormatError", "Network", "PerturbationSet", "Precision",
    "PreconditionError", "QuantizationScheme", "ReLU", "ShapeError", "cw_loss", "linf_distance",
    "load_model", "next_after", "save_model", "widen_to_double",
]
