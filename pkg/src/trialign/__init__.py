"""Tri-modal alignment by triangle area, trained from scratch on numpy."""

from .geometry import (
    MAX_AREA,
    ConfigError,
    batch_triangle_scores,
    regularized_similarity,
    triangle_area,
    triangle_area_grad,
)

__all__ = [
    "MAX_AREA",
    "ConfigError",
    "batch_triangle_scores",
    "regularized_similarity",
    "triangle_area",
    "triangle_area_grad",
]
__version__ = "0.1.0"
