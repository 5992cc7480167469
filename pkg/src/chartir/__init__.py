"""Iterative chart-to-code refinement engine and evaluation harness."""

__version__ = "0.1.0"

from .images import ChartImage, resize_to_reference
from .metrics import (
    AggregationWeights,
    DiscrepancyScore,
    MetricVector,
    aggregate,
    compute_metrics,
)

__all__ = [
    "ChartImage",
    "resize_to_reference",
    "AggregationWeights",
    "DiscrepancyScore",
    "MetricVector",
    "aggregate",
    "compute_metrics",
    "__version__",
]
