"""Glioma subregion segmentation and overall-survival prediction."""

from .data_model import LabelMap, MultiModalScan, SubregionId, SurvivalRecord
from .network import NetworkSpec, WeightSet, build_network
from .trainer import CascadeConfig, run_cascade, segment_volume

__all__ = [
    "CascadeConfig",
    "LabelMap",
    "MultiModalScan",
    "NetworkSpec",
    "SubregionId",
    "SurvivalRecord",
    "WeightSet",
    "build_network",
    "run_cascade",
    "segment_volume",
]

__version__ = "0.1.0"
