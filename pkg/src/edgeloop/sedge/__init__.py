"""Structured Edge detector: features, training, detection and model files."""

from .detect import DetectOptions, ForestDetector, GradientDetector, detect, route
from .features import RECIPE_VERSION
from .forest import ForestParams, StructuredForest, Tree, train_forest, train_tree
from .model import load_model, save_model
from .samples import SampleSet, edges_to_segmentation, extract_samples, seg_to_edges

__all__ = [
    "DetectOptions",
    "ForestDetector",
    "GradientDetector",
    "detect",
    "route",
    "RECIPE_VERSION",
    "ForestParams",
    "StructuredForest",
    "Tree",
    "train_forest",
    "train_tree",
    "load_model",
    "save_model",
    "SampleSet",
    "edges_to_segmentation",
    "extract_samples",
    "seg_to_edges",
]
