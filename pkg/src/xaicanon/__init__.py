"""BatchNorm canonization, rule-based attribution and heatmap metrics for small networks."""
from .attribution import (
    AlphaBeta, Box, Composite, Epsilon, Gamma, Heatmap, Passthrough, attribute, gradient_saliency,
    normalize_heatmap, pool_channels,
)
from .canonize import FusionReport, canonize_graph
from .graph import LayerNode, ModelGraph, forward, predict
from .serialize import load_model, loads_model, save_model, write_model

__version__ = "0.1.0"

__all__ = [
    "AlphaBeta", "Box", "Composite", "Epsilon", "Gamma", "Heatmap", "Passthrough", "attribute",
    "gradient_saliency", "normalize_heatmap", "pool_channels", "FusionReport", "canonize_graph",
    "LayerNode", "ModelGraph", "forward", "predict", "load_model", "loads_model", "save_model", "write_model",
]
