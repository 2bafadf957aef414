"""Graph-aware transformers for 2-D to 3-D pose lifting and pose-to-mesh regression."""
from .errors import (CheckpointError, ConfigError, GradientContractError, GraphStructureError,
                     KogError, SchemaError, ShapeError)
from .graph import (SkeletonGraph, build_order_masks, build_relative_index_map,
                    build_scaled_laplacian, build_signed_distance, load_skeleton)
from .models import (GaseNet, GaseNetConfig, KogTransformer, KogTransformerConfig, build_model,
                     kog_param_count)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ConfigError", "GradientContractError", "GraphStructureError", "KogError",
    "SchemaError", "ShapeError", "SkeletonGraph", "build_order_masks", "build_relative_index_map",
    "build_scaled_laplacian", "build_signed_distance", "load_skeleton", "GaseNet", "GaseNetConfig",
    "KogTransformer", "KogTransformerConfig", "build_model", "kog_param_count",
]
