"""Deep structured segmentation: CNN-parameterised CRF potentials trained piecewise."""
from .featmap import FeatMapConfig, build_featmapnet, featmap_forward
from .graph import CrfGraph, RelationSpec, build_graph
from .infer import RefineParams, mean_field, predict
from .potentials import ContextCRF, PotentialNetsConfig, PotentialTables
from .train import TrainConfig, TrainSample, piecewise_nll, train

__all__ = [
    "ContextCRF",
    "CrfGraph",
    "FeatMapConfig",
    "PotentialNetsConfig",
    "PotentialTables",
    "RefineParams",
    "RelationSpec",
    "TrainConfig",
    "TrainSample",
    "build_featmapnet",
    "build_graph",
    "featmap_forward",
    "mean_field",
    "piecewise_nll",
    "predict",
    "train",
]
