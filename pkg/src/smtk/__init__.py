"""Soft-masked vector-attention networks for point-cloud segmentation.

Everything runs on a small numpy autodiff engine (:mod:`smtk.tensor`).
"""

from .errors import FormatError, NumericalError
from .estimator import SMTSegmenter
from .geometry import PointCloud, build_pooling_map, grid_pool, grid_unpool, knn, read_xyzl, write_xyzl
from .network import (
    ABLATION_CASES,
    TOY_CONFIG,
    NetworkConfig,
    ablation_config,
    build,
    count_parameters,
    forward,
    load,
    save,
)
from .tensor import ShapeError, Tensor
from .train import Metrics, SyntheticSceneSpec, TrainSchedule, evaluate, generate_scene, make_dataset, train_loop

__version__ = "0.1.0"

__all__ = [
    "ABLATION_CASES",
    "FormatError",
    "Metrics",
    "NetworkConfig",
    "NumericalError",
    "PointCloud",
    "SMTSegmenter",
    "ShapeError",
    "SyntheticSceneSpec",
    "TOY_CONFIG",
    "Tensor",
    "TrainSchedule",
    "ablation_config",
    "build",
    "build_pooling_map",
    "count_parameters",
    "evaluate",
    "forward",
    "generate_scene",
    "grid_pool",
    "grid_unpool",
    "knn",
    "load",
    "make_dataset",
    "read_xyzl",
    "save",
    "train_loop",
    "write_xyzl",
]
