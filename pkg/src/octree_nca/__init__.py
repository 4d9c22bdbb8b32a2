"""OctreeNCA: size-invariant segmentation with octree-staged neural cellular automata."""
import warnings

warnings.filterwarnings("ignore", message="The TBB threading layer", module="numba")

from .grid import CellGrid, avg_downsample, crop_patch, nn_upsample, seed_from_image  # noqa: E402
from .model import NcaWeights, OctreeModel, count_params, init_weights, load_model, save_model  # noqa: E402
from .schedule import PyramidSchedule, build_schedule  # noqa: E402
from .reference import rollout_reference  # noqa: E402
from .fused import FusedEngine, fused_rollout  # noqa: E402
from .octree import SegmentationResult, segment  # noqa: E402
from .training import TrainConfig, evaluate_dice, fit  # noqa: E402

__all__ = [
    "CellGrid",
    "FusedEngine",
    "NcaWeights",
    "OctreeModel",
    "PyramidSchedule",
    "SegmentationResult",
    "TrainConfig",
    "avg_downsample",
    "build_schedule",
    "count_params",
    "crop_patch",
    "evaluate_dice",
    "fit",
    "fused_rollout",
    "init_weights",
    "load_model",
    "nn_upsample",
    "rollout_reference",
    "save_model",
    "seed_from_image",
    "segment",
]
