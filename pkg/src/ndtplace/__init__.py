"""Place recognition from condensed NDT cell sets."""

from .condenser import CondenserConfig, condense, condense_many
from .metric import TrainSchedule, lazy_quadruplet_loss, train
from .model import ModelConfig, PlaceNet, embed
from .ndt import NdtCell, NdtMap, estimate_cell, regularize_cov, sym_kl, transform_cell, voxel_partition
from .places import PlaceRecord, build_pair_index, segment_trajectory, synth_dataset
from .retrieval import DescriptorIndex, evaluate

__all__ = [
    "CondenserConfig",
    "DescriptorIndex",
    "ModelConfig",
    "NdtCell",
    "NdtMap",
    "PlaceNet",
    "PlaceRecord",
    "TrainSchedule",
    "build_pair_index",
    "condense",
    "condense_many",
    "embed",
    "estimate_cell",
    "evaluate",
    "lazy_quadruplet_loss",
    "regularize_cov",
    "segment_trajectory",
    "sym_kl",
    "synth_dataset",
    "train",
    "transform_cell",
    "voxel_partition",
]
