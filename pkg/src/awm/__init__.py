"""Active weighted mapping (AWM) for residual and dense convolutional networks."""

from awm.awm_unit import AwmUnit, embed_paths, weighted_merge_concat, weighted_merge_sum
from awm.networks import NetworkConfig, build, count_parameters, mapping_unit_count
from awm.tensor import Tensor
from awm.trainer import TrainConfig, lr_at_epoch, phase_at_epoch, train

__all__ = [
    "AwmUnit",
    "NetworkConfig",
    "Tensor",
    "TrainConfig",
    "build",
    "count_parameters",
    "embed_paths",
    "lr_at_epoch",
    "mapping_unit_count",
    "phase_at_epoch",
    "train",
    "weighted_merge_concat",
    "weighted_merge_sum",
]
