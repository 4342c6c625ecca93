"""Crack segmentation toolkit.

A small reverse-mode autodiff engine on numpy, the attention kernels and
blocks built on it, four segmentation networks (UNet, TransUNet, SwinUNet,
MTUNet), losses, metrics, data handling, training and a command line.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, CracknetError, DataError, DimensionError, FormatError,
                     GeometryError, GraphError, NumericError)
from .tensor import Tensor, grad_check, no_grad
from .models import ARCHS, Model, ModelConfig, build_model, forward, model_size_mb, param_count, predict_mask
from .losses import LossSpec, compute_loss
from .metrics import ConfusionCounts, MetricReport, confusion_counts
from .data import SegmentationSample, load_dataset, split_folds, synth_cracks
from .training import TrainConfig, evaluate, measure_throughput, train
from .checkpoint import checkpoint_load, checkpoint_save

__all__ = [
    "ARCHS", "ConfigError", "ConfusionCounts", "ContractError", "CracknetError", "DataError", "DimensionError",
    "FormatError", "GeometryError", "GraphError", "LossSpec", "MetricReport", "Model", "ModelConfig",
    "NumericError", "SegmentationSample", "Tensor", "TrainConfig", "build_model", "checkpoint_load",
    "checkpoint_save", "compute_loss", "confusion_counts", "evaluate", "forward", "grad_check",
    "load_dataset", "measure_throughput", "model_size_mb", "no_grad", "param_count", "predict_mask",
    "split_folds", "synth_cracks", "train",
]
