"""Scale-configurable polyp segmentation with a transformer encoder and a
residual upsampling decoder, built on an in-package float32 autodiff core.
"""

from .data import Sample, SplitSpec, augment, load_sample, split_dataset, synth_dataset
from .encoder import EncoderOutput, StageConfig, encoder_forward, load_pretrained
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    FormatError,
    NumericError,
    ShapeError,
)
from .losses import bce_loss, combined_loss, dice_loss
from .metrics import (
    FpsStats,
    MetricReport,
    binary_counts,
    evaluate_dataset,
    measure_fps,
    metrics_from_counts,
)
from .model import ModelConfig, TransRUPNet
from .tensor import Tape, Tensor, backward, finite_diff_grad
from .train import AdamState, TrainConfig, adam_step, fit, train_epoch

__all__ = [
    "AdamState",
    "CheckpointError",
    "ContractError",
    "DataError",
    "EncoderOutput",
    "FormatError",
    "FpsStats",
    "MetricReport",
    "ModelConfig",
    "NumericError",
    "Sample",
    "ShapeError",
    "SplitSpec",
    "StageConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TransRUPNet",
    "adam_step",
    "augment",
    "backward",
    "bce_loss",
    "binary_counts",
    "combined_loss",
    "dice_loss",
    "encoder_forward",
    "evaluate_dataset",
    "finite_diff_grad",
    "fit",
    "load_pretrained",
    "load_sample",
    "measure_fps",
    "metrics_from_counts",
    "split_dataset",
    "synth_dataset",
    "train_epoch",
]

__version__ = "0.1.0"
