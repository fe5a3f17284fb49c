"""NPNet: a non-pooling semantic segmentation network on numpy."""

from .checkpoint import load_checkpoint, save_checkpoint
from .data import DatasetSpec, SampleRecord, index_dataset, load_sample, split_dataset
from .gradcheck import gradcheck
from .metrics import ConfusionCounts, MetricsReport, confusion, evaluate, iou_dice
from .model import ModelConfig, NPNet, build_npnet, count_macs, count_params, npnet_forward
from .optim import adam_step
from .train import TrainConfig, train

__all__ = [
    "ConfusionCounts",
    "DatasetSpec",
    "MetricsReport",
    "ModelConfig",
    "NPNet",
    "SampleRecord",
    "TrainConfig",
    "adam_step",
    "build_npnet",
    "confusion",
    "count_macs",
    "count_params",
    "evaluate",
    "gradcheck",
    "index_dataset",
    "iou_dice",
    "load_checkpoint",
    "load_sample",
    "npnet_forward",
    "save_checkpoint",
    "split_dataset",
    "train",
]
