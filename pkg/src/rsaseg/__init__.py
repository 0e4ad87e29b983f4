"""Slice-wise attention segmentation toolkit.

A self-contained engine: dense tensors with a reverse-mode tape, slice-wise
and non-local attention blocks with scalar-loop oracles, an analytical
attention cost model, a toy 3D U-Net with class-weighted training, synthetic
lesion phantoms, and pooled segmentation metrics.
"""

from . import attention, costmodel, data, metrics, network, tensor, train
from .estimator import VolumeSegmenter

__all__ = [
    "attention",
    "costmodel",
    "data",
    "metrics",
    "network",
    "tensor",
    "train",
    "VolumeSegmenter",
]

__version__ = "0.1.0"
