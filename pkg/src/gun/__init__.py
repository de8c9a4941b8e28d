"""Guided upsampling toolkit.

Offset-steered nearest/bilinear sampling kernels with analytic backward
passes, a minimal reverse-mode tape over dense float64 tensors, a toy
multi-resolution segmentation network, boundary-accuracy metrics, and a
synthetic-scene data pipeline, driven by the `gun` command line tool.
"""

__version__ = "0.1.0"

from .errors import GunError
from .tensor import Tensor, no_grad
from .gum import (GuidanceConfig, SamplingGrid, guided_sample,
                  guided_sample_backward, guided_sample_forward,
                  make_regular_grid, plain_upsample_forward)
from .net import ModelConfig, TrainRecipe, gun_forward, train

__all__ = [
    "GunError", "Tensor", "no_grad", "GuidanceConfig", "SamplingGrid",
    "guided_sample", "guided_sample_backward", "guided_sample_forward",
    "make_regular_grid", "plain_upsample_forward", "ModelConfig",
    "TrainRecipe", "gun_forward", "train", "__version__",
]
