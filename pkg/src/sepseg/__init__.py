"""Lightweight encoder-decoder CT lesion segmentation, built from scratch.

Numpy-backed tensors with reverse-mode autodiff, depthwise separable
convolutions, a residual encoder-decoder with bilinear and pixel-shuffle
upsampling, CT preprocessing, an Adam training loop and a parameter
auditor against a standard-convolution UNet baseline.
"""

from .autograd import Rng, Tensor, backward, grad_check
from .model import ModelSpec, build_model, count_parameters, forward

__version__ = "0.1.0"

__all__ = [
    "Rng",
    "Tensor",
    "backward",
    "grad_check",
    "ModelSpec",
    "build_model",
    "count_parameters",
    "forward",
]
