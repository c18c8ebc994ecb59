"""Minimal reverse-mode engine for the segmentation network."""
from . import functional
from .gradcheck import GradcheckReport, gradcheck
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, ConvTranspose2d, Module
from .optim import Adam, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "BatchNorm2d", "Conv2d", "ConvBNReLU", "ConvTranspose2d", "GradcheckReport",
    "Module", "Tensor", "adam_step", "functional", "gradcheck", "no_grad",
]
