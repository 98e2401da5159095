"""Reverse-mode automatic differentiation on numpy arrays."""

from bevseg.autodiff.tensor import Tape, Tensor, backward, active_tape
from bevseg.autodiff import ops  # noqa: F401  (installs Tensor operator sugar)
from bevseg.autodiff.modules import (
    BatchNorm2d,
    Conv2d,
    ConvBnRelu,
    ConvTranspose2d,
    Linear,
    Module,
)
from bevseg.autodiff.optim import AdamW
from bevseg.autodiff.gradcheck import finite_diff_check

__all__ = [
    "Tape", "Tensor", "backward", "active_tape", "ops",
    "Module", "Conv2d", "ConvTranspose2d", "BatchNorm2d", "Linear", "ConvBnRelu",
    "AdamW", "finite_diff_check",
]
