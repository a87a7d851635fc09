"""Rotation-equivariant U-Nets on a small numpy autodiff engine."""

from .groups import SymmetryGroup, GroupElement
from .tensor import Tensor, Tape, backward, no_grad
from .unet import ArchConfig, UNet, build_model, count_params, preset

__all__ = [
    "ArchConfig", "GroupElement", "SymmetryGroup", "Tape", "Tensor", "UNet",
    "backward", "build_model", "count_params", "no_grad", "preset",
]
__version__ = "0.1.0"
