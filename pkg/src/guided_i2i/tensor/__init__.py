"""Float64 tensors with tape-based reverse-mode autodiff."""

from . import ops
from .core import Tape, Tensor, backward
from .gradcheck import GradCheckReport, grad_check
from .io import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .kernels import BACKEND

__all__ = [
    "BACKEND",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "backward",
    "grad_check",
    "load_tensor",
    "ops",
    "save_tensor",
    "tensor_from_bytes",
    "tensor_to_bytes",
]
