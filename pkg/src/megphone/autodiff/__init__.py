"""NumPy-backed tensors with reverse-mode differentiation."""

from . import nn, ops
from .spectral import fft_roundtrip, irfft, rfft, stft, stft_shape
from .taps import TapRegistry, current_registry, read_taps
from .tensor import Tensor, concat, is_grad_enabled, no_grad

__all__ = [
    "Tensor",
    "TapRegistry",
    "concat",
    "current_registry",
    "fft_roundtrip",
    "irfft",
    "is_grad_enabled",
    "nn",
    "no_grad",
    "ops",
    "read_taps",
    "rfft",
    "stft",
    "stft_shape",
]
