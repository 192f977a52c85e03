"""Spectral transforms: a differentiable STFT magnitude and FFT round trips."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError
from .tensor import Tensor, ensure_tensor, make_result


def stft_shape(n_times: int, n_fft: int, hop: int) -> tuple:
    """``(n_bins, n_frames)`` for a rectangular-window, unpadded STFT."""
    if n_fft > n_times:
        raise ConfigurationError(f"n_fft={n_fft} exceeds signal length {n_times}")
    if hop < 1 or n_fft < 1:
        raise ConfigurationError("n_fft and hop must be >= 1")
    return n_fft // 2 + 1, (n_times - n_fft) // hop + 1


def _dft_basis(n_fft: int, dtype) -> tuple:
    n = np.arange(n_fft)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    angle = 2.0 * np.pi * n * k / n_fft
    return np.cos(angle).astype(dtype), (-np.sin(angle)).astype(dtype)


def stft(x: Tensor, n_fft: int, hop: int) -> Tensor:
    """Magnitude STFT along the last axis: ``[..., T] -> [..., F, M]``.

    Frames use a rectangular window with no centering or padding, so
    ``M = (T - n_fft) // hop + 1`` and ``F = n_fft // 2 + 1``.
    """
    x = ensure_tensor(x)
    T = x.shape[-1]
    F, M = stft_shape(T, n_fft, hop)
    starts = np.arange(M) * hop
    frame_idx = starts[:, None] + np.arange(n_fft)[None, :]  # [M, n_fft]
    frames = x.data[..., frame_idx]  # [..., M, n_fft]
    cos_b, sin_b = _dft_basis(n_fft, x.dtype)
    re = frames @ cos_b
    im = frames @ sin_b
    mag = np.sqrt(re * re + im * im)
    out = np.swapaxes(mag, -1, -2)  # [..., F, M]

    def backward(g):
        g = np.swapaxes(g, -1, -2)  # [..., M, F]
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        gframes = (scale * re) @ cos_b.T + (scale * im) @ sin_b.T  # [..., M, n_fft]
        gx = np.zeros(x.shape, dtype=g.dtype)
        for m in range(M):
            gx[..., starts[m] : starts[m] + n_fft] += gframes[..., m, :]
        return (gx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def rfft(x: np.ndarray) -> np.ndarray:
    return np.fft.rfft(x, axis=-1)


def irfft(spectrum: np.ndarray, n: int) -> np.ndarray:
    return np.fft.irfft(spectrum, n=n, axis=-1)


def fft_roundtrip(x) -> np.ndarray:
    """Forward then inverse real FFT along the last axis."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = irfft(rfft(data), data.shape[-1])
    return out.astype(data.dtype if np.issubdtype(data.dtype, np.floating) else np.float64)


def rfft_frequencies(n: int, sample_rate: float) -> np.ndarray:
    return np.fft.rfftfreq(n, d=1.0 / sample_rate)
