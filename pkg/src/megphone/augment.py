"""Training-time augmentations for [channels, time] windows.

Each operation is a pure function of the input and an explicit
``numpy.random.Generator``; optional keyword overrides pin the random draw
so tests can exercise exact cases.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import SAMPLE_RATE
from .errors import ConfigurationError

ORDER = ("noise", "shift", "mask", "channel_dropout", "amplitude", "band")


@dataclass
class AugmentConfig:
    p_apply: float = 0.3
    noise_rel_std: float = 0.01
    max_shift_ms: float = 40.0
    max_mask_ms: float = 80.0
    channel_drop_frac: float = 0.10
    amp_range: Tuple[float, float] = (0.9, 1.1)
    band_scale_range: Tuple[float, float] = (0.8, 1.2)
    band_max_hz: float = 100.0
    band_width_hz: float = 10.0
    max_bands: int = 3
    sample_rate: float = SAMPLE_RATE
    # per-operation overrides of p_apply, e.g. {"band": 0.0}
    p_overrides: dict = field(default_factory=dict)

    def validate(self) -> "AugmentConfig":
        probs = [self.p_apply] + list(self.p_overrides.values())
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise ConfigurationError("augmentation probabilities must lie in [0, 1]")
        unknown = set(self.p_overrides) - set(ORDER)
        if unknown:
            raise ConfigurationError(f"unknown augmentation names {sorted(unknown)}")
        for name in ("amp_range", "band_scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} must be (low, high) with low <= high")
        if not 0.0 <= self.channel_drop_frac <= 1.0:
            raise ConfigurationError("channel_drop_frac must lie in [0, 1]")
        if self.noise_rel_std < 0 or self.max_shift_ms < 0 or self.max_mask_ms < 0:
            raise ConfigurationError("noise, shift and mask magnitudes must be >= 0")
        if self.max_bands < 1 or self.band_width_hz <= 0:
            raise ConfigurationError("max_bands must be >= 1 and band_width_hz > 0")
        return self

    def probability(self, name: str) -> float:
        return float(self.p_overrides.get(name, self.p_apply))

    @property
    def enabled(self) -> bool:
        return any(self.probability(n) > 0 for n in ORDER)

    @property
    def max_shift(self) -> int:
        return int(round(self.max_shift_ms * self.sample_rate / 1000.0))

    @property
    def max_mask(self) -> int:
        return int(round(self.max_mask_ms * self.sample_rate / 1000.0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["amp_range"] = list(self.amp_range)
        d["band_scale_range"] = list(self.band_scale_range)
        return d

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_apply=0.0)


def gaussian_noise(x: np.ndarray, rng: np.random.Generator, rel_std: float = 0.01) -> np.ndarray:
    """Add white noise scaled to ``rel_std`` times the whole-window std."""
    scale = rel_std * float(np.std(x))
    if scale == 0.0:
        return x.copy()
    return (x + scale * rng.standard_normal(x.shape)).astype(x.dtype)


def temporal_shift(x: np.ndarray, rng: np.random.Generator, max_shift: int = 10, shift: Optional[int] = None) -> np.ndarray:
    """Circularly rotate every channel by the same integer number of samples."""
    if shift is None:
        shift = int(rng.integers(-max_shift, max_shift + 1))
    return np.roll(x, shift, axis=-1)


def temporal_mask(
    x: np.ndarray, rng: np.random.Generator, max_len: int = 20, length: Optional[int] = None, start: Optional[int] = None
) -> np.ndarray:
    T = x.shape[-1]
    if length is None:
        length = int(rng.integers(1, max_len + 1))
    length = min(length, max_len, T)
    if start is None:
        start = int(rng.integers(0, T - length + 1))
    out = x.copy()
    out[..., start : start + length] = 0
    return out


def channel_dropout(x: np.ndarray, rng: np.random.Generator, frac: float = 0.10) -> np.ndarray:
    """Zero ``floor(frac * C)`` channels chosen without replacement."""
    n_drop = int(np.floor(frac * x.shape[0] + 1e-9))
    out = x.copy()
    if n_drop:
        out[rng.choice(x.shape[0], size=n_drop, replace=False)] = 0
    return out


def amplitude_scale(
    x: np.ndarray, rng: np.random.Generator, low: float = 0.9, high: float = 1.1, factor: Optional[float] = None
) -> np.ndarray:
    s = rng.uniform(low, high) if factor is None else factor
    return (x * s).astype(x.dtype)


def band_edges(max_hz: float = 100.0, width_hz: float = 10.0) -> List[Tuple[float, float]]:
    n = int(round(max_hz / width_hz))
    return [(b * width_hz, (b + 1) * width_hz) for b in range(n)]


def band_bins(freqs: np.ndarray, band: Tuple[float, float], last: bool) -> np.ndarray:
    lo, hi = band
    # bands are half-open except the last one, which includes its upper edge
    return (freqs >= lo) & ((freqs <= hi) if last else (freqs < hi))


def frequency_band_perturb(
    x: np.ndarray,
    rng: np.random.Generator,
    config: Optional[AugmentConfig] = None,
    bands: Optional[Sequence[int]] = None,
    scales: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Scale the spectrum inside 1..max_bands randomly chosen bands, per channel.

    ``bands``/``scales`` pin the draw. Bins outside the chosen bands are left
    untouched, so the output only differs from the input by FFT round-off
    there.
    """
    config = config or AugmentConfig()
    edges = band_edges(config.band_max_hz, config.band_width_hz)
    if bands is None:
        k = int(rng.integers(1, min(config.max_bands, len(edges)) + 1))
        bands = np.sort(rng.choice(len(edges), size=k, replace=False))
    if scales is None:
        scales = rng.uniform(*config.band_scale_range, size=len(bands))
    T = x.shape[-1]
    spec = np.fft.rfft(np.asarray(x, dtype=np.float64), axis=-1)
    freqs = np.fft.rfftfreq(T, d=1.0 / config.sample_rate)
    gain = np.ones(len(freqs))
    for b, s in zip(bands, scales):
        gain[band_bins(freqs, edges[b], b == len(edges) - 1)] = s
    return np.fft.irfft(spec * gain, n=T, axis=-1).astype(x.dtype)


def apply_pipeline(
    x: np.ndarray, config: AugmentConfig, rng: np.random.Generator, fired: Optional[List[str]] = None
) -> np.ndarray:
    """Gate each augmentation with its own Bernoulli draw and apply in fixed order.

    The gate draws are taken up front so that the firing pattern does not
    depend on which operations consume randomness. Names of the operations
    that fired are appended to ``fired`` when given.
    """
    gates = rng.random(len(ORDER)) < np.array([config.probability(n) for n in ORDER])
    out = x
    for name, on in zip(ORDER, gates):
        if not on:
            continue
        if fired is not None:
            fired.append(name)
        if name == "noise":
            out = gaussian_noise(out, rng, config.noise_rel_std)
        elif name == "shift":
            out = temporal_shift(out, rng, config.max_shift)
        elif name == "mask":
            out = temporal_mask(out, rng, config.max_mask)
        elif name == "channel_dropout":
            out = channel_dropout(out, rng, config.channel_drop_frac)
        elif name == "amplitude":
            out = amplitude_scale(out, rng, *config.amp_range)
        else:
            out = frequency_band_perturb(out, rng, config)
    return out if out is not x else x.copy()


def augment_batch(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the pipeline independently to every window of ``[B, C, T]``."""
    if not config.enabled:
        return batch
    return np.stack([apply_pipeline(w, config, rng) for w in batch])
