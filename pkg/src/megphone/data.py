"""Dataset representation, split-specific standardization and a synthetic generator.

Windows are stored raw; every split carries the :class:`ChannelStats` that
standardize it, and standardization happens when data is pulled out. This
lets the validation and test splits share one raw array while being
standardized with different statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Union

import numpy as np

from .errors import InputError, VocabularyError

SAMPLE_RATE = 250.0
N_CHANNELS = 306
N_TIMES = 125  # 0.5 s at 250 Hz
N_CLASSES = 39
SPLITS = ("train", "validation", "test", "holdout")
STD_FLOOR = 1e-8

# which split's statistics standardize each split
STANDARDIZATION_SOURCE = {
    "train": "train",
    "validation": "train",
    "test": "test",
    "holdout": "holdout",
}

ARPABET_39 = (
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh",
    "eh", "er", "ey", "f", "g", "hh", "ih", "iy", "jh", "k",
    "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh",
    "t", "th", "uh", "uw", "v", "w", "y", "z", "zh",
)  # fmt: skip


@dataclass(frozen=True)
class PhonemeInventory:
    symbols: tuple = ARPABET_39

    def __post_init__(self):
        symbols = tuple(self.symbols)
        object.__setattr__(self, "symbols", symbols)
        if len(symbols) != N_CLASSES:
            raise InputError(f"inventory must have {N_CLASSES} symbols, got {len(symbols)}")
        if len(set(symbols)) != len(symbols):
            raise InputError("inventory symbols must be unique")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(symbols)})

    def __len__(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise VocabularyError(f"unknown phoneme symbol {symbol!r}") from None

    def symbol(self, class_id: int) -> str:
        return self.symbols[class_id]


@dataclass
class PhonemeWindow:
    data: np.ndarray  # [channels, time]
    label: int
    split: str
    session_id: str = ""

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InputError(f"unknown split {self.split!r}")
        if self.data.ndim != 2:
            raise InputError(f"window data must be [channels, time], got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise InputError("window contains NaN or Inf")


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    source_split: str
    n_samples: int


class _RunningMoments:
    """Chan et al. pairwise merge of per-channel mean and M2, in float64."""

    def __init__(self):
        self.n = 0
        self.mean = None
        self.m2 = None

    def update(self, block: np.ndarray) -> None:
        # block: [..., channels, time]; reduce over everything but channels
        x = np.asarray(block, dtype=np.float64)
        x = np.moveaxis(x, -2, 0).reshape(x.shape[-2], -1)
        nb = x.shape[1]
        if nb == 0:
            return
        mb = x.mean(axis=1)
        m2b = ((x - mb[:, None]) ** 2).sum(axis=1)
        if self.n == 0:
            self.n, self.mean, self.m2 = nb, mb, m2b
            return
        n = self.n + nb
        delta = mb - self.mean
        self.mean = self.mean + delta * (nb / n)
        self.m2 = self.m2 + m2b + delta**2 * (self.n * nb / n)
        self.n = n


def compute_stats(
    windows: Union[Iterable[PhonemeWindow], np.ndarray], source_split: str = "train", chunk: int = 256
) -> ChannelStats:
    """Per-channel mean and population std over all windows and time points.

    Accepts a stream of :class:`PhonemeWindow` or an array ``[N, C, T]``.
    """
    acc = _RunningMoments()
    count = 0
    if isinstance(windows, np.ndarray):
        for start in range(0, len(windows), chunk):
            block = windows[start : start + chunk]
            acc.update(block)
            count += len(block)
    else:
        for w in windows:
            acc.update(w.data)
            count += 1
    if count == 0:
        raise InputError("cannot compute channel statistics from an empty stream")
    std = np.sqrt(acc.m2 / acc.n)
    return ChannelStats(acc.mean, np.maximum(std, STD_FLOOR), source_split, count)


def standardize_array(x: np.ndarray, stats: ChannelStats) -> np.ndarray:
    mean = stats.mean.astype(np.float32)[:, None]
    std = stats.std.astype(np.float32)[:, None]
    return ((x - mean) / std).astype(np.float32, copy=False)


def standardize(window: PhonemeWindow, stats: ChannelStats) -> PhonemeWindow:
    return PhonemeWindow(standardize_array(window.data, stats), window.label, window.split, window.session_id)


def unit_stats(n_channels: int = N_CHANNELS) -> ChannelStats:
    return ChannelStats(np.zeros(n_channels), np.ones(n_channels), "identity", 0)


@dataclass
class SplitData:
    """One split: raw windows plus the statistics used to standardize them."""

    name: str
    raw: np.ndarray  # [N, C, T] float32
    labels: np.ndarray  # [N] int64
    sessions: np.ndarray  # [N] str
    stats: Optional[ChannelStats] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=object)
        if not (len(self.raw) == len(self.labels) == len(self.sessions)):
            raise InputError(f"split {self.name}: data, labels and sessions differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_channels(self) -> int:
        return self.raw.shape[1]

    @property
    def n_times(self) -> int:
        return self.raw.shape[2]

    def batch(self, indices) -> np.ndarray:
        """Standardized float32 copy of the selected windows."""
        x = self.raw[np.asarray(indices)]
        if self.stats is None:
            return np.array(x, dtype=np.float32)
        return standardize_array(x, self.stats)

    def window(self, i: int) -> PhonemeWindow:
        return PhonemeWindow(self.batch([i])[0], int(self.labels[i]), self.name, str(self.sessions[i]))

    def windows(self) -> Iterator[PhonemeWindow]:
        for i in range(len(self)):
            yield self.window(i)

    def raw_windows(self) -> Iterator[PhonemeWindow]:
        for i in range(len(self)):
            yield PhonemeWindow(self.raw[i], int(self.labels[i]), self.name, str(self.sessions[i]))

    def with_stats(self, stats: Optional[ChannelStats]) -> "SplitData":
        return SplitData(self.name, self.raw, self.labels, self.sessions, stats)

    def subset(self, indices) -> "SplitData":
        idx = np.asarray(indices)
        return SplitData(self.name, self.raw[idx], self.labels[idx], self.sessions[idx], self.stats)


@dataclass
class Dataset:
    splits: Dict[str, SplitData]
    inventory: PhonemeInventory = field(default_factory=PhonemeInventory)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> SplitData:
        if name not in self.splits:
            raise InputError(f"dataset has no {name!r} split (available: {sorted(self.splits)})")
        return self.splits[name]

    def __contains__(self, name: str) -> bool:
        return name in self.splits

    def standardized(self, policy: Optional[Dict[str, str]] = None) -> "Dataset":
        """Attach per-split statistics: train/validation use train stats, test/holdout their own."""
        policy = policy or STANDARDIZATION_SOURCE
        cache: Dict[str, ChannelStats] = {}
        out = {}
        for name, split in self.splits.items():
            source = policy.get(name, name)
            if source not in cache:
                cache[source] = compute_stats(self[source].raw, source)
            out[name] = split.with_stats(cache[source])
        return Dataset(out, self.inventory, dict(self.meta, stats=cache))


def class_histogram(split: Union[SplitData, Sequence[int], np.ndarray], n_classes: int = N_CLASSES) -> np.ndarray:
    labels = split.labels if isinstance(split, SplitData) else np.asarray(split, dtype=np.int64)
    return np.bincount(labels, minlength=n_classes)[:n_classes] if len(labels) else np.zeros(n_classes, dtype=np.int64)


@dataclass
class DatasetManifest:
    counts: Dict[str, int]
    histograms: Dict[str, np.ndarray]
    source_paths: List[str] = field(default_factory=list)

    @classmethod
    def from_dataset(cls, dataset: Dataset, source_paths: Sequence[str] = ()) -> "DatasetManifest":
        return cls(
            {name: len(s) for name, s in dataset.splits.items()},
            {name: class_histogram(s) for name, s in dataset.splits.items()},
            list(source_paths),
        )


def format_histogram(hist: np.ndarray, inventory: PhonemeInventory, width: int = 40) -> str:
    """Text bar chart of class counts, most frequent first."""
    order = np.argsort(-hist, kind="stable")
    peak = max(int(hist.max()), 1)
    lines = []
    for i in order:
        bar = "#" * int(round(width * hist[i] / peak))
        lines.append(f"{inventory.symbol(i):>3} {int(hist[i]):>8} {bar}")
    return "\n".join(lines)


# -- synthetic data -------------------------------------------------------------------


def _class_templates(rng, n_classes, n_channels, n_times, sample_rate):
    t = np.arange(n_times) / sample_rate
    pos = np.arange(n_channels) / n_channels
    centre = t[n_times // 2]
    templates = np.zeros((n_classes, n_channels, n_times))
    for k in range(n_classes):
        for _ in range(rng.integers(2, 5)):
            freq = rng.uniform(1.0, 20.0)
            phase = rng.uniform(0, 2 * np.pi)
            width = rng.uniform(0.08, 0.25)
            temporal = np.sin(2 * np.pi * freq * t + phase) * np.exp(-0.5 * ((t - centre) / width) ** 2)
            # smooth spatial mixing: a few low-order cosines over the sensor index
            spatial = np.zeros(n_channels)
            for order in range(1, 5):
                spatial += rng.standard_normal() * np.cos(np.pi * order * pos + rng.uniform(0, 2 * np.pi))
            templates[k] += spatial[:, None] * temporal[None, :]
        templates[k] /= np.sqrt(np.mean(templates[k] ** 2))
    return templates


def generate_synthetic(
    n_per_class: int,
    snr: float,
    seed: int,
    n_classes: int = N_CLASSES,
    n_channels: int = N_CHANNELS,
    n_times: int = N_TIMES,
    eval_per_class: Optional[int] = None,
    n_train_sessions: int = 8,
    n_eval_sessions: int = 2,
    drift: float = 0.5,
    sample_rate: float = SAMPLE_RATE,
) -> Dataset:
    """Class templates plus white noise, with per-session channel gain/offset drift.

    Each class has a fixed template with unit RMS; noise has variance
    ``1 / snr`` so template power over noise power equals ``snr``
    (``snr=inf`` gives noiseless windows). Every session applies its own
    per-channel gain ``exp(0.3 * drift * z)`` and offset ``drift * z``.

    The validation and test splits share the same raw windows. Once
    standardized (train statistics for validation, own statistics for test)
    they differ by a per-channel affine map.
    """
    if n_per_class < 1:
        raise InputError("n_per_class must be >= 1")
    if not snr > 0:
        raise InputError("snr must be > 0")
    if not 1 <= n_classes <= N_CLASSES:
        raise InputError(f"n_classes must lie in [1, {N_CLASSES}]")
    eval_per_class = max(1, n_per_class // 2) if eval_per_class is None else eval_per_class
    rng = np.random.default_rng(seed)
    templates = _class_templates(rng, n_classes, n_channels, n_times, sample_rate)
    noise_std = 0.0 if np.isinf(snr) else float(np.sqrt(1.0 / snr))

    def session_params(prefix, count):
        names = [f"{prefix}-{i:02d}" for i in range(count)]
        gains = np.exp(0.3 * drift * rng.standard_normal((count, n_channels)))
        offsets = drift * rng.standard_normal((count, n_channels))
        return names, gains.astype(np.float32), offsets.astype(np.float32)

    def make_split(name, per_class, sessions):
        names, gains, offsets = sessions
        labels = np.repeat(np.arange(n_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        sess = rng.integers(0, len(names), len(labels))
        raw = np.empty((len(labels), n_channels, n_times), dtype=np.float32)
        tmpl32 = templates.astype(np.float32)
        for start in range(0, len(labels), 512):
            sl = slice(start, start + 512)
            block = tmpl32[labels[sl]]
            if noise_std > 0:
                block = block + noise_std * rng.standard_normal(block.shape, dtype=np.float32)
            raw[sl] = gains[sess[sl]][:, :, None] * block + offsets[sess[sl]][:, :, None]
        return SplitData(name, raw, labels, np.array(names, dtype=object)[sess])

    train = make_split("train", n_per_class, session_params("train", n_train_sessions))
    validation = make_split("validation", eval_per_class, session_params("eval", n_eval_sessions))
    test = SplitData("test", validation.raw, validation.labels, validation.sessions)
    meta = {
        "templates": templates,
        "noise_std": noise_std,
        "params": dict(
            n_per_class=n_per_class, snr=snr, seed=seed, n_classes=n_classes, n_channels=n_channels,
            n_times=n_times, eval_per_class=eval_per_class, n_train_sessions=n_train_sessions,
            n_eval_sessions=n_eval_sessions, drift=drift,
        ),
    }
    return Dataset({"train": train, "validation": validation, "test": test}, PhonemeInventory(), meta)
