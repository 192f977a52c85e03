"""Native on-disk dataset format.

A dataset directory holds two files:

``windows.bin``
    ``b"MEGPH1\\0"`` magic, ``u32`` channel count, ``u32`` time samples,
    ``u64`` window count, then the windows as little-endian float32,
    row-major ``[channels, time]``.
``manifest.csv``
    ``index,phoneme,split,session`` - one row per window, in file order.

The reader validates the header, the payload size, the manifest and every
payload value before it yields the first window.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .data import SPLITS, Dataset, PhonemeInventory, PhonemeWindow, SplitData
from .errors import ConfigurationError, InputError, ParseError

MAGIC = b"MEGPH1\0"
HEADER = struct.Struct("<IIQ")
HEADER_SIZE = len(MAGIC) + HEADER.size
WINDOWS_FILE = "windows.bin"
MANIFEST_FILE = "manifest.csv"
MANIFEST_COLUMNS = ["index", "phoneme", "split", "session"]
FORMATS = ("native",)

PathLike = Union[str, Path]


def write_native(dataset: Dataset, directory: PathLike, splits=None) -> Tuple[Path, Path]:
    """Write ``dataset`` (raw values) split by split in canonical split order."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [s for s in (splits or SPLITS) if s in dataset]
    parts = [dataset[s] for s in names]
    if not parts:
        raise InputError("dataset has no splits to write")
    C, T = parts[0].n_channels, parts[0].n_times
    if any((p.n_channels, p.n_times) != (C, T) for p in parts):
        raise InputError("all splits must share the window geometry")
    count = sum(len(p) for p in parts)
    bin_path, csv_path = directory / WINDOWS_FILE, directory / MANIFEST_FILE
    with open(bin_path, "wb") as fh:
        fh.write(MAGIC + HEADER.pack(C, T, count))
        for p in parts:
            for start in range(0, len(p), 1024):
                fh.write(np.ascontiguousarray(p.raw[start : start + 1024], dtype="<f4").tobytes())
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        index = 0
        for p in parts:
            for label, session in zip(p.labels, p.sessions):
                w.writerow([index, dataset.inventory.symbol(int(label)), p.name, session])
                index += 1
    return bin_path, csv_path


def _read_header(path: Path) -> Tuple[int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    if len(head) < len(MAGIC) or head[: len(MAGIC)] != MAGIC[: len(head)]:
        raise ParseError(f"{path.name}: bad magic", offset=0)
    if len(head) < HEADER_SIZE:
        raise ParseError(f"{path.name}: truncated header", offset=len(head))
    channels, times, count = HEADER.unpack_from(head, len(MAGIC))
    if channels == 0 or times == 0:
        raise ParseError(f"{path.name}: zero channel or time dimension", offset=len(MAGIC))
    return channels, times, count


def _read_manifest(path: Path, inventory: PhonemeInventory) -> List[Tuple[int, str, str]]:
    rows = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise ParseError(f"{path.name}: expected header {','.join(MANIFEST_COLUMNS)}, got {header}", offset=0)
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"{path.name} line {line_no}: expected 4 fields, got {len(row)}")
            index, symbol, split, session = row
            if not index.isdigit() or int(index) != len(rows):
                raise ParseError(f"{path.name} line {line_no}: index {index!r} out of sequence")
            if split not in SPLITS:
                raise ParseError(f"{path.name} line {line_no}: unknown split {split!r}")
            rows.append((inventory.id_of(symbol), split, session))
    return rows


def _scan(directory: PathLike, inventory: PhonemeInventory):
    directory = Path(directory)
    bin_path, csv_path = directory / WINDOWS_FILE, directory / MANIFEST_FILE
    if not bin_path.is_file():
        raise InputError(f"missing {bin_path}")
    channels, times, count = _read_header(bin_path)
    window_bytes = 4 * channels * times
    expected = HEADER_SIZE + count * window_bytes
    size = bin_path.stat().st_size
    if size < expected:
        complete = (size - HEADER_SIZE) // window_bytes
        raise ParseError(
            f"{bin_path.name}: truncated payload, {complete} of {count} windows complete",
            offset=HEADER_SIZE + complete * window_bytes,
        )
    if size > expected:
        raise ParseError(f"{bin_path.name}: {size - expected} unexpected trailing bytes", offset=expected)
    manifest = _read_manifest(csv_path, inventory)
    if len(manifest) != count:
        raise ParseError(f"{csv_path.name}: {len(manifest)} rows but {count} windows in {bin_path.name}")
    data = np.memmap(bin_path, dtype="<f4", mode="r", offset=HEADER_SIZE, shape=(count, channels, times)) if count else np.zeros((0, channels, times), "<f4")
    for start in range(0, count, 1024):
        block = data[start : start + 1024]
        finite = np.isfinite(block).reshape(len(block), -1).all(axis=1)
        if not finite.all():
            bad = start + int(np.argmin(finite))
            raise ParseError(f"{bin_path.name}: window {bad} contains NaN or Inf", offset=HEADER_SIZE + bad * window_bytes)
    return data, manifest


def ingest(path: PathLike, format: str = "native", inventory: Optional[PhonemeInventory] = None) -> Iterator[PhonemeWindow]:
    """Validate the dataset at ``path`` completely, then yield its windows in file order."""
    if format not in FORMATS:
        raise ConfigurationError(f"unsupported format {format!r}; available: {FORMATS}")
    data, manifest = _scan(path, inventory or PhonemeInventory())

    def windows():
        for i, (label, split, session) in enumerate(manifest):
            yield PhonemeWindow(np.array(data[i], dtype=np.float32), label, split, session)

    return windows()


def load_dataset(path: PathLike, inventory: Optional[PhonemeInventory] = None) -> Dataset:
    """Read a native dataset into raw (unstandardized) splits.

    Validation and test windows that are byte-identical are stored once,
    mirroring the layout produced by the synthetic generator.
    """
    inventory = inventory or PhonemeInventory()
    data, manifest = _scan(path, inventory)
    labels = np.array([m[0] for m in manifest], dtype=np.int64)
    split_of = np.array([m[1] for m in manifest], dtype=object)
    sessions = np.array([m[2] for m in manifest], dtype=object)
    splits: Dict[str, SplitData] = {}
    for name in SPLITS:
        idx = np.flatnonzero(split_of == name)
        if idx.size:
            splits[name] = SplitData(name, np.array(data[idx], dtype=np.float32), labels[idx], sessions[idx])
    if "validation" in splits and "test" in splits:
        val, test = splits["validation"], splits["test"]
        if val.raw.shape == test.raw.shape and np.array_equal(val.raw, test.raw):
            splits["test"] = SplitData("test", val.raw, test.labels, test.sessions)
    return Dataset(splits, inventory, {"source": str(Path(path))})
