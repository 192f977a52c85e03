import csv

import numpy as np
import pytest

from megphone import io
from megphone.data import generate_synthetic
from megphone.errors import ConfigurationError, ParseError, VocabularyError


@pytest.fixture
def dataset():
    return generate_synthetic(4, 0.5, 5, n_classes=3, n_channels=6, n_times=20)


@pytest.fixture
def written(tmp_path, dataset):
    io.write_native(dataset, tmp_path)
    return tmp_path


def test_header_layout(written, dataset):
    blob = (written / io.WINDOWS_FILE).read_bytes()
    assert blob[:7] == b"MEGPH1\0"
    channels, times, count = io.HEADER.unpack_from(blob, 7)
    assert (channels, times, count) == (6, 20, 24)
    assert len(blob) == io.HEADER_SIZE + count * channels * times * 4
    first = np.frombuffer(blob, "<f4", count=channels * times, offset=io.HEADER_SIZE)
    np.testing.assert_array_equal(first.reshape(6, 20), dataset["train"].raw[0])


def test_round_trip(written, dataset):
    windows = list(io.ingest(written))
    assert len(windows) == 24
    by_split = {}
    for w in windows:
        by_split.setdefault(w.split, []).append(w)
    for name in ("train", "validation", "test"):
        got = by_split[name]
        np.testing.assert_array_equal(np.stack([w.data for w in got]), dataset[name].raw)
        assert [w.label for w in got] == list(dataset[name].labels)
        assert [w.session_id for w in got] == list(dataset[name].sessions)


def test_load_dataset_shares_val_test(written, dataset):
    loaded = io.load_dataset(written)
    assert loaded["validation"].raw is loaded["test"].raw
    np.testing.assert_array_equal(loaded["train"].raw, dataset["train"].raw)


def test_order_stable(written):
    a = [(w.label, w.split, w.data.tobytes()) for w in io.ingest(written)]
    b = [(w.label, w.split, w.data.tobytes()) for w in io.ingest(written)]
    assert a == b


def test_manifest_counts_three_class_fixture(written):
    with open(written / io.MANIFEST_FILE) as fh:
        rows = list(csv.DictReader(fh))
    # 3 classes x 4 train, 3 x 2 validation, 3 x 2 test
    counts = {}
    for r in rows:
        counts[r["split"]] = counts.get(r["split"], 0) + 1
    assert counts == {"train": 12, "validation": 6, "test": 6}
    assert len(list(io.ingest(written))) == 24


def test_truncated_payload_reports_offset_and_yields_nothing(written):
    path = written / io.WINDOWS_FILE
    blob = path.read_bytes()
    window_bytes = 6 * 20 * 4
    path.write_bytes(blob[: io.HEADER_SIZE + 5 * window_bytes + 17])
    emitted = []
    with pytest.raises(ParseError) as err:
        for w in io.ingest(written):
            emitted.append(w)
    assert emitted == []
    assert err.value.offset == io.HEADER_SIZE + 5 * window_bytes
    assert "byte offset" in str(err.value)


def test_truncated_header(written):
    path = written / io.WINDOWS_FILE
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(ParseError) as err:
        io.load_dataset(written)
    assert err.value.offset == 10


def test_bad_magic(written):
    path = written / io.WINDOWS_FILE
    path.write_bytes(b"NOTMEG\0" + path.read_bytes()[7:])
    with pytest.raises(ParseError) as err:
        list(io.ingest(written))
    assert err.value.offset == 0


def test_trailing_bytes(written):
    path = written / io.WINDOWS_FILE
    size = path.stat().st_size
    path.write_bytes(path.read_bytes() + b"\0\0")
    with pytest.raises(ParseError) as err:
        list(io.ingest(written))
    assert err.value.offset == size


def test_nan_payload(written):
    path = written / io.WINDOWS_FILE
    blob = bytearray(path.read_bytes())
    window_bytes = 6 * 20 * 4
    pos = io.HEADER_SIZE + 3 * window_bytes + 8
    blob[pos : pos + 4] = np.array([np.nan], "<f4").tobytes()
    path.write_bytes(bytes(blob))
    with pytest.raises(ParseError) as err:
        list(io.ingest(written))
    assert err.value.offset == io.HEADER_SIZE + 3 * window_bytes


def test_unknown_symbol(written):
    path = written / io.MANIFEST_FILE
    lines = path.read_text().splitlines()
    parts = lines[3].split(",")
    parts[1] = "qq"
    lines[3] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(VocabularyError):
        list(io.ingest(written))


def test_manifest_count_mismatch(written):
    path = written / io.MANIFEST_FILE
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ParseError):
        list(io.ingest(written))


def test_unsupported_format(written):
    with pytest.raises(ConfigurationError):
        io.ingest(written, format="hdf5")
