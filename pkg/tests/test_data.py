import gzip
import struct

import numpy as np
import pytest

from regmix import data
from regmix.data import BatchPlan, DataFormatError


def _write(path, payload):
    path.write_bytes(payload)
    return path


@pytest.fixture
def idx_pair(tmp_path):
    imgs = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes([0, 255, 128, 64, 1, 2, 3, 4])
    labs = struct.pack(">II", 0x801, 2) + bytes([3, 7])
    return _write(tmp_path / "img.idx", imgs), _write(tmp_path / "lab.idx", labs)


def test_read_idx_exact_values(idx_pair):
    ds = data.read_idx(*idx_pair)
    assert ds.x.shape == (2, 1, 2, 2)
    assert ds.x[0, 0, 0, 1] == 1.0 and ds.x[0, 0, 0, 0] == 0.0
    assert ds.x[0, 0, 1, 0] == 128 / 255
    assert list(ds.y) == [3, 7] and ds.classes == 8


def test_read_idx_gzip(tmp_path, idx_pair):
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(idx_pair[0].read_bytes()))
    assert np.array_equal(data.read_idx(gz, idx_pair[1]).x, data.read_idx(*idx_pair).x)


def test_read_idx_bad_magic(tmp_path, idx_pair):
    bad = _write(tmp_path / "bad.idx", struct.pack(">IIII", 0x804, 1, 1, 1) + b"\x00")
    with pytest.raises(DataFormatError, match="0x00000804"):
        data.read_idx(bad, idx_pair[1])


def test_read_idx_truncated(tmp_path, idx_pair):
    short = _write(tmp_path / "short.idx", idx_pair[0].read_bytes()[:-3])
    with pytest.raises(DataFormatError, match="expected 8 bytes, got 5"):
        data.read_idx(short, idx_pair[1])


def test_read_idx_count_mismatch(tmp_path, idx_pair):
    labs = _write(tmp_path / "l3.idx", struct.pack(">II", 0x801, 3) + bytes([1, 2, 3]))
    with pytest.raises(DataFormatError, match="mismatch"):
        data.read_idx(idx_pair[0], labs)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 256, size=(5, 1, 3, 4)) / 255.0
    ds = data.Dataset(x, rng.integers(0, 10, 5), 10)
    data.write_idx(tmp_path / "i", tmp_path / "l", ds)
    back = data.read_idx(tmp_path / "i", tmp_path / "l", classes=10)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)


def test_cifar_single_record(tmp_path):
    rec = bytes([7, 128]) + bytes(3071)
    ds = data.read_cifar_binary(_write(tmp_path / "c.bin", rec))
    assert ds.x.shape == (1, 3, 32, 32)
    assert ds.y[0] == 7 and ds.x[0, 0, 0, 0] == 128 / 255


def test_cifar_empty_and_bad_sizes(tmp_path):
    assert len(data.read_cifar_binary(_write(tmp_path / "e.bin", b""))) == 0
    with pytest.raises(DataFormatError, match="3073"):
        data.read_cifar_binary(_write(tmp_path / "s.bin", bytes(3072)))
    with pytest.raises(DataFormatError, match="label byte 10"):
        data.read_cifar_binary(_write(tmp_path / "l.bin", bytes([10]) + bytes(3072)))


def test_cifar_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    ds = data.Dataset(rng.integers(0, 256, (3, 3, 32, 32)) / 255.0, [0, 9, 4], 10)
    data.write_cifar_binary(tmp_path / "r.bin", ds)
    back = data.read_cifar_binary(tmp_path / "r.bin")
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)


def test_synth_blobs_contract():
    a = data.synth_blobs(103, 4, 5, 3.0, 0)
    b = data.synth_blobs(103, 4, 5, 3.0, 0)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert a.x.min() >= 0 and a.x.max() <= 1
    counts = np.bincount(a.y, minlength=4)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(ValueError):
        data.synth_blobs(10, 1, 2, 1.0, 0)


def test_synth_blobs_weak_features():
    ds = data.synth_blobs(200, 3, 30, 3.0, 0, robust_dims=2, weak_separation=0.3)
    assert ds.input_shape == (30,)


def test_train_test_split_disjoint():
    ds = data.synth_blobs(100, 2, 3, 2.0, 0)
    tr, te = data.train_test_split(ds, 30, 0)
    assert len(tr) == 70 and len(te) == 30
    rows = {r.tobytes() for r in tr.x}
    assert not any(r.tobytes() in rows for r in te.x)
    assert np.array_equal(tr.indices, np.arange(70))


def test_batches_contract():
    ds = data.synth_blobs(10, 2, 3, 2.0, 0)
    got = list(data.batches(ds, BatchPlan(4, seed=1, epoch=0)))
    assert [len(i) for i, _, _ in got] == [4, 4, 2]
    assert sorted(np.concatenate([i for i, _, _ in got])) == list(range(10))
    again = [i for i, _, _ in data.batches(ds, BatchPlan(4, seed=1, epoch=0))]
    nxt = [i for i, _, _ in data.batches(ds, BatchPlan(4, seed=1, epoch=1))]
    assert all(np.array_equal(a, b) for a, (b, _, _) in zip(again, got))
    assert not all(np.array_equal(a, b) for a, b in zip(again, nxt))
    i, x, y = got[0]
    assert np.array_equal(x, ds.x[i]) and np.array_equal(y, ds.y[i])
    with pytest.raises(ValueError):
        list(data.batches(ds, BatchPlan(0)))


def test_dataset_validation():
    with pytest.raises(DataFormatError):
        data.Dataset(np.array([[1.5]]), [0], 2)
    with pytest.raises(DataFormatError):
        data.Dataset(np.array([[0.5]]), [2], 2)
