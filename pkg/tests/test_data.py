"""Phantom generation, cropping, the volume file format, and splits."""

import json
import zlib
from pathlib import Path

import numpy as np
import pytest

import rsaseg.data as D
import rsaseg.tensor as T
from rsaseg.errors import (
    BadMagic,
    ChecksumMismatch,
    CropTooLarge,
    InvalidRate,
    InvalidSplit,
    RateUnreachable,
    ShapeUnderflow,
    TruncatedFile,
    UnsupportedVersion,
)

DIMS = (24, 24, 16)
RATE = 2e-3


@pytest.fixture(scope="module")
def phantom():
    return D.generate_phantom(7, dims=DIMS, lesion_rate_target=RATE,
                              channels=3, sample_id="p")


def test_phantom_shapes_and_types(phantom):
    assert phantom.image.shape == (3,) + DIMS
    assert phantom.label.shape == DIMS
    assert phantom.image.data.dtype == np.float32
    assert set(np.unique(phantom.label.data)) <= {0.0, 1.0}


def test_phantom_is_deterministic():
    a = D.generate_phantom(11, dims=DIMS, lesion_rate_target=RATE)
    b = D.generate_phantom(11, dims=DIMS, lesion_rate_target=RATE)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.label.data, b.label.data)
    c = D.generate_phantom(12, dims=DIMS, lesion_rate_target=RATE)
    assert not np.array_equal(a.image.data, c.image.data)


def test_phantom_lesion_fraction_in_band():
    fractions = [
        D.generate_phantom(s, dims=(48, 48, 24), lesion_rate_target=5.15e-4)
        .label.data.mean()
        for s in range(6)
    ]
    for f in fractions:
        assert 0.5 * 5.15e-4 <= f <= 2.0 * 5.15e-4


def test_phantom_lesions_are_conspicuous(phantom):
    # the last channel carries the strongest lesion signal by design
    lbl = phantom.label.data.astype(bool)
    flair = phantom.image.data[-1]
    assert flair[lbl].mean() > flair[~lbl].mean() + 0.3


def test_phantom_rejects_bad_arguments():
    with pytest.raises(ShapeUnderflow):
        D.generate_phantom(0, dims=(4, 64, 64))
    with pytest.raises(InvalidRate):
        D.generate_phantom(0, dims=DIMS, lesion_rate_target=0.0)
    with pytest.raises(RateUnreachable):
        D.generate_phantom(0, dims=(8, 8, 8), lesion_rate_target=5.15e-4)


def test_random_crop_is_seeded_and_bounded(phantom):
    a = D.random_crop(phantom, (8, 8, 8), rng_seed=3)
    b = D.random_crop(phantom, (8, 8, 8), rng_seed=3)
    assert np.array_equal(a.image.data, b.image.data)
    assert a.image.shape == (3, 8, 8, 8) and a.label.shape == (8, 8, 8)
    with pytest.raises(CropTooLarge):
        D.random_crop(phantom, (8, 8, 32), rng_seed=0)


def test_label_aware_crop_hits_lesions_more_often(phantom):
    plain = [D.random_crop(phantom, (8, 8, 8), rng_seed=s).label.data.any()
             for s in range(40)]
    aware = [D.random_crop(phantom, (8, 8, 8), rng_seed=s,
                           require_lesion=True).label.data.any()
             for s in range(40)]
    assert sum(aware) >= sum(plain)
    assert sum(aware) >= 35   # retries should nearly always land one


# ------------------------------------------------------------ file format

def test_volume_roundtrip_f32(tmp_path, phantom):
    path = tmp_path / "v.rsav"
    D.write_volume(path, phantom.image)
    back = D.read_volume(path)
    assert back.data.dtype == np.float32
    assert np.array_equal(back.data, phantom.image.data)


def test_volume_roundtrip_f64(tmp_path):
    path = tmp_path / "v64.rsav"
    data = np.linspace(0, 1, 24).reshape(2, 3, 4)
    D.write_volume(path, T.Tensor(data.astype(np.float64)))
    back = D.read_volume(path)
    assert back.data.dtype == np.float64
    assert np.array_equal(back.data, data)


def test_volume_header_layout(tmp_path):
    path = tmp_path / "h.rsav"
    D.write_volume(path, T.Tensor(np.zeros((2, 3), dtype=np.float32)))
    raw = path.read_bytes()
    assert raw[:4] == b"RSAV"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8] == 4 and raw[9] == 2
    assert int.from_bytes(raw[10:18], "little") == 2
    assert int.from_bytes(raw[18:26], "little") == 3
    payload = raw[26:-4]
    assert len(payload) == 24
    assert int.from_bytes(raw[-4:], "little") == zlib.crc32(payload)


def _written(tmp_path):
    path = tmp_path / "x.rsav"
    D.write_volume(path, T.Tensor(np.arange(8, dtype=np.float32)))
    return path


def test_bad_magic(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagic):
        D.read_volume(path)


def test_unsupported_version_and_width(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        D.read_volume(path)
    raw[4] = 1
    raw[8] = 2   # element width nobody writes
    path.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersion):
        D.read_volume(path)


def test_truncated_and_padded_files(tmp_path):
    path = _written(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile):
        D.read_volume(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(TruncatedFile):
        D.read_volume(path)


def test_checksum_mismatch(tmp_path):
    path = _written(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[-8] ^= 0xFF   # payload byte, checksum left stale
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        D.read_volume(path)


# ------------------------------------------------------------------ splits

def test_split_is_seeded_sorted_partition():
    ids = [f"p{i:03d}" for i in range(43)]
    train, test = D.split_dataset(ids, 20, seed=0)
    assert len(train) == 20 and len(test) == 23
    assert sorted(train + test) == ids
    assert train == sorted(train) and test == sorted(test)
    assert (train, test) == D.split_dataset(ids, 20, seed=0)
    assert train != D.split_dataset(ids, 20, seed=1)[0]


def test_split_seeds_differ():
    ids = [f"p{i:03d}" for i in range(43)]
    assert len({tuple(D.split_dataset(ids, 20, seed=s)[0]) for s in range(5)}) == 5


def test_split_rejects_degenerate_sizes():
    ids = ["a", "b", "c"]
    for n in (0, 3, 5):
        with pytest.raises(InvalidSplit):
            D.split_dataset(ids, n, seed=0)


# ----------------------------------------------------------------- dataset

def test_dataset_write_load_roundtrip(tmp_path):
    ids = D.generate_dataset(tmp_path / "ds", n=3, seed=5, dims=(16, 16, 16),
                             lesion_rate_target=5e-3, channels=2)
    assert ids == ["p000", "p001", "p002"]
    manifest = D.read_manifest(tmp_path / "ds")
    assert manifest["ids"] == ids
    assert manifest["generator"]["seed"] == 5
    samples = D.load_dataset(tmp_path / "ds")
    assert [s.id for s in samples] == ids
    assert samples[0].image.shape == (2, 16, 16, 16)
    # regeneration with the same seed is bitwise identical on disk
    D.generate_dataset(tmp_path / "ds2", n=3, seed=5, dims=(16, 16, 16),
                       lesion_rate_target=5e-3, channels=2)
    for sid in ids:
        a = (tmp_path / "ds" / f"{sid}_img.rsav").read_bytes()
        b = (tmp_path / "ds2" / f"{sid}_img.rsav").read_bytes()
        assert a == b


def test_load_dataset_subset(tmp_path):
    D.generate_dataset(tmp_path / "ds", n=3, seed=1, dims=(16, 16, 16),
                       lesion_rate_target=5e-3, channels=1)
    subset = D.load_dataset(tmp_path / "ds", ["p002", "p000"])
    assert [s.id for s in subset] == ["p002", "p000"]
