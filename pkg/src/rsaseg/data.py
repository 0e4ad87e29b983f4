"""Synthetic lesion phantoms, a checksummed volume format, crops, splits.

Phantoms stand in for clinical scans: an ellipsoidal brain with
per-channel tissue bands and smooth noise, plus a handful of small
hyperintense blobs as lesions.  The lesion voxel fraction is steered to
a target rate so the foreground/background imbalance of real lesion
maps carries over to the synthetic task.
"""

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import (
    BadMagic,
    ChecksumMismatch,
    CropTooLarge,
    InvalidRate,
    InvalidSplit,
    RankMismatch,
    RateUnreachable,
    ShapeUnderflow,
    TruncatedFile,
    UnsupportedVersion,
)

DEFAULT_VOXEL_SIZE = (0.7, 0.7, 3.0)
DEFAULT_DIMS = (64, 64, 32)
DEFAULT_CROP = (32, 32, 16)
DEFAULT_RATE = 5.15e-4
DEFAULT_CHANNELS = 3


@dataclass
class VolumeSample:
    image: T.Tensor  # [C, D, H, W]
    label: T.Tensor  # [D, H, W], values {0, 1}
    voxel_size: tuple = DEFAULT_VOXEL_SIZE
    id: str = ""


def _ellipsoid(dims, center, semi):
    grids = np.ogrid[tuple(slice(0, int(n)) for n in dims)]
    q = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, semi))
    return q <= 1.0


def _lesion_gains(channels):
    # Strongly conspicuous in the last channel, moderately in the one
    # before it, faint elsewhere.
    gains = np.full(channels, 0.12)
    gains[-1] = 1.0
    if channels >= 2:
        gains[-2] = 0.7
    return gains


def generate_phantom(seed, dims=DEFAULT_DIMS, lesion_rate_target=DEFAULT_RATE,
                     channels=DEFAULT_CHANNELS, sample_id=None) -> VolumeSample:
    d, h, w = (int(v) for v in dims)
    if min(d, h, w) < 8:
        raise ShapeUnderflow(f"phantom dims must be at least (8,8,8), got {dims}")
    rate = float(lesion_rate_target)
    if not 0.0 < rate < 0.05:
        raise InvalidRate(f"lesion rate target must lie in (0, 0.05), got {rate}")

    volume = d * h * w
    target = rate * volume
    hi = 2.0 * target
    if hi < 1.0:
        raise RateUnreachable(
            f"a single voxel already exceeds twice the target of {target:.3f} voxels")

    rng = np.random.default_rng(seed)
    dims_arr = np.array([d, h, w], dtype=float)
    center = dims_arr / 2 + rng.uniform(-0.02, 0.02, 3) * dims_arr
    semi = dims_arr * rng.uniform(0.38, 0.44, 3)
    brain = _ellipsoid((d, h, w), center, semi)

    inner_center = center + rng.uniform(-0.08, 0.08, 3) * dims_arr
    inner_semi = dims_arr * rng.uniform(0.12, 0.18, 3)
    inner = _ellipsoid((d, h, w), inner_center, inner_semi) & brain

    # Lesion centers come from a margin-shrunk copy of the brain so whole
    # blobs tend to land inside; strays are rejected below.
    interior = _ellipsoid((d, h, w), center, np.maximum(semi - 3.0, 1.0)) & brain
    candidates = np.argwhere(interior if interior.any() else brain)

    # Blob radii scale with the voxel budget so a volume carries one or
    # two compact lesions rather than a scatter of single-voxel flecks;
    # compact interiors keep the voxel-level evidence unambiguous under
    # downsampling.
    lesion = np.zeros((d, h, w), dtype=bool)
    attempts = 0
    while lesion.sum() < target and attempts < 200:
        attempts += 1
        c = candidates[rng.integers(len(candidates))].astype(float)
        r_eq = (3.0 * target * rng.uniform(0.35, 0.65) / (4.0 * np.pi)) ** (1.0 / 3.0)
        semi_b = np.maximum(r_eq * rng.uniform(0.85, 1.25, 3), 0.8)
        blob = _ellipsoid((d, h, w), c, semi_b)
        if (blob & ~brain).any():
            continue
        if (lesion | blob).sum() > hi:
            continue
        lesion |= blob
    placed = int(lesion.sum())
    if placed < 0.5 * target:
        raise RateUnreachable(
            f"placed {placed} lesion voxels, need at least {0.5 * target:.1f}")

    gains = _lesion_gains(channels)
    img = np.zeros((channels, d, h, w))
    for c in range(channels):
        base = rng.uniform(0.35, 0.55)
        shift = rng.uniform(-0.2, 0.2)
        noise = ndimage.gaussian_filter(rng.normal(size=(d, h, w)), sigma=(1.5, 1.5, 1.0))
        sd = noise.std()
        if sd > 0:
            noise *= 0.04 / sd
        ch = np.full((d, h, w), 0.02)
        ch[brain] = base
        ch[inner] = base + shift
        ch += noise
        ch[lesion] += gains[c]
        img[c] = ch

    return VolumeSample(
        image=T.Tensor(img.astype(np.float32)),
        label=T.Tensor(lesion.astype(np.float32)),
        voxel_size=DEFAULT_VOXEL_SIZE,
        id=sample_id if sample_id is not None else f"phantom-{seed}",
    )


def random_crop(sample, crop_size, rng_seed, require_lesion=False,
                max_retries=20) -> VolumeSample:
    """Axis-aligned subvolume at a seeded uniform offset.

    With require_lesion, offsets are redrawn until the crop holds at
    least one lesion voxel; after max_retries the last draw is kept
    regardless, so fully-empty volumes still crop.
    """
    cd, ch, cw = (int(v) for v in crop_size)
    d, h, w = sample.label.shape
    if cd > d or ch > h or cw > w:
        raise CropTooLarge(f"crop {crop_size} exceeds volume dims {(d, h, w)}")
    rng = np.random.default_rng(rng_seed)
    lbl = sample.label.data
    for _ in range(max_retries + 1):
        od = int(rng.integers(0, d - cd + 1))
        oh = int(rng.integers(0, h - ch + 1))
        ow = int(rng.integers(0, w - cw + 1))
        piece = lbl[od:od + cd, oh:oh + ch, ow:ow + cw]
        if not require_lesion or piece.any():
            break
    return VolumeSample(
        image=T.Tensor(
            sample.image.data[:, od:od + cd, oh:oh + ch, ow:ow + cw].copy()),
        label=T.Tensor(piece.copy()),
        voxel_size=sample.voxel_size,
        id=sample.id,
    )


# Volume file format: magic "RSAV", u32 LE version, u8 element-width code
# (4 = f32, 8 = f64), u8 rank, rank x u64 LE extents, row-major LE
# payload, u32 LE CRC32 of the payload.  Exact length enforced.

_MAGIC = b"RSAV"
_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_volume(path, tensor):
    data = np.asarray(getattr(tensor, "data", tensor))
    if data.dtype == np.float32:
        width = 4
    elif data.dtype == np.float64:
        width = 8
    else:
        raise TypeError(f"only float32/float64 volumes are storable, got {data.dtype}")
    if not 1 <= data.ndim <= 5:
        raise RankMismatch(f"storable ranks are 1..5, got {data.ndim}")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[width]).tobytes()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<BB", width, data.ndim))
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_volume(path) -> T.Tensor:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise TruncatedFile(f"{path}: shorter than the magic")
    if blob[:4] != _MAGIC:
        raise BadMagic(f"{path}: not a volume file")
    if len(blob) < 10:
        raise TruncatedFile(f"{path}: header cut off")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    width, rank = struct.unpack_from("<BB", blob, 8)
    if width not in _DTYPES:
        raise UnsupportedVersion(f"{path}: element width code {width}")
    header_end = 10 + 8 * rank
    if len(blob) < header_end:
        raise TruncatedFile(f"{path}: extents cut off")
    extents = struct.unpack_from(f"<{rank}Q", blob, 10)
    count = int(np.prod(extents, dtype=np.int64)) if rank else 1
    payload_end = header_end + count * width
    if len(blob) < payload_end + 4:
        raise TruncatedFile(f"{path}: payload or checksum cut off")
    if len(blob) > payload_end + 4:
        raise TruncatedFile(f"{path}: trailing bytes after checksum")
    payload = blob[header_end:payload_end]
    (crc,) = struct.unpack_from("<I", blob, payload_end)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumMismatch(f"{path}: payload checksum mismatch")
    arr = np.frombuffer(payload, dtype=_DTYPES[width]).reshape(extents)
    # astype to the native-order scalar type: makes the buffer writable and
    # keeps the stored element width instead of the compute default.
    return T.Tensor(arr.astype(arr.dtype.type))


def split_dataset(ids, n_train, seed):
    ids = list(ids)
    if not 0 < int(n_train) < len(ids):
        raise InvalidSplit(
            f"need 0 < n_train < {len(ids)} so both subsets are non-empty, "
            f"got {n_train}")
    order = np.random.default_rng(seed).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


# Dataset directory: <id>_img.rsav, <id>_lbl.rsav per sample, plus
# manifest.json with ids, dims, voxel_size, and generator parameters.

def write_dataset(out_dir, samples, generator_params):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for s in samples:
        write_volume(out / f"{s.id}_img.rsav", s.image)
        write_volume(out / f"{s.id}_lbl.rsav", s.label)
        ids.append(s.id)
    manifest = {
        "ids": ids,
        "dims": list(samples[0].label.shape) if samples else None,
        "voxel_size": list(samples[0].voxel_size) if samples else None,
        "generator": generator_params,
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids


def generate_dataset(out_dir, n=43, seed=0, dims=DEFAULT_DIMS,
                     lesion_rate_target=DEFAULT_RATE, channels=DEFAULT_CHANNELS):
    sample_seeds = np.random.SeedSequence(seed).generate_state(n)
    samples = [
        generate_phantom(int(s), dims, lesion_rate_target, channels,
                         sample_id=f"p{i:03d}")
        for i, s in enumerate(sample_seeds)
    ]
    return write_dataset(out_dir, samples, {
        "n": n,
        "seed": seed,
        "dims": list(dims),
        "lesion_rate_target": lesion_rate_target,
        "channels": channels,
    })


def read_manifest(data_dir):
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_sample(data_dir, sample_id, voxel_size=DEFAULT_VOXEL_SIZE) -> VolumeSample:
    root = Path(data_dir)
    return VolumeSample(
        image=read_volume(root / f"{sample_id}_img.rsav"),
        label=read_volume(root / f"{sample_id}_lbl.rsav"),
        voxel_size=tuple(voxel_size),
        id=sample_id,
    )


def load_dataset(data_dir, ids=None):
    manifest = read_manifest(data_dir)
    voxel_size = tuple(manifest.get("voxel_size", DEFAULT_VOXEL_SIZE))
    wanted = manifest["ids"] if ids is None else list(ids)
    return [load_sample(data_dir, sid, voxel_size) for sid in wanted]
