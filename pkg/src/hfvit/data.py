"""Raw I420 ingestion, CTU tiling, the synthetic variance-oracle dataset, and
the dataset / weights binary formats."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, DataError, FusedFlagMismatchError, TruncatedRecordError,
                     VersionMismatchError, WeightsFormatError)
from .partition import NUM_BITS, PartitionLabel

CTU = 64
QP_SET = (22, 27, 32, 37)


@dataclass
class CtuSample:
    pixels: np.ndarray  # 64 x 64 x 1 float32 in [0, 1]
    qp: int
    label: PartitionLabel | None = None
    origin: tuple[int, int, int] = (0, 0, 0)  # frame, x, y


def atomic_write(path, payload: bytes | str) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    mode = "w" if isinstance(payload, str) else "wb"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------------------------
# YUV


def frame_bytes(width: int, height: int) -> int:
    return width * height * 3 // 2


def read_yuv_frames(path, width: int, height: int, count: int = 1) -> np.ndarray:
    """Luminance planes of the first ``count`` frames of an 8-bit I420 file."""
    if width % 2 or height % 2:
        raise DataError(f"4:2:0 needs even dimensions, got {width}x{height}")
    if width <= 0 or height <= 0 or count < 1:
        raise DataError("dimensions and frame count must be positive")
    size = frame_bytes(width, height)
    raw = Path(path).read_bytes()
    if len(raw) < count * size:
        raise DataError(f"{path}: {len(raw)} bytes, need {count * size} for {count} frame(s)")
    frames = np.frombuffer(raw, dtype=np.uint8, count=count * size).reshape(count, size)
    return frames[:, :width * height].reshape(count, height, width).copy()


def write_yuv_frames(path, frames: np.ndarray) -> None:
    """Write luminance planes as I420 with neutral (128) chroma."""
    frames = np.asarray(frames, dtype=np.uint8)
    if frames.ndim == 2:
        frames = frames[None]
    _, h, w = frames.shape
    chroma = np.full(h * w // 2, 128, dtype=np.uint8).tobytes()
    atomic_write(path, b"".join(f.tobytes() + chroma for f in frames))


def tile_ctus(frame: np.ndarray, qp: int, frame_index: int = 0) -> list[CtuSample]:
    """Raster-ordered 64x64 tiles; partial edge tiles replicate the last row/column."""
    frame = np.asarray(frame, dtype=np.uint8)
    h, w = frame.shape
    rows, cols = -(-h // CTU), -(-w // CTU)
    padded = np.pad(frame, ((0, rows * CTU - h), (0, cols * CTU - w)), mode="edge")
    samples = []
    for r in range(rows):
        for c in range(cols):
            block = padded[r * CTU:(r + 1) * CTU, c * CTU:(c + 1) * CTU]
            samples.append(CtuSample(normalize(block), qp, None, (frame_index, c * CTU, r * CTU)))
    return samples


def normalize(block: np.ndarray) -> np.ndarray:
    return (np.asarray(block, dtype=np.float32) / np.float32(255.0)).reshape(CTU, CTU, 1)


# ----------------------------------------------------------------------------
# synthetic dataset with a variance oracle

TAU0 = 60.0  # split threshold on 8-bit pixel variance at QP 22


def tau(qp) -> np.ndarray:
    """Split threshold; doubles every 6 QP like the HEVC quantizer step."""
    return TAU0 * 2.0 ** ((np.asarray(qp, dtype=np.float64) - 22) / 6)


def block_variances(pixels: np.ndarray) -> np.ndarray:
    """Population variance of the 64, four 32 and sixteen 16 blocks, label order."""
    p = np.asarray(pixels, dtype=np.float64).reshape(CTU, CTU)
    out = np.empty(NUM_BITS)
    out[0] = p.var()
    for i, (dx, dy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        b32 = p[dy * 32:(dy + 1) * 32, dx * 32:(dx + 1) * 32]
        out[1 + i] = b32.var()
        for j, (ex, ey) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
            out[5 + 4 * i + j] = b32[ey * 16:(ey + 1) * 16, ex * 16:(ex + 1) * 16].var()
    return out


def oracle_label(pixels: np.ndarray, qp: int) -> np.ndarray:
    """Split a block iff its variance exceeds ``tau(qp)``; all 21 bits stored."""
    return (block_variances(pixels) > tau(qp)).astype(np.uint8)


def _label_index_maps() -> np.ndarray:
    """3 x 64 x 64 maps giving, per pixel, the label index of its block at each level."""
    maps = np.zeros((3, CTU, CTU), dtype=np.int64)
    for i, (dx, dy) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
        maps[1, dy * 32:(dy + 1) * 32, dx * 32:(dx + 1) * 32] = 1 + i
        for j, (ex, ey) in enumerate(((0, 0), (1, 0), (0, 1), (1, 1))):
            y0, x0 = dy * 32 + ey * 16, dx * 32 + ex * 16
            maps[2, y0:y0 + 16, x0:x0 + 16] = 5 + 4 * i + j
    return maps


def _dihedral_image(img: np.ndarray, k: int) -> np.ndarray:
    out = np.rot90(img, k % 4, axes=(-2, -1))
    return out[..., ::-1] if k >= 4 else out


def _dihedral_permutations() -> np.ndarray:
    """perm[k][p] is the source label index that lands on position p under transform k."""
    maps = _label_index_maps()
    corners = [(0, 0)] + [(dy * 32, dx * 32) for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1))] + [
        (dy * 32 + ey * 16, dx * 32 + ex * 16)
        for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)) for ex, ey in ((0, 0), (1, 0), (0, 1), (1, 1))]
    levels = [0] + [1] * 4 + [2] * 16
    perms = np.empty((8, NUM_BITS), dtype=np.int64)
    for k in range(8):
        moved = _dihedral_image(maps, k)
        perms[k] = [moved[lvl, y, x] for lvl, (y, x) in zip(levels, corners)]
    return perms


DIHEDRAL_PERMS = _dihedral_permutations()


def dihedral(pixels: np.ndarray, labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rotate by ``k % 4`` quarter turns (then mirror if ``k >= 4``) a CTU and its label.

    Block variances are invariant under these maps, so oracle labels stay exact.
    """
    if not 0 <= k < 8:
        raise ValueError("k must lie in 0..7")
    return np.ascontiguousarray(_dihedral_image(pixels, k)), labels[..., DIHEDRAL_PERMS[k]]


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One zero-mean texture patch of the given size."""
    kind = rng.choice(["flat", "noise", "checker", "gradient"], p=[0.3, 0.35, 0.2, 0.15])
    if kind == "flat":
        return rng.normal(0.0, 0.6, size=(size, size))
    amp = float(np.exp(rng.uniform(np.log(3.0), np.log(45.0))))
    if kind == "noise":
        return rng.normal(0.0, amp, size=(size, size))
    if kind == "checker":
        cell = int(rng.choice([1, 2, 4]))
        idx = np.arange(size) // cell
        return amp * (2.0 * ((idx[:, None] + idx[None, :]) % 2) - 1.0)
    ramp = np.linspace(-1.0, 1.0, size)
    gx, gy = rng.uniform(-1, 1, size=2)
    return amp * 1.7 * (gx * ramp[None, :] + gy * ramp[:, None])


def synthetic_ctu(rng: np.random.Generator) -> np.ndarray:
    """Procedural 64x64 luminance block built from per-region textures."""
    base = rng.uniform(50, 200)
    img = np.full((CTU, CTU), base)
    style = rng.choice(["flat", "uniform", "quadrants"], p=[0.1, 0.15, 0.75])
    if style == "flat":
        img += rng.normal(0.0, 0.6, size=img.shape)
    elif style == "uniform":
        img += _texture(rng, CTU)
    else:
        for dy in range(2):
            for dx in range(2):
                q = img[dy * 32:(dy + 1) * 32, dx * 32:(dx + 1) * 32]
                q += rng.normal(0.0, 12.0)
                if rng.random() < 0.35:
                    q += _texture(rng, 32)
                    continue
                for ey in range(2):
                    for ex in range(2):
                        q[ey * 16:(ey + 1) * 16, ex * 16:(ex + 1) * 16] += _texture(rng, 16)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


@dataclass
class Dataset:
    pixels: np.ndarray  # N x 64 x 64 uint8
    qp: np.ndarray      # N int
    labels: np.ndarray  # N x 21 uint8

    def __len__(self) -> int:
        return len(self.qp)

    def inputs(self, idx=slice(None), dtype=np.float32) -> np.ndarray:
        return (self.pixels[idx].astype(dtype) / dtype(255.0))[..., None]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.pixels[idx], self.qp[idx], self.labels[idx])

    def samples(self) -> list[CtuSample]:
        return [CtuSample(normalize(p), int(q), PartitionLabel.from_array(lab), (i, 0, 0))
                for i, (p, q, lab) in enumerate(zip(self.pixels, self.qp, self.labels))]


def generate_synthetic_dataset(n: int, seed: int = 0, qps=QP_SET) -> Dataset:
    """``n`` oracle-labelled CTUs; sample ``i`` depends only on ``(seed, i)``."""
    qps = tuple(int(q) for q in qps)
    pixels = np.empty((n, CTU, CTU), dtype=np.uint8)
    qp = np.empty(n, dtype=np.int64)
    labels = np.empty((n, NUM_BITS), dtype=np.uint8)
    for i in range(n):
        rng = sample_rng(seed, i)
        qp[i] = qps[int(rng.integers(len(qps)))]
        pixels[i] = synthetic_ctu(rng)
        labels[i] = oracle_label(pixels[i], qp[i])
    return Dataset(pixels, qp, labels)


# dataset record: 4096 bytes Y, 1 byte QP, 3 bytes label (y0 = MSB of byte 0), 1 reserved
RECORD_BYTES = CTU * CTU + 1 + 3 + 1


def encode_dataset(ds: Dataset) -> bytes:
    n = len(ds)
    rec = np.zeros((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, :CTU * CTU] = ds.pixels.reshape(n, -1)
    rec[:, CTU * CTU] = ds.qp
    rec[:, CTU * CTU + 1:CTU * CTU + 4] = np.packbits(ds.labels, axis=1)
    return rec.tobytes()


def save_dataset(ds: Dataset, path) -> None:
    atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    pixels = rec[:, :CTU * CTU].reshape(-1, CTU, CTU).copy()
    qp = rec[:, CTU * CTU].astype(np.int64)
    if np.any(qp > 51):
        raise DataError("dataset contains QP > 51")
    labels = np.unpackbits(rec[:, CTU * CTU + 1:CTU * CTU + 4], axis=1)[:, :NUM_BITS].copy()
    return Dataset(pixels, qp, labels)


# ----------------------------------------------------------------------------
# weights file

WEIGHTS_MAGIC = b"HFVT"
STATE_MAGIC = b"HFVS"
FORMAT_VERSION = 1


def encode_records(magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    """``magic | u32 version | u32 len | JSON header | u32 count | records``.

    Each record: ``u16 name_len | name | u8 rank | u32 dims... | f32 LE data``.
    """
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<II", FORMAT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_records(raw: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if raw[:4] != magic:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {magic!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedRecordError(f"file ends at byte {len(raw)}, needed {pos + n}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    version, hlen = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"unreadable header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise TruncatedRecordError(f"{len(raw) - pos} trailing bytes after last record")
    return header, tensors


def save_weights(model, path) -> None:
    tensors = {name: t.data for name, t in model.named_tensors()}
    atomic_write(path, encode_records(WEIGHTS_MAGIC, {"config": model.config.to_dict()}, tensors))


def load_weights(path, expect_fused: bool | None = None):
    """Rebuild a model from a weights file.

    ``expect_fused`` makes the caller's pipeline explicit: a mismatch with the
    file's fused flag raises :class:`FusedFlagMismatchError`.
    """
    from .model import HfvitConfig, HfvitModel

    header, tensors = decode_records(Path(path).read_bytes(), WEIGHTS_MAGIC)
    config = HfvitConfig.from_dict(header["config"])
    if expect_fused is not None and config.fused != expect_fused:
        raise FusedFlagMismatchError(
            f"weights are {'fused' if config.fused else 'unfused'}, pipeline expects "
            f"{'fused' if expect_fused else 'unfused'}")
    model = HfvitModel(config)
    own = dict(model.named_tensors())
    if set(own) != set(tensors):
        missing, extra = sorted(set(own) - set(tensors)), sorted(set(tensors) - set(own))
        raise DataError(f"tensor names differ from config: missing {missing}, unexpected {extra}")
    for name, t in own.items():
        if t.shape != tensors[name].shape:
            raise DataError(f"{name}: stored shape {tensors[name].shape}, expected {t.shape}")
        t.data = tensors[name].copy()
    return model
