"""Ingestion of binary datasets: IDX image files and region-presence records.

Images go through 2x mean downscaling and per-pixel mean binarization;
presence records go through a frequency-dependent thinning step. Both end in
a seeded three-way split and can be serialized to a byte-stable container.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from ._util import STREAM_FILTER, STREAM_SPLIT, tagged_rng

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801
_CONTAINER_MAGIC = b"WRBMDS01"

# Ordered region codes for presence records: Canadian and US jurisdictions
# plus Greenland (gl, dengl) and St. Pierre & Miquelon (fraspm).
REGION_CODES = (
    "ab ak al ar az bc ca co ct dc de dengl fl fraspm ga gl hi ia id il in "
    "ks ky la lb ma mb md me mi mn mo ms mt nb nc nd ne nf nh nj nm ns nt "
    "nu nv ny oh ok on or pa pe pr qc ri sc sd sk tn tx ut va vi vt wa wi "
    "wv wy yt"
).split()
PLANT_DIM = len(REGION_CODES)
_CODE_INDEX = {code: i for i, code in enumerate(REGION_CODES)}


class IdxError(ValueError):
    """Malformed IDX stream; message names the offending byte offset."""


@dataclass(frozen=True)
class BinaryDataset:
    """Bit matrix with a per-row split assignment (0 train, 1 valid, 2 test)."""

    rows: np.ndarray
    split_of: np.ndarray
    source: str
    seed: int

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.uint8)
        split_of = np.asarray(self.split_of, dtype=np.uint8)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "split_of", split_of)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D bit matrix")
        if ((rows != 0) & (rows != 1)).any():
            raise ValueError("rows must contain only 0/1")
        if split_of.shape != (rows.shape[0],):
            raise ValueError("split_of must assign every row")
        if split_of.size and split_of.max() > 2:
            raise ValueError("split codes are 0 (train), 1 (valid), 2 (test)")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]

    def split(self, which: str) -> np.ndarray:
        code = {"train": 0, "valid": 1, "test": 2}[which]
        return self.rows[self.split_of == code]

    def occurrence_means(self, which: str = "train") -> np.ndarray:
        """Fraction of 1-bits per column within a split."""
        part = self.split(which)
        if part.shape[0] == 0:
            raise ValueError(f"split {which!r} is empty")
        return part.mean(axis=0)


def _read_exact(data: bytes, offset: int, n: int, what: str) -> bytes:
    if offset + n > len(data):
        raise IdxError(
            f"truncated stream: needed {n} bytes for {what} at byte {offset}, "
            f"have {len(data) - offset}")
    return data[offset:offset + n]


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte 3-D IDX stream into a (count, rows, cols) array.

    Gzip-compressed input is accepted and inflated first. Errors locate the
    problem by byte offset within the inflated stream.
    """
    data = _maybe_gunzip(bytes(data))
    magic = struct.unpack(">I", _read_exact(data, 0, 4, "magic"))[0]
    if magic != _IDX_IMAGES_MAGIC:
        raise IdxError(
            f"bad magic 0x{magic:08x} at byte 0, expected 0x{_IDX_IMAGES_MAGIC:08x}")
    dims = struct.unpack(">III", _read_exact(data, 4, 12, "dimension sizes"))
    count, height, width = dims
    payload = count * height * width
    if payload > len(data) - 16:
        raise IdxError(
            f"declared payload {payload} bytes exceeds stream at byte 16 "
            f"(have {len(data) - 16})")
    if len(data) - 16 != payload:
        raise IdxError(
            f"{len(data) - 16 - payload} trailing bytes after payload at "
            f"byte {16 + payload}")
    flat = np.frombuffer(data, dtype=np.uint8, count=payload, offset=16)
    return flat.reshape(count, height, width).copy()


def parse_idx_labels(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte 1-D IDX stream into a (count,) label array."""
    data = _maybe_gunzip(bytes(data))
    magic = struct.unpack(">I", _read_exact(data, 0, 4, "magic"))[0]
    if magic != _IDX_LABELS_MAGIC:
        raise IdxError(
            f"bad magic 0x{magic:08x} at byte 0, expected 0x{_IDX_LABELS_MAGIC:08x}")
    count = struct.unpack(">I", _read_exact(data, 4, 4, "count"))[0]
    body = _read_exact(data, 8, count, "labels")
    if len(data) != 8 + count:
        raise IdxError(f"{len(data) - 8 - count} trailing bytes at byte {8 + count}")
    return np.frombuffer(body, dtype=np.uint8).copy()


def downscale_2x(images: np.ndarray) -> np.ndarray:
    """Halve both image dimensions by averaging 2x2 blocks, rounding half-up.

    Works on one (H, W) image or a stack (n, H, W).
    """
    images = np.asarray(images)
    single = images.ndim == 2
    imgs = images[None] if single else images
    n, height, width = imgs.shape
    if height % 2 or width % 2:
        raise ValueError(f"dimensions must be even, got {height}x{width}")
    blocks = imgs.reshape(n, height // 2, 2, width // 2, 2).astype(np.uint32)
    sums = blocks.sum(axis=(2, 4))
    out = ((sums + 2) // 4).astype(np.uint8)
    return out[0] if single else out


def binarize_per_pixel_mean(images: np.ndarray) -> np.ndarray:
    """Threshold every pixel against that pixel's mean across the whole set.

    Strict comparison: a pixel equal to its mean maps to 0, so a single image
    (or any constant column) binarizes to zeros.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim < 2 or images.shape[0] == 0:
        raise ValueError("need a non-empty stack of images")
    thresholds = images.mean(axis=0)
    return (images > thresholds).astype(np.uint8)


def parse_plants(text: str) -> list[tuple[str, np.ndarray]]:
    """One species per line: name, then region codes where it occurs.

    Returns (name, presence bit-vector over REGION_CODES) pairs in file order.
    """
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        name, codes = tokens[0], tokens[1:]
        bits = np.zeros(PLANT_DIM, dtype=np.uint8)
        for code in codes:
            idx = _CODE_INDEX.get(code)
            if idx is None:
                raise ValueError(f"unknown region code {code!r} on line {lineno}")
            bits[idx] = 1
        records.append((name, bits))
    return records


def plant_keep_probability(nu: float) -> float:
    """Retention probability e^{-(3(nu - 1/2))^6} for occurrence frequency nu."""
    return float(np.exp(-((3.0 * (nu - 0.5)) ** 6)))


def filter_plants(records: list[tuple[str, np.ndarray]], seed: int) -> np.ndarray:
    """Thin records so mid-frequency species dominate; order is preserved.

    Each record is kept independently with plant_keep_probability(nu), nu
    being the fraction of regions where the species is present. One uniform
    draw is consumed per record regardless of outcome.
    """
    rng = tagged_rng(seed, STREAM_FILTER)
    kept = []
    for _, bits in records:
        bits = np.asarray(bits, dtype=np.uint8)
        if bits.shape != (PLANT_DIM,):
            raise ValueError(f"presence vector must have width {PLANT_DIM}, "
                             f"got {bits.shape}")
        nu = bits.mean()
        if rng.random() < plant_keep_probability(nu):
            kept.append(bits)
    if kept:
        return np.stack(kept)
    return np.zeros((0, PLANT_DIM), dtype=np.uint8)


def split_three_way(rows: np.ndarray, seed: int, source: str = "") -> BinaryDataset:
    """Shuffle once with the seed, then deal contiguous near-equal thirds."""
    rows = np.asarray(rows, dtype=np.uint8)
    n = rows.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    rng = tagged_rng(seed, STREAM_SPLIT)
    order = rng.permutation(n)
    base, rem = divmod(n, 3)
    sizes = [base + (1 if i < rem else 0) for i in range(3)]
    split_of = np.empty(n, dtype=np.uint8)
    start = 0
    for code, size in enumerate(sizes):
        split_of[order[start:start + size]] = code
        start += size
    return BinaryDataset(rows=rows, split_of=split_of, source=source, seed=seed)


def ingest_mnist_zero(image_bytes: bytes, label_bytes: bytes,
                      seed: int) -> tuple[BinaryDataset, dict]:
    """Digit-zero pipeline: select class 0, downscale 28x28 to 14x14,
    binarize against per-pixel means of the selected set, split three ways.
    Returns the dataset and an ingestion report (counts and thresholds)."""
    images = parse_idx(image_bytes)
    labels = parse_idx_labels(label_bytes)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    zeros = images[labels == 0]
    if zeros.shape[0] < 3:
        raise ValueError("fewer than 3 images of class 0")
    small = downscale_2x(zeros)
    flat = small.reshape(small.shape[0], -1)
    bits = binarize_per_pixel_mean(flat)
    ds = split_three_way(bits, seed, source="mnist0 14x14 mean-binarized")
    report = {
        "images_total": int(images.shape[0]),
        "class0_count": int(zeros.shape[0]),
        "dim": int(bits.shape[1]),
        "thresholds": [float(t) for t in flat.mean(axis=0)],
    }
    return ds, report


def ingest_plants(text: str, seed: int) -> tuple[BinaryDataset, dict]:
    """Presence-record pipeline: parse, frequency-filter, split three ways."""
    records = parse_plants(text)
    kept = filter_plants(records, seed)
    ds = split_three_way(kept, seed, source="plants frequency-filtered")
    report = {
        "records_total": len(records),
        "kept_count": int(kept.shape[0]),
        "dim": PLANT_DIM,
    }
    return ds, report


def save_dataset(ds: BinaryDataset, path) -> None:
    """Container layout: magic, d, N, seed, source, split codes, packed rows."""
    source = ds.source.encode("utf-8")
    packed = np.packbits(ds.rows, axis=1)
    with open(path, "wb") as fh:
        fh.write(_CONTAINER_MAGIC)
        fh.write(struct.pack("<IIqI", ds.dim, len(ds), ds.seed, len(source)))
        fh.write(source)
        fh.write(ds.split_of.tobytes())
        fh.write(packed.tobytes())


def load_dataset(path) -> BinaryDataset:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _CONTAINER_MAGIC:
            raise ValueError(f"not a dataset container (bad magic {magic!r})")
        d, n, seed, source_len = struct.unpack("<IIqI", fh.read(20))
        source = fh.read(source_len).decode("utf-8")
        split_of = np.frombuffer(fh.read(n), dtype=np.uint8).copy()
        row_bytes = (d + 7) // 8
        packed = np.frombuffer(fh.read(n * row_bytes), dtype=np.uint8)
        rows = np.unpackbits(packed.reshape(n, row_bytes), axis=1)[:, :d]
    return BinaryDataset(rows=rows, split_of=split_of, source=source, seed=seed)


def export_csv(ds: BinaryDataset, path) -> None:
    """Lossless text view: one row per example, split name plus bit string."""
    names = ("train", "valid", "test")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# source={ds.source} d={ds.dim} n={len(ds)} seed={ds.seed}\n")
        fh.write("split,bits\n")
        for code, row in zip(ds.split_of, ds.rows):
            fh.write(f"{names[code]},{''.join('1' if b else '0' for b in row)}\n")
