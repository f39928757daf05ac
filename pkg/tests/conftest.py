"""Shared fixtures: random measures, synthetic corpora, and raw-file builders.

Real raw corpora are used when present (see data_paths); otherwise the
synthetic substitutes below stand in so the whole suite runs offline.
"""

import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

from wrbm.ot_sinkhorn import EmpiricalMeasure

# One line per acceptance criterion, echoed after the run summary so the
# verdicts survive pytest's output capture.
ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------------------
# measure and model helpers


def distinct_rows(rng, count, dim):
    """count distinct random bit rows (dim must leave enough headroom)."""
    seen = {}
    while len(seen) < count:
        row = rng.integers(0, 2, size=dim).astype(np.uint8)
        seen.setdefault(row.tobytes(), row)
    return np.stack(list(seen.values())[:count])


def random_measure(rng, count, dim, weights="random"):
    rows = distinct_rows(rng, count, dim)
    if weights == "uniform":
        w = None
    else:
        w = rng.random(count) + 0.1
    return EmpiricalMeasure.from_rows(rows, weights=w)


def random_params(rng, d, h, scale=0.5, offsets=True):
    from wrbm.rbm import RbmParams
    return RbmParams(
        a=rng.normal(size=d) * scale,
        W=rng.normal(size=(h, d)) * scale,
        b=rng.normal(size=h) * scale,
        mu=rng.random(d) if offsets else np.zeros(d),
        nu=rng.random(h) if offsets else np.zeros(h),
    )


# ---------------------------------------------------------------------------
# synthetic corpora


def two_prototype_rows(seed, n=600, d=16, flip=0.15):
    """Noisy sample of two complementary half-on prototypes."""
    rng = np.random.default_rng([seed, 77])
    protos = np.zeros((2, d), dtype=np.uint8)
    protos[0, : d // 2] = 1
    protos[1, d // 2:] = 1
    rows = protos[rng.integers(0, 2, n)]
    return (rows ^ (rng.random(rows.shape) < flip)).astype(np.uint8)


def ring_images(n, seed):
    """Digit-zero stand-in: noisy ellipse rings rendered at 28x28, varying in
    center, radii, tilt, and stroke width."""
    rng = np.random.default_rng([seed, 901])
    yy, xx = np.mgrid[0:28, 0:28].astype(np.float64)
    imgs = np.zeros((n, 28, 28), dtype=np.uint8)
    for i in range(n):
        cy, cx = 13.5 + rng.normal(0, 1.0), 13.5 + rng.normal(0, 1.0)
        ry = max(8.0 + rng.normal(0, 1.2), 5.0)
        rx = max(5.8 + rng.normal(0, 1.0), 3.5)
        tilt = rng.normal(0, 0.15)
        y, x = yy - cy, xx - cx
        r = np.sqrt((y / ry) ** 2 + ((x + tilt * y) / rx) ** 2)
        width = max(2.0 + rng.normal(0, 0.35), 1.2)
        band = np.exp(-((r - 1.0) ** 2) / (2 * (width / 9.0) ** 2))
        img = 255.0 * band + rng.normal(0, 8.0, size=(28, 28))
        imgs[i] = np.clip(img, 0, 255).astype(np.uint8)
    return imgs


# Label counts of the canonical 60000-image training corpus, digit 0 first.
MNIST_TRAIN_LABEL_COUNTS = (5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949)


def plants_text(n=40, seed=13):
    """Synthetic species records covering enough regions to survive the
    rarity filter."""
    from wrbm.dataset import REGION_CODES
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n):
        count = int(rng.integers(25, 55))
        codes = rng.choice(REGION_CODES, size=count, replace=False)
        lines.append(f"species{i:03d} " + " ".join(sorted(codes)))
    return "\n".join(lines) + "\n"


def build_idx_images(images: np.ndarray) -> bytes:
    n = images.shape[0]
    h, w = (images.shape[1], images.shape[2]) if n else (28, 28)
    return struct.pack(">IIII", 0x00000803, n, h, w) + images.tobytes()


def build_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x00000801, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def synthetic_mnist_files(seed=0):
    """A full-size surrogate corpus: ring images labeled 0 in the canonical
    count (5923 of 60000), cheap noise images for the other labels. Label
    order is a fixed shuffle so class-0 rows are dispersed as in the real
    file."""
    rng = np.random.default_rng([seed, 902])
    labels = np.repeat(np.arange(10, dtype=np.uint8), MNIST_TRAIN_LABEL_COUNTS)
    rng.shuffle(labels)
    images = np.zeros((labels.shape[0], 28, 28), dtype=np.uint8)
    zero_pos = np.flatnonzero(labels == 0)
    images[zero_pos] = ring_images(zero_pos.shape[0], seed)
    other_pos = np.flatnonzero(labels != 0)
    images[other_pos] = rng.integers(0, 256, size=(other_pos.shape[0], 28, 28),
                                     dtype=np.uint8)
    return build_idx_images(images), build_idx_labels(labels)


# ---------------------------------------------------------------------------
# optional real data


def data_paths():
    """Raw MNIST files if available: $WRBM_DATA_DIR or ./data, expecting
    train-images-idx3-ubyte[.gz] and train-labels-idx1-ubyte[.gz]."""
    root = Path(os.environ.get("WRBM_DATA_DIR", Path(__file__).resolve().parent.parent / "data"))
    for suffix in (".gz", ""):
        images = root / f"train-images-idx3-ubyte{suffix}"
        labels = root / f"train-labels-idx1-ubyte{suffix}"
        if images.is_file() and labels.is_file():
            return images, labels
    return None


def load_mnist_bytes():
    paths = data_paths()
    if paths is None:
        return None
    out = []
    for p in paths:
        raw = p.read_bytes()
        out.append(gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw)
    return tuple(out)


@pytest.fixture(scope="session")
def mnist_zero_source():
    """(image_bytes, label_bytes, is_real) with the synthetic surrogate when
    the real corpus is absent."""
    real = load_mnist_bytes()
    if real is not None:
        return real[0], real[1], True
    images, labels = synthetic_mnist_files()
    return images, labels, False
