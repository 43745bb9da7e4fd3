"""Dataset ingestion and generation.

IDX is the big-endian binary container the MNIST-family datasets ship in:
images carry magic 0x00000803 and dims (count, rows, cols) with one byte
per pixel; labels carry magic 0x00000801 and dims (count,).  Pixels are
normalized to [0, 1] by dividing by 255.  Gzipped files are accepted
transparently (sniffed by the 0x1f8b prefix).

Synthetic generators produce small deterministic datasets for tests: a
two-class linearly separable blob pattern and a ten-class stripe pattern.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import derive_seed, gaussian_vector, uniform_vector

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "PERMDEF_DATA_DIR"

# official distribution filenames, shared by MNIST and Fashion-MNIST
_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    """IDX stream is malformed (bad magic, dims, or truncated payload)."""


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray                 # [n, 1, rows, cols] float64 in [0, 1]
    labels: np.ndarray                 # [n] int64 in [0, 10)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be [n, 1, rows, cols], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise ValueError("labels outside [0, 10)")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def slice(self, start: int, stop: int, note: str) -> "LabeledDataset":
        return LabeledDataset(
            images=self.images[start:stop].copy(),
            labels=self.labels[start:stop].copy(),
            provenance={**self.provenance, "split": note},
        )


def _maybe_gunzip(raw: bytes, path) -> bytes:
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except OSError as e:
            raise IdxFormatError(f"{path}: gzip payload is corrupt: {e}") from e
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: need 4 magic bytes at offset 0, have {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(
            f"{path}: truncated header: need {header} bytes, have {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) != header + count:
        raise IdxFormatError(
            f"{path}: payload length {len(raw) - header} at offset {header} "
            f"does not match header dims {dims} ({count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Parse one images/labels IDX pair into a normalized dataset."""
    with open(images_path, "rb") as fh:
        img_raw = _maybe_gunzip(fh.read(), images_path)
    with open(labels_path, "rb") as fh:
        lab_raw = _maybe_gunzip(fh.read(), labels_path)
    pixels = _parse_idx(img_raw, IMAGES_MAGIC, images_path)
    labels = _parse_idx(lab_raw, LABELS_MAGIC, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} holds {pixels.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels")
    n, rows, cols = pixels.shape
    images = (pixels.astype(np.float64) / 255.0).reshape(n, 1, rows, cols)
    return LabeledDataset(
        images=images, labels=labels.astype(np.int64),
        provenance={
            "images_file": str(images_path), "labels_file": str(labels_path),
            "normalization": "byte/255",
        })


def canonical_split(ds: LabeledDataset, kind: str) -> LabeledDataset:
    """Fixed order-preserving splits: train = first 55000 of the training
    set, val = its last 5000, test-head = first 1000 of the test set."""
    if kind == "train":
        if len(ds) < 60000:
            raise ValueError(f"train split needs the 60000-sample training set, got {len(ds)}")
        return ds.slice(0, 55000, "train[0:55000]")
    if kind == "val":
        if len(ds) < 60000:
            raise ValueError(f"val split needs the 60000-sample training set, got {len(ds)}")
        return ds.slice(len(ds) - 5000, len(ds), f"val[{len(ds)-5000}:{len(ds)}]")
    if kind == "test-head":
        if len(ds) < 1000:
            raise ValueError(f"test-head needs at least 1000 samples, got {len(ds)}")
        return ds.slice(0, 1000, "test[0:1000]")
    raise ValueError(f"unknown split kind {kind!r}")


# -- synthetic datasets --------------------------------------------------------

def _blob_image(cy: float, cx: float, noise_seed: int, side: int = 28) -> np.ndarray:
    r = np.arange(side)
    g = np.exp(-(((r[:, None] - cy) ** 2) + ((r[None, :] - cx) ** 2)) / (2 * 3.0 ** 2))
    noise = gaussian_vector(noise_seed, side * side).reshape(side, side)
    return np.clip(0.9 * g + 0.02 * noise, 0.0, 1.0)


def _stripe_image(klass: int, phase: float, noise_seed: int, side: int = 28) -> np.ndarray:
    angle = (klass % 5) * np.pi / 5.0
    freq = 2.0 + (klass // 5) * 3.0
    r = np.arange(side)
    proj = np.cos(angle) * r[:, None] + np.sin(angle) * r[None, :]
    wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * freq * proj / side + phase)
    noise = gaussian_vector(noise_seed, side * side).reshape(side, side)
    return np.clip(wave + 0.05 * noise, 0.0, 1.0)


def synthetic_dataset(seed: int, n: int, kind: str) -> LabeledDataset:
    """Deterministic test data; labels cycle so the histogram is balanced
    within one count."""
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    images = np.empty((n, 1, 28, 28))
    if kind == "two-gaussians":
        labels = np.arange(n, dtype=np.int64) % 2
        centers = {0: (9.0, 9.0), 1: (18.0, 18.0)}
        for i in range(n):
            jitter = uniform_vector(derive_seed(seed, 0, i), 2) * 2.0 - 1.0
            cy, cx = centers[int(labels[i])]
            images[i, 0] = _blob_image(cy + jitter[0], cx + jitter[1],
                                       derive_seed(seed, 1, i))
    elif kind == "striped-digits":
        labels = np.arange(n, dtype=np.int64) % 10
        for i in range(n):
            phase = float(uniform_vector(derive_seed(seed, 0, i), 1)[0]) * 2.0 * np.pi
            images[i, 0] = _stripe_image(int(labels[i]), phase,
                                         derive_seed(seed, 1, i))
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    return LabeledDataset(
        images=images, labels=labels,
        provenance={"dataset": f"synthetic/{kind}", "seed": seed, "n": n,
                    "normalization": "generated in [0,1]"})


# -- dataset directory resolution ---------------------------------------------

def resolve_data_dir(flag_value=None):
    """CLI flag wins over the environment variable; None if neither set."""
    if flag_value:
        return Path(flag_value)
    env = os.environ.get(DATA_DIR_ENV)
    return Path(env) if env else None


def _find_file(data_dir: Path, dataset: str, basename: str):
    for candidate in (
        data_dir / dataset / basename,
        data_dir / dataset / (basename + ".gz"),
        data_dir / basename,
        data_dir / (basename + ".gz"),
    ):
        if candidate.is_file():
            return candidate
    return None


def load_named_dataset(data_dir, dataset: str, split: str) -> LabeledDataset:
    """Load mnist / fashion-mnist by their official filenames.

    Files are searched in ``data_dir/<dataset>/`` then ``data_dir/``, with
    or without a .gz suffix.  Raises FileNotFoundError with the expected
    names when missing.
    """
    if dataset not in ("mnist", "fashion-mnist"):
        raise ValueError(f"unknown dataset {dataset!r}; known: mnist, fashion-mnist")
    if split not in _SPLIT_FILES:
        raise ValueError(f"unknown split {split!r}; known: train, test")
    if data_dir is None:
        raise FileNotFoundError(
            f"no dataset directory configured; pass --data-dir or set {DATA_DIR_ENV}")
    data_dir = Path(data_dir)
    img_name, lab_name = _SPLIT_FILES[split]
    img = _find_file(data_dir, dataset, img_name)
    lab = _find_file(data_dir, dataset, lab_name)
    if img is None or lab is None:
        raise FileNotFoundError(
            f"{dataset} {split} files not found under {data_dir}: expected "
            f"{img_name}[.gz] and {lab_name}[.gz] there or in {data_dir / dataset}")
    ds = load_idx(img, lab)
    ds.provenance.update({"dataset": dataset, "split": split})
    return ds
