"""Secret-key pixel permutation defence.

A key is a seeded i.i.d. standard-normal vector whose stable ascending
argsort defines a permutation of the flattened pixel grid.  Inputs are
permuted before they reach the classifier, so gradients crafted against an
unpermuted surrogate land on the wrong pixels.  Everything that touches key
material is fenced off from attacker-side code via :func:`attacker_context`.
"""

from __future__ import annotations

import contextvars
import math
import os
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .layers import as_tensor
from .rng import gaussian_vector

KEY_MAGIC = b"PKEY"
KEY_VERSION = 1


class ProtocolViolation(RuntimeError):
    """Attacker-side code reached for key material."""


class KeyFormatError(ValueError):
    """Key file is malformed (bad magic/version or truncated)."""


_ATTACKER = contextvars.ContextVar("permdef_attacker_context", default=False)


@contextmanager
def attacker_context():
    """Mark the enclosed computation as attacker-side.

    Inside the block every key-bearing operation in this module raises
    ProtocolViolation.  Surrogate training and adversarial example
    generation run inside this fence; only victim-side evaluation runs
    outside it.
    """
    token = _ATTACKER.set(True)
    try:
        yield
    finally:
        _ATTACKER.reset(token)


def in_attacker_context() -> bool:
    return _ATTACKER.get()


def _deny_attacker(operation: str) -> None:
    if _ATTACKER.get():
        raise ProtocolViolation(
            f"{operation} handles secret-key material and is not available "
            "inside attacker_context"
        )


@dataclass(frozen=True)
class SecretKey:
    """Seeded Gaussian key vector plus the permutation it induces."""
    seed: int
    dim: int
    key_vector: np.ndarray = field(repr=False)
    permutation: np.ndarray = field(repr=False)
    inverse_permutation: np.ndarray = field(repr=False)

    def __post_init__(self):
        for arr in (self.key_vector, self.permutation, self.inverse_permutation):
            arr.setflags(write=False)


def keygen(seed: int, dim: int) -> SecretKey:
    """Derive the key for (seed, dim); deterministic and bitwise reproducible.

    The permutation is the stable ascending argsort of the key vector, ties
    broken toward the lower index.
    """
    _deny_attacker("keygen")
    if dim < 1:
        raise ValueError(f"key dimension must be >= 1, got {dim}")
    values = gaussian_vector(seed, dim)
    perm = np.argsort(values, kind="stable").astype(np.int64)
    inv = np.empty(dim, dtype=np.int64)
    inv[perm] = np.arange(dim, dtype=np.int64)
    return SecretKey(seed=int(seed), dim=int(dim), key_vector=values,
                     permutation=perm, inverse_permutation=inv)


def _check_dim(key: SecretKey, x: np.ndarray, batch: bool) -> None:
    per_item = x[0].size if batch else x.size
    if per_item != key.dim:
        raise ValueError(
            f"input has {per_item} values per sample, key permutes {key.dim}"
        )


def apply_transform(key: SecretKey, x: np.ndarray) -> np.ndarray:
    """Permute one flattened input: out[i] = flat(x)[permutation[i]]."""
    _deny_attacker("apply_transform")
    x = as_tensor(x)
    _check_dim(key, x, batch=False)
    return x.reshape(-1)[key.permutation].reshape(x.shape)


def invert_transform(key: SecretKey, x: np.ndarray) -> np.ndarray:
    """Undo apply_transform; exact (pure reindexing)."""
    _deny_attacker("invert_transform")
    x = as_tensor(x)
    _check_dim(key, x, batch=False)
    return x.reshape(-1)[key.inverse_permutation].reshape(x.shape)


def apply_transform_batch(key: SecretKey, x: np.ndarray) -> np.ndarray:
    """Permute each sample of a batch ``[n, ...]``."""
    _deny_attacker("apply_transform")
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"batch input must have a leading sample axis, got shape {x.shape}")
    _check_dim(key, x, batch=True)
    n = x.shape[0]
    return x.reshape(n, -1)[:, key.permutation].reshape(x.shape)


def invert_transform_batch(key: SecretKey, x: np.ndarray) -> np.ndarray:
    _deny_attacker("invert_transform")
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"batch input must have a leading sample axis, got shape {x.shape}")
    _check_dim(key, x, batch=True)
    n = x.shape[0]
    return x.reshape(n, -1)[:, key.inverse_permutation].reshape(x.shape)


class DefendedClassifier:
    """Permute-then-classify pipeline; the net was trained on permuted data."""

    def __init__(self, key: SecretKey, net):
        _deny_attacker("DefendedClassifier")
        if int(np.prod(net.input_shape)) != key.dim:
            raise ValueError(
                f"network input {net.input_shape} has {int(np.prod(net.input_shape))} "
                f"values, key permutes {key.dim}"
            )
        self.key = key
        self.net = net

    def classify(self, x: np.ndarray) -> int:
        _deny_attacker("defended_classify")
        return self.net.decode(apply_transform(self.key, x))

    def classify_batch(self, x: np.ndarray) -> np.ndarray:
        _deny_attacker("defended_classify")
        return self.net.decode_batch(apply_transform_batch(self.key, x))

    def encode(self, x: np.ndarray):
        _deny_attacker("defended_classify")
        return self.net.encode(apply_transform(self.key, x))


def key_entropy_report(key: SecretKey, data_sample: np.ndarray, bins: int = 256) -> dict:
    """Compare key entropy against a plug-in estimate for a data sample.

    The key side is the closed-form differential entropy of an i.i.d.
    standard-normal vector, dim x 0.5*ln(2*pi*e) nats.  The data side is the
    discrete plug-in entropy of a pixel-value histogram pooled over the
    sample (so a constant sample scores 0).  The two live on different
    scales; the report surfaces both numbers and flags only the gross
    violation key < data.
    """
    sample = np.asarray(data_sample, dtype=np.float64).ravel()
    if sample.size == 0:
        raise ValueError("empty data sample")
    per_dim = 0.5 * math.log(2.0 * math.pi * math.e)
    key_nats = key.dim * per_dim
    lo = min(0.0, float(sample.min()))
    hi = max(1.0, float(sample.max()))
    counts, _ = np.histogram(sample, bins=bins, range=(lo, hi))
    p = counts / counts.sum()
    nz = p[p > 0]
    data_nats = float(-(nz * np.log(nz)).sum())
    return {
        "key_dim": key.dim,
        "key_entropy_nats": key_nats,
        "key_entropy_per_dim_nats": per_dim,
        "data_entropy_nats": data_nats,
        "histogram_bins": bins,
        "violation": key_nats < data_nats,
    }


# -- key file ----------------------------------------------------------------

def save_key_bytes(key: SecretKey) -> bytes:
    """Serialize only (seed, dim); the vector is re-derived on load."""
    return KEY_MAGIC + struct.pack(">BIQ", KEY_VERSION, key.dim, key.seed % 2**64)


def load_key_bytes(data: bytes) -> SecretKey:
    if data[:4] != KEY_MAGIC:
        raise KeyFormatError(f"bad magic at offset 0: expected {KEY_MAGIC!r}")
    if len(data) < 17:
        raise KeyFormatError(f"truncated key file: need 17 bytes, have {len(data)}")
    version, dim, seed = struct.unpack(">BIQ", data[4:17])
    if version != KEY_VERSION:
        raise KeyFormatError(f"unsupported key version {version} at offset 4")
    if len(data) != 17:
        raise KeyFormatError(f"{len(data) - 17} trailing bytes at offset 17")
    return keygen(seed, dim)


def save_key(key: SecretKey, path) -> None:
    _deny_attacker("save_key")
    with open(path, "wb") as fh:
        fh.write(save_key_bytes(key))
    os.chmod(path, 0o600)  # secret material


def load_key(path) -> SecretKey:
    _deny_attacker("load_key")
    with open(path, "rb") as fh:
        return load_key_bytes(fh.read())
