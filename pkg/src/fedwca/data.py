"""Synthetic multi-domain data, client partitioning and IDX ingestion."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError
from .model import Batch

TRAIN_FRACTION = 0.64
VAL_FRACTION = 0.16


@dataclass(frozen=True)
class DomainSpec:
    """Affine shift ``x -> R(angle) (scale * z) + translation`` plus Gaussian noise.

    ``R`` rotates every consecutive coordinate pair ``(0,1), (2,3), ...`` by
    ``angle`` radians; with an odd dimension the last coordinate is left alone.
    """

    domain_id: int
    angle: float = 0.0
    scale: tuple[float, ...] | None = None
    translation: tuple[float, ...] | None = None
    noise_std: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be non-negative")
        if self.scale is not None and np.any(np.asarray(self.scale) == 0):
            raise ConfigurationError("domain transform is not invertible (zero scale)")

    @classmethod
    def rotated(cls, domain_id: int, degrees: float, noise_std: float = 0.0) -> "DomainSpec":
        return cls(domain_id, float(np.deg2rad(degrees)), noise_std=noise_std)

    def apply(self, z: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        d = z.shape[1]
        x = z * np.asarray(self.scale, dtype=np.float64) if self.scale is not None else z.copy()
        c, s = np.cos(self.angle), np.sin(self.angle)
        even = (d // 2) * 2
        a, b = x[:, 0:even:2].copy(), x[:, 1:even:2].copy()
        x[:, 0:even:2] = c * a - s * b
        x[:, 1:even:2] = s * a + c * b
        if self.translation is not None:
            x = x + np.asarray(self.translation, dtype=np.float64)
        if self.noise_std > 0:
            x = x + self.noise_std * rng.normal(size=x.shape)
        return x


@dataclass(frozen=True)
class DomainPool:
    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self) -> Batch:
        return Batch(self.inputs, self.labels)


@dataclass(frozen=True)
class ClientDataset:
    """One client's data.  ``train``/``val`` carry no labels; the hidden
    labels exist only for measuring pseudo-label quality offline."""

    client_id: int
    domain_id: int
    train: Batch
    val: Batch
    test: Batch
    hidden_train_labels: np.ndarray = field(repr=False)
    hidden_val_labels: np.ndarray = field(repr=False)


def class_means(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    means = rng.normal(size=(num_classes, dim))
    return means / np.linalg.norm(means, axis=1, keepdims=True)


def balanced_labels(n: int, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % num_classes
    return rng.permutation(labels)


def gen_multidomain(
    num_classes: int,
    domains: Sequence[DomainSpec],
    n_per_domain: int,
    seed: int,
    dim: int = 16,
    class_std: float = 0.35,
) -> list[DomainPool]:
    """Class-balanced pools for each domain from one shared set of latent samples.

    Class means are unit vectors drawn once from ``seed``; latent samples are
    Gaussian blobs around them.  Each domain applies its transform to the
    same latent samples, with its own noise stream.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if n_per_domain < num_classes:
        raise ConfigurationError("need at least one sample per class per domain")
    rng = np.random.default_rng([seed, 0])
    means = class_means(num_classes, dim, rng)
    labels = balanced_labels(n_per_domain, num_classes, rng)
    latent = means[labels] + class_std * rng.normal(size=(n_per_domain, dim))
    pools = []
    for spec in domains:
        noise_rng = np.random.default_rng([seed, 1, spec.domain_id])
        x = spec.apply(latent, noise_rng)
        pools.append(DomainPool(spec.domain_id, x, labels.copy()))
    return pools


def shifted_domains(
    rotations: Sequence[float],
    translation_norm: float,
    noise_std: float,
    dim: int,
    seed: int,
    source_rotation: float = 0.0,
) -> list[DomainSpec]:
    """Untranslated source domain 0 followed by one target domain per rotation (degrees).

    Each target domain also gets a translation of length ``translation_norm``
    in a direction drawn from ``seed`` and the domain id, a shift that
    touches every input unit and so shows up in the first layer.
    """
    if translation_norm < 0:
        raise ConfigurationError("translation_norm must be non-negative")
    specs = [DomainSpec.rotated(0, source_rotation, noise_std)]
    for i, degrees in enumerate(rotations, start=1):
        translation = None
        if translation_norm > 0:
            u = np.random.default_rng([seed, 3, i]).normal(size=dim)
            translation = tuple(translation_norm * u / np.linalg.norm(u))
        specs.append(DomainSpec(i, float(np.deg2rad(degrees)), None, translation, noise_std))
    return specs


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = int(round(TRAIN_FRACTION * n))
    n_val = int(round(VAL_FRACTION * n))
    return n_train, n_val, n - n_train - n_val


def partition(pool: DomainPool, clients_per_domain: int, seed: int,
              first_client_id: int = 0) -> list[ClientDataset]:
    """I.i.d. split of a domain pool across clients, then 64/16/20 train/val/test per client."""
    if clients_per_domain < 1:
        raise ConfigurationError("need at least one client per domain")
    if len(pool) < clients_per_domain:
        raise DataError("fewer samples than clients")
    rng = np.random.default_rng([seed, 2, pool.domain_id])
    order = rng.permutation(len(pool))
    clients = []
    for j, share in enumerate(np.array_split(order, clients_per_domain)):
        n_train, n_val, n_test = split_sizes(share.size)
        if min(n_train, n_val, n_test) < 1:
            raise DataError(f"client share of {share.size} samples is too small to split")
        tr, va, te = share[:n_train], share[n_train : n_train + n_val], share[n_train + n_val :]
        clients.append(
            ClientDataset(
                client_id=first_client_id + j,
                domain_id=pool.domain_id,
                train=Batch(pool.inputs[tr]),
                val=Batch(pool.inputs[va]),
                test=Batch(pool.inputs[te], pool.labels[te]),
                hidden_train_labels=pool.labels[tr].copy(),
                hidden_val_labels=pool.labels[va].copy(),
            )
        )
    return clients


# ---------------------------------------------------------------- IDX files

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(DataError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(data: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an integer array of its declared shape."""
    if len(data) < 4:
        raise IdxFormatError("file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x} (only unsigned-byte data supported)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"expected magic 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims, dtype=np.int64))
    if len(data) - header != size:
        raise IdxFormatError(
            f"payload has {len(data) - header} bytes, dimensions {dims} need {size}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), expected_magic)


def load_idx(images_path, labels_path, domain_id: int = 0) -> DomainPool:
    """MNIST-style image/label pair -> flattened pixels in [0, 1] with integer labels."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    if images.shape[0] == 0:
        raise IdxFormatError("IDX file holds no samples")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return DomainPool(domain_id, x, labels.astype(np.int64))


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 arrays of 1 or 3 dimensions."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()
