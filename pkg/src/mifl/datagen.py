"""Datasets, client partitioning, local splits, and sensitive attributes.

Everything here is a deterministic function of its inputs and a seed.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_BATCH_RECORDS = 10_000
CIFAR_BATCH_BYTES = CIFAR_RECORD_BYTES * CIFAR_BATCH_RECORDS


class DataFormatError(ValueError):
    """Raised when an on-disk dataset does not match its documented format."""


@dataclass
class LabeledDataset:
    """Image-shaped samples (N, C, H, W) with integer class labels."""

    samples: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ValueError(
                f"dataset: {len(self.samples)} samples but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(
                f"dataset: labels outside [0, {self.n_classes}): "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self):
        return len(self.samples)


@dataclass
class PartitionPlan:
    """Disjoint per-client index lists into one dataset."""

    client_indices: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for cid, idx in enumerate(self.client_indices):
            if len(idx) == 0:
                raise ValueError(f"partition: client {cid} received no samples")
            s = set(int(i) for i in idx)
            if seen & s:
                raise ValueError(f"partition: client {cid} overlaps an earlier client")
            seen |= s

    @property
    def n_clients(self):
        return len(self.client_indices)


def load_cifar10(directory):
    """Load every ``*.bin`` batch file under a directory.

    Each file must hold exactly 10,000 records of 3,073 bytes (one label
    byte, then 3,072 red/green/blue plane bytes).  Pixels are scaled to
    [0, 1] and normalized per channel with mean 0.5 and std 0.5.
    """
    names = sorted(n for n in os.listdir(directory) if n.endswith(".bin"))
    if not names:
        raise DataFormatError(f"load_cifar10: no .bin batch files under {directory}")
    all_images, all_labels = [], []
    for name in names:
        path = os.path.join(directory, name)
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size != CIFAR_BATCH_BYTES:
            raise DataFormatError(
                f"load_cifar10: {path} holds {raw.size} bytes, expected {CIFAR_BATCH_BYTES} "
                f"({CIFAR_BATCH_RECORDS} records of {CIFAR_RECORD_BYTES} bytes)"
            )
        records = raw.reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD_BYTES)
        all_labels.append(records[:, 0].astype(np.int64))
        all_images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(all_images).astype(np.float32) / 255.0
    images = (images - 0.5) / 0.5
    labels = np.concatenate(all_labels)
    if labels.max() > 9:
        raise DataFormatError(f"load_cifar10: label byte {labels.max()} out of range 0-9")
    return LabeledDataset(samples=images, labels=labels, n_classes=10)


def _bump_means(n_classes, side):
    """Class means: equal-energy Gaussian bumps at distinct grid positions.

    Non-overlapping identical bumps are mutually (near-)orthogonal, so the
    means sit at the vertices of a scaled simplex in feature space.
    """
    grid = math.ceil(math.sqrt(n_classes))
    coords = np.linspace(side / (2 * grid), side - side / (2 * grid), grid) - 0.5
    centers = [(coords[i // grid], coords[i % grid]) for i in range(n_classes)]
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    sigma = max(side / (3.0 * grid), 1.0)
    means = np.empty((n_classes, side * side), dtype=np.float64)
    for c, (ci, cj) in enumerate(centers):
        bump = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma**2))
        means[c] = (2.0 * bump / bump.max()).reshape(-1)
    return means


def synthetic_blobs(n_classes, dims, per_class, spread, seed):
    """Gaussian clusters with class means at scaled simplex vertices.

    ``dims`` must be a perfect square; samples are shaped (1, side, side)
    so the convolutional classifier applies unchanged.
    """
    if n_classes < 2:
        raise ValueError(f"synthetic_blobs: need >= 2 classes, got {n_classes}")
    if per_class < 1:
        raise ValueError(f"synthetic_blobs: need >= 1 sample per class, got {per_class}")
    if n_classes > dims:
        raise ValueError(f"synthetic_blobs: {n_classes} classes need dims >= classes, got {dims}")
    side = math.isqrt(dims)
    if side * side != dims:
        raise ValueError(f"synthetic_blobs: dims must be a perfect square, got {dims}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0B10B5]))
    means = _bump_means(n_classes, side)
    labels = np.repeat(np.arange(n_classes), per_class)
    noise = rng.normal(size=(labels.size, dims)) * spread
    flat = means[labels] + noise
    order = rng.permutation(labels.size)
    samples = flat[order].reshape(-1, 1, side, side).astype(np.float32)
    return LabeledDataset(samples=samples, labels=labels[order], n_classes=n_classes)


def correlated_gaussian_pairs(rho, dims, n, seed):
    """Paired samples (X, Y), each coordinate bivariate normal with
    correlation rho; the true MI is ``-dims/2 * ln(1 - rho^2)`` nats."""
    if not abs(rho) < 1:
        raise ValueError(f"correlated_gaussian_pairs: |rho| must be < 1, got {rho}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6A0551]))
    x = rng.normal(size=(n, dims))
    eps = rng.normal(size=(n, dims))
    y = rho * x + math.sqrt(1.0 - rho * rho) * eps
    return x.astype(np.float32), y.astype(np.float32)


def gaussian_pair_mi(rho, dims=1):
    """Analytic MI of the correlated Gaussian pair distribution, in nats."""
    return -0.5 * dims * math.log(1.0 - rho * rho)


def partition_iid(dataset, n_clients, seed):
    """Random permutation split into near-equal shards (sizes differ <= 1)."""
    n = len(dataset)
    if n_clients > n:
        raise ValueError(f"partition_iid: {n_clients} clients exceed {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x11D]))
    order = rng.permutation(n)
    shards = np.array_split(order, n_clients)
    return PartitionPlan(client_indices=[np.sort(s) for s in shards])


def partition_label_skew(dataset, n_clients, concentration, seed):
    """Label-skewed partition: each label's indices are distributed over
    clients by a Dirichlet(concentration) draw; a post-pass moves single
    samples from the largest shards so every client ends non-empty."""
    if concentration <= 0:
        raise ValueError(f"partition_label_skew: concentration must be > 0, got {concentration}")
    n = len(dataset)
    if n_clients > n:
        raise ValueError(f"partition_label_skew: {n_clients} clients exceed {n} samples")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD112]))
    shards = [[] for _ in range(n_clients)]
    for label in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == label)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        props = rng.dirichlet(np.full(n_clients, concentration))
        cuts = np.round(np.cumsum(props) * idx.size).astype(int)[:-1]
        for cid, part in enumerate(np.split(idx, cuts)):
            shards[cid].extend(int(i) for i in part)
    # non-emptiness floor: steal one sample at a time from the largest shard
    for cid in range(n_clients):
        while not shards[cid]:
            donor = max(range(n_clients), key=lambda c: len(shards[c]))
            if len(shards[donor]) <= 1:
                raise ValueError("partition_label_skew: not enough samples to fill clients")
            shards[cid].append(shards[donor].pop())
    return PartitionPlan(client_indices=[np.sort(np.array(s, dtype=np.int64)) for s in shards])


def split_local(indices, ratio, seed):
    """Shuffle then split one client's indices into (train, test).

    The train share is round(ratio * n), floored/capped so both sides stay
    non-empty.
    """
    indices = np.asarray(indices)
    if indices.size < 2:
        raise ValueError(f"split_local: need >= 2 indices, got {indices.size}")
    if not 0 < ratio < 1:
        raise ValueError(f"split_local: ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5711]))
    order = rng.permutation(indices)
    n_train = int(round(ratio * indices.size))
    n_train = min(max(n_train, 1), indices.size - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class AttributeMap:
    """Binary sensitive-attribute values per label, per named attribute."""

    attributes: dict  # name -> np.ndarray of 0/1 per label
    n_classes: int

    def __post_init__(self):
        for name, values in self.attributes.items():
            values = np.asarray(values)
            if values.shape != (self.n_classes,):
                raise ValueError(
                    f"attribute {name!r}: need one value per label "
                    f"({self.n_classes}), got shape {values.shape}"
                )
            if not set(np.unique(values)) <= {0, 1}:
                raise ValueError(f"attribute {name!r}: values must be binary 0/1")
            if len(np.unique(values)) < 2:
                raise ValueError(f"attribute {name!r}: needs at least one label per group")
            self.attributes[name] = values.astype(np.int64)

    @property
    def names(self):
        return sorted(self.attributes)

    def group_of(self, name, labels):
        return self.attributes[name][np.asarray(labels)]


def default_attributes(n_classes):
    """One built-in attribute, label parity (label mod 2)."""
    if n_classes < 2:
        raise ValueError(f"default_attributes: need >= 2 classes, got {n_classes}")
    return AttributeMap(
        attributes={"label_parity": np.arange(n_classes) % 2}, n_classes=n_classes
    )


def load_attributes(path, n_classes, name="custom"):
    """Attribute map from a text file of ``label=value`` lines (# comments ok)."""
    values = np.full(n_classes, -1, dtype=np.int64)
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                key, val = line.split("=", 1)
                label, attr = int(key), int(val)
            except ValueError:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 'label=value', got {line!r}"
                ) from None
            if not 0 <= label < n_classes:
                raise DataFormatError(f"{path}:{lineno}: label {label} outside [0, {n_classes})")
            values[label] = attr
    if (values < 0).any():
        missing = np.flatnonzero(values < 0).tolist()
        raise DataFormatError(f"{path}: attribute map missing labels {missing}")
    return AttributeMap(attributes={name: values}, n_classes=n_classes)
