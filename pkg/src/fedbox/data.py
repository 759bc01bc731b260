"""Dataset synthesis, CSV ingestion, Dirichlet label-shift partitioning, splits."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeds import mix64

Array = np.ndarray

# Component std of the Gaussian mixture; kept below 1 so that reconstructions
# from a tanh-terminated decoder can actually cover the data range.
NOISE_SCALE = 0.3


@dataclass
class LabeledDataset:
    features: Array  # [N x D] float64
    labels: Array  # [N] int64
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def synth_task(
    seed: int,
    n_samples: int,
    dim: int,
    num_classes: int,
    separation: float,
    noise_scale: float = NOISE_SCALE,
) -> LabeledDataset:
    """Balanced Gaussian-mixture classification task, deterministic per seed.

    Class means sit on random unit directions scaled by separation * noise_scale,
    so ``separation`` is the mean-to-origin distance in units of the component
    std. separation=0 collapses every class onto the same distribution.
    """
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_samples < num_classes:
        raise ValueError("need at least one sample per class")
    if separation < 0:
        raise ValueError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    means = separation * noise_scale * dirs
    labels = np.arange(n_samples, dtype=np.int64) % num_classes
    features = means[labels] + noise_scale * rng.standard_normal((n_samples, dim))
    return LabeledDataset(features, labels, num_classes)


def dirichlet_partition(
    labels: Array, n_clients: int, alpha: float, seed: int, max_retries: int = 100
) -> list[Array]:
    """Per-class Dirichlet proportions deal each class's indices to clients.

    Every sample is assigned exactly once. Draws are retried (fresh Dirichlet
    proportions) until no client is empty, up to ``max_retries`` attempts.
    """
    if n_clients < 1:
        raise ValueError("n_clients must be at least 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    for _ in range(max_retries):
        assignment: list[list[Array]] = [[] for _ in range(n_clients)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(n_clients, alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                assignment[client].append(chunk)
        out = [np.sort(np.concatenate(chunks)) for chunks in assignment]
        if all(len(ix) > 0 for ix in out):
            return out
    raise RuntimeError(
        f"could not avoid an empty client after {max_retries} attempts "
        f"(alpha={alpha}, n_clients={n_clients})"
    )


def local_split(
    indices: Array, train_frac: float, seed: int
) -> tuple[Array, Array, Array]:
    """Shuffle, then cut into train / val / test.

    Train takes floor(train_frac * k); the remainder is halved, with an odd
    leftover going to test.
    """
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must be in (0, 1)")
    indices = np.asarray(indices)
    if len(indices) < 3:
        raise ValueError(f"need at least 3 samples to split, got {len(indices)}")
    shuffled = indices.copy()
    np.random.default_rng(seed).shuffle(shuffled)
    n_train = int(np.floor(train_frac * len(indices)))
    rest = len(indices) - n_train
    n_val = rest // 2
    return (
        shuffled[:n_train],
        shuffled[n_train : n_train + n_val],
        shuffled[n_train + n_val :],
    )


@dataclass
class ClientPartition:
    train: list[Array]
    val: list[Array]
    test: list[Array]
    alpha: float

    @property
    def n_clients(self) -> int:
        return len(self.train)


def partition_clients(
    labels: Array, n_clients: int, alpha: float, train_frac: float, seed: int
) -> ClientPartition:
    """Dirichlet partition plus per-client train/val/test splits."""
    client_indices = dirichlet_partition(labels, n_clients, alpha, seed)
    train, val, test = [], [], []
    for i, idx in enumerate(client_indices):
        tr, va, te = local_split(idx, train_frac, mix64(seed, 0x5B11 + i))
        train.append(tr)
        val.append(va)
        test.append(te)
    return ClientPartition(train, val, test, alpha)


def write_manifest(partition: ClientPartition, seed: int, path: str | Path) -> None:
    payload = {
        "alpha": partition.alpha,
        "seed": seed,
        "clients": {
            str(i): {
                "train": partition.train[i].tolist(),
                "val": partition.val[i].tolist(),
                "test": partition.test[i].tolist(),
            }
            for i in range(partition.n_clients)
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def _expected_header(dim: int) -> list[str]:
    return [f"f{i}" for i in range(dim)] + ["label"]


def load_csv(path: str | Path) -> LabeledDataset:
    """Read a ``f0,...,f{D-1},label`` CSV; malformed rows report their line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        dim = len(header) - 1
        if dim < 1 or header != _expected_header(dim):
            raise ValueError(
                f"{path}: header must be f0,...,f{{D-1}},label, got {header}"
            )
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != dim + 1:
                raise ValueError(f"{path}:{line_no}: expected {dim + 1} cells, got {len(row)}")
            try:
                features.append([float(c) for c in row[:dim]])
            except ValueError:
                raise ValueError(f"{path}:{line_no}: non-numeric feature cell") from None
            try:
                label = int(row[dim])
            except ValueError:
                raise ValueError(f"{path}:{line_no}: non-integer label") from None
            if label < 0:
                raise ValueError(f"{path}:{line_no}: negative label {label}")
            labels.append(label)
    if not labels:
        raise ValueError(f"{path}: no data rows")
    return LabeledDataset(np.array(features), np.array(labels), max(labels) + 1)


def save_csv(dataset: LabeledDataset, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(dataset.dim))
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(v) for v in row] + [int(label)])
