"""Datasets, client partitioning and seeded minibatch plans."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError, ParseError, UsageError
from .seeding import substream


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.inputs.shape[0]} input rows but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def example_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class Partition:
    client_indices: Tuple[np.ndarray, ...]

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)

    def sizes(self) -> List[int]:
        return [len(ix) for ix in self.client_indices]

    def check(self, n_examples: int) -> None:
        """Raise DataError unless shards are disjoint and cover range(n_examples)."""
        allidx = np.concatenate(self.client_indices) if self.client_indices else np.array([], int)
        if allidx.size != n_examples or not np.array_equal(np.sort(allidx), np.arange(n_examples)):
            raise DataError("partition shards are not a disjoint cover of the dataset")


@dataclass(frozen=True)
class BatchPlan:
    client: int
    epoch: int
    batch_size: int
    batches: Tuple[np.ndarray, ...]

    def __len__(self):
        return len(self.batches)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> Partition:
    """Shuffle and deal into ``n_clients`` shards whose sizes differ by at most one."""
    if n_clients < 1:
        raise UsageError("n_clients must be at least 1")
    if n_clients > len(dataset):
        raise UsageError(f"{n_clients} clients for {len(dataset)} examples")
    perm = substream(seed, "partition-iid").permutation(len(dataset))
    return Partition(tuple(np.sort(s) for s in np.array_split(perm, n_clients)))


def partition_label_skew(dataset: Dataset, n_clients: int, classes_per_client: int,
                         seed: int) -> Partition:
    """Shard-based label skew: every shard holds one class, every client gets
    ``classes_per_client`` shards, so no client sees more than that many classes.

    Shards are allotted to classes roughly in proportion to class frequency (at
    least one per present class) and dealt to clients by a seeded permutation.
    """
    s = classes_per_client
    if n_clients < 1 or s < 1:
        raise ConfigError("n_clients and classes_per_client must be at least 1")
    labels = dataset.labels
    present = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in present])
    n_shards = n_clients * s
    if n_shards < len(present):
        raise ConfigError(f"{n_clients} clients x {s} classes cannot cover "
                          f"{len(present)} classes")
    if n_shards > len(dataset):
        raise ConfigError(f"{n_shards} shards requested for {len(dataset)} examples")

    # one shard per class, then hand out the rest by highest count-per-shard,
    # never cutting a class into more shards than it has examples
    alloc = np.ones(len(present), dtype=int)
    for _ in range(n_shards - len(present)):
        q = np.where(alloc < counts, counts / (alloc + 1), -np.inf)
        alloc[int(np.argmax(q))] += 1

    rng = substream(seed, "partition-skew")
    shards = []
    for c, k in zip(present, alloc):
        idx = rng.permutation(np.flatnonzero(labels == c))
        shards += np.array_split(idx, k)
    order = rng.permutation(n_shards)
    clients = []
    for i in range(n_clients):
        mine = [shards[j] for j in order[i * s:(i + 1) * s]]
        clients.append(np.sort(np.concatenate(mine)))
    return Partition(tuple(clients))


def batches(partition: Partition, client: int, batch_size: int, epoch: int,
            seed: int) -> BatchPlan:
    """Seeded per-(epoch, client) shuffle of a shard cut into batches; the last may be short."""
    if batch_size < 1:
        raise UsageError("batch_size must be at least 1")
    shard = partition.client_indices[client]
    if len(shard) == 0:
        raise DataError(f"client {client} has an empty shard")
    perm = substream(seed, "shuffle", epoch, client).permutation(len(shard))
    order = shard[perm]
    return BatchPlan(client, epoch, batch_size,
                     tuple(order[i:i + batch_size] for i in range(0, len(order), batch_size)))


def gen_gaussian_blobs(n: int, classes: int, dim: int, sep: float, seed: int) -> Dataset:
    """Unit-variance isotropic blobs, one per class, with centers ``sep`` apart.

    Centers sit on scaled basis vectors (``sep / sqrt(2) * e_k``) when
    ``classes <= dim``; otherwise they are random directions scaled so the
    nearest pair of centers is ``sep`` apart. Labels are balanced.
    """
    if min(n, classes, dim) < 1 or sep <= 0:
        raise ConfigError("gen_gaussian_blobs needs positive n, classes, dim and sep")
    rng = substream(seed, "blobs")
    if classes <= dim:
        centers = np.eye(classes, dim) * (sep / np.sqrt(2.0))
    else:
        centers = rng.standard_normal((classes, dim))
        d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        centers *= sep / d[np.triu_indices(classes, 1)].min()
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    inputs = centers[labels] + rng.standard_normal((n, dim))
    return Dataset(inputs, labels.astype(np.int64), classes)


def train_test_split(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    perm = substream(seed, "split").permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    return dataset.subset(np.sort(perm[n_test:])), dataset.subset(np.sort(perm[:n_test]))


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (big-endian, magic 0x0000 <dtype> <ndim>) into an array."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ParseError("truncated IDX magic", 0)
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise ParseError(f"bad IDX magic 0x{raw[:4].hex()}", 0)
    if ndim < 1:
        raise ParseError("IDX file declares zero dimensions", 3)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[dtype_code])
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header != expected:
        raise ParseError(f"IDX payload is {len(raw) - header} bytes, header implies {expected}",
                         header)
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = None) -> Dataset:
    """Load an IDX image/label pair, min-max scaling each feature to [0, 1].

    Single-channel images (N, H, W) gain a channel axis: (N, 1, H, W).
    """
    x = read_idx(images_path).astype(np.float64)
    y = read_idx(labels_path).astype(np.int64).reshape(-1)
    if x.ndim == 3:
        x = x[:, None]
    return Dataset(minmax_scale(x), y, num_classes or int(y.max()) + 1)


def minmax_scale(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (x - lo) / span


def write_idx(path, array: np.ndarray) -> None:
    codes = {("u", 1): 0x08, ("i", 1): 0x09, ("i", 2): 0x0B, ("i", 4): 0x0C,
             ("f", 4): 0x0D, ("f", 8): 0x0E}
    arr = np.ascontiguousarray(array)
    code = codes[(arr.dtype.kind, arr.dtype.itemsize)]
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(arr.dtype.newbyteorder(">")).tobytes())


def load_csv(path, num_classes: int = None) -> Dataset:
    """Tabular data with a header row; the last column is an integer class label."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path} is empty")
    body = rows[1:]
    try:
        arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise DataError(f"{path} needs at least one feature column and a label column")
    y = arr[:, -1].astype(np.int64)
    if not np.array_equal(y, arr[:, -1]):
        raise DataError(f"{path}: label column must hold integers")
    return Dataset(arr[:, :-1], y, num_classes or int(y.max()) + 1)


def label_entropy(labels: np.ndarray, num_classes: int) -> float:
    p = np.bincount(labels, minlength=num_classes) / max(len(labels), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
