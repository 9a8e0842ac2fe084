"""Datasets, file loaders and non-IID partitioners."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import ConfigurationError, DataLoadError

HETEROGENEITY_KINDS = ("label_skew", "feature_skew", "concept_shift", "iid")


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


@dataclass(frozen=True)
class HeterogeneityConfig:
    kind: str = "label_skew"
    s: int = 2
    strength: float = 1.0

    def validate(self, num_classes: int) -> None:
        if self.kind not in HETEROGENEITY_KINDS:
            raise ConfigurationError(f"unknown heterogeneity kind {self.kind!r}")
        if self.kind == "label_skew" and not 2 <= self.s <= num_classes:
            raise ConfigurationError(f"s={self.s} outside [2, {num_classes}]")
        if self.kind == "feature_skew" and self.strength < 0:
            raise ConfigurationError("feature skew strength must be >= 0")


@dataclass
class DatasetShard:
    client_id: int
    train: Dataset
    local_test: Dataset
    train_idx: np.ndarray
    test_idx: np.ndarray
    label_map: Optional[np.ndarray] = None


@dataclass
class FederatedData:
    shards: list
    new_test: Dataset
    external: Optional[Dataset] = None
    new_test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    external_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    info: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def manifest(self) -> dict:
        """JSON-ready record of which source indices went where."""
        clients = {}
        for sh in self.shards:
            entry = {"train": sh.train_idx.tolist(), "local_test": sh.test_idx.tolist(),
                     "labels": sorted(set(sh.train.labels.tolist()))}
            if sh.label_map is not None:
                entry["label_map"] = sh.label_map.tolist()
            clients[str(sh.client_id)] = entry
        return {**self.info, "clients": clients, "new_test": self.new_test_idx.tolist(),
                "external": self.external_idx.tolist()}

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))


def synth_generate(num_classes: int, dims: int, per_class: int, spread: float, seed: int,
                   shape: Optional[Sequence[int]] = None, modes: int = 1) -> Dataset:
    """Gaussian class clusters around seeded means.

    Each class is a mixture of ``modes`` clusters.  ``shape`` reshapes every
    sample (e.g. to C×H×W) and must have ``dims`` elements.
    """
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(num_classes, modes, dims))
    labels = np.repeat(np.arange(num_classes), per_class)
    which = rng.integers(0, modes, size=len(labels))
    x = means[labels, which] + spread * rng.normal(size=(len(labels), dims))
    if shape is not None:
        if int(np.prod(shape)) != dims:
            raise ConfigurationError(f"shape {tuple(shape)} does not hold {dims} values")
        x = x.reshape((len(labels),) + tuple(shape))
    return Dataset(x, labels, num_classes)


def affine_shift(inputs: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Per channel (images) or per feature (vectors) scale and offset, magnitude ∝ strength."""
    sample_shape = inputs.shape[1:]
    n = sample_shape[0]
    scale = 1.0 + strength * rng.uniform(-0.5, 0.5, size=n)
    offset = strength * rng.uniform(-0.5, 0.5, size=n)
    bshape = (1, n) + (1,) * (len(sample_shape) - 1)
    return inputs * scale.reshape(bshape) + offset.reshape(bshape)


def _uniform_split(idx: np.ndarray, K: int, rng: np.random.Generator) -> list[np.ndarray]:
    idx = rng.permutation(idx)
    return [np.sort(part) for part in np.array_split(idx, K)]


def label_skew_assignment(pool_labels: np.ndarray, num_classes: int, K: int, s: int,
                          rng: np.random.Generator) -> list[list[int]]:
    """Class sets of size ``s`` per client, balancing how often each class is used.

    Clients pick the least-used classes first (random tie-break), so every
    class is held by someone whenever K*s >= number of classes present.
    """
    present = np.unique(pool_labels)
    if s * K < len(present):
        raise ConfigurationError(f"s*K={s * K} slots cannot cover {len(present)} classes")
    if s > len(present):
        raise ConfigurationError(f"s={s} exceeds the {len(present)} classes present")
    usage = {int(c): 0 for c in present}
    sets = []
    for _ in range(K):
        noise = rng.random(len(present))
        order = sorted(range(len(present)), key=lambda j: (usage[int(present[j])], noise[j]))
        chosen = sorted(int(present[j]) for j in order[:s])
        for c in chosen:
            usage[c] += 1
        sets.append(chosen)
    return sets


def partition_label_skew(labels: np.ndarray, pool: np.ndarray, num_classes: int, K: int, s: int,
                         rng: np.random.Generator) -> list[np.ndarray]:
    """Split ``pool`` (indices into ``labels``) so each client holds at most ``s`` classes."""
    if K == 1:
        return [np.sort(pool)]
    sets = label_skew_assignment(labels[pool], num_classes, K, s, rng)
    parts: list[list[np.ndarray]] = [[] for _ in range(K)]
    for c in np.unique(labels[pool]):
        holders = [k for k, cs in enumerate(sets) if int(c) in cs]
        members = rng.permutation(pool[labels[pool] == c])
        for k, chunk in zip(holders, np.array_split(members, len(holders))):
            parts[k].append(chunk)
    return [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]


def concept_permutation(seed: int, k: int, num_classes: int) -> np.ndarray:
    """Label permutation of client ``k``; identity for client 0."""
    if k == 0:
        return np.arange(num_classes)
    return np.random.default_rng((seed, k)).permutation(num_classes)


def federate(ds: Dataset, K: int, hetero: HeterogeneityConfig, seed: int,
             new_test_fraction: float = 0.2, local_test_fraction: float = 0.2,
             external_fraction: float = 0.0, external_shift: float = 1.0) -> FederatedData:
    """Carve held-out pools, partition the rest across ``K`` clients, split local tests.

    Order: external pool and new-test pool are drawn from the whole dataset
    first; the remaining pool is partitioned; each client's part is then split
    into train and local-test.
    """
    hetero.validate(ds.num_classes)
    for name, frac in (("new_test_fraction", new_test_fraction), ("local_test_fraction", local_test_fraction)):
        if not 0.0 < frac < 1.0:
            raise ConfigurationError(f"{name} must be in (0, 1)")
    if not 0.0 <= external_fraction < 1.0:
        raise ConfigurationError("external_fraction must be in [0, 1)")
    if K < 1 or len(ds) < K:
        raise ConfigurationError(f"need 1 <= K <= N, got K={K}, N={len(ds)}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_ext = int(round(external_fraction * len(ds)))
    n_new = int(round(new_test_fraction * len(ds)))
    ext_idx = np.sort(perm[:n_ext])
    new_idx = np.sort(perm[n_ext:n_ext + n_new])
    pool = np.sort(perm[n_ext + n_new:])
    if len(pool) < 2 * K:
        raise ConfigurationError("too few samples left for K clients")

    if hetero.kind == "label_skew":
        parts = partition_label_skew(ds.labels, pool, ds.num_classes, K, hetero.s, rng)
    else:
        parts = _uniform_split(pool, K, rng)

    shards = []
    for k, part in enumerate(parts):
        part = rng.permutation(part)
        n_test = max(1, int(round(local_test_fraction * len(part)))) if len(part) > 1 else 0
        test_idx, train_idx = np.sort(part[:n_test]), np.sort(part[n_test:])
        x_tr, y_tr = ds.inputs[train_idx], ds.labels[train_idx]
        x_te, y_te = ds.inputs[test_idx], ds.labels[test_idx]
        label_map = None
        if hetero.kind == "feature_skew" and hetero.strength > 0:
            # same transform for train and local test: it is the client's own distribution
            crng = np.random.default_rng((seed, k, 1))
            x_all = affine_shift(np.concatenate([x_tr, x_te]), hetero.strength, crng)
            x_tr, x_te = x_all[:len(x_tr)], x_all[len(x_tr):]
        elif hetero.kind == "concept_shift":
            label_map = concept_permutation(seed, k, ds.num_classes)
            y_tr, y_te = label_map[y_tr], label_map[y_te]
        shards.append(DatasetShard(k, Dataset(x_tr, y_tr, ds.num_classes), Dataset(x_te, y_te, ds.num_classes),
                                   train_idx, test_idx, label_map))

    external = None
    if n_ext:
        x_ext = affine_shift(ds.inputs[ext_idx], external_shift, np.random.default_rng((seed, 10**6)))
        external = Dataset(x_ext, ds.labels[ext_idx], ds.num_classes)
    info = {"kind": hetero.kind, "s": hetero.s, "strength": hetero.strength, "K": K, "seed": seed,
            "assignment": "least-used class sets per client, class samples split evenly among holders"
            if hetero.kind == "label_skew" else "uniform random split"}
    return FederatedData(shards, ds.subset(new_idx), external, new_idx, ext_idx, info)


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataLoadError(f"{path}: truncated header at byte {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise DataLoadError(f"{path}: bad magic at byte 0")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_TYPES:
        raise DataLoadError(f"{path}: unknown data type 0x{code:02x} at byte 2")
    if ndim < 1:
        raise DataLoadError(f"{path}: zero dimensions at byte 3")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataLoadError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    dtype = np.dtype(_IDX_TYPES[code])
    need = head + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != need:
        raise DataLoadError(f"{path}: payload ends at byte {len(raw)}, expected {need}")
    return np.frombuffer(raw, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v: k for k, v in _IDX_TYPES.items()}
    big = array.dtype.newbyteorder(">").str
    key = ">u1" if array.dtype == np.uint8 else big
    if key not in codes:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, codes[key], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(key).tobytes())


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Images (N×H×W or N×C×H×W) and labels (N) in IDX format; uint8 scaled to [0, 1]."""
    x = read_idx(images_path)
    y = read_idx(labels_path)
    if y.ndim != 1 or len(y) != len(x):
        raise DataLoadError(f"{labels_path}: expected {len(x)} labels, got shape {y.shape}")
    x = x.astype(np.float64)
    if x.max(initial=0) > 1.0:
        x = x / 255.0
    if x.ndim == 3:
        x = x[:, None]
    return _validated(x, y.astype(np.int64), num_classes, labels_path)


def load_csv(path, num_classes: Optional[int] = None) -> Dataset:
    """Rows of ``label,feature,feature,...``; an optional non-numeric header is skipped."""
    labels, rows = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                label = int(row[0])
                feats = [float(v) for v in row[1:]]
            except ValueError:
                if lineno == 1:
                    continue
                raise DataLoadError(f"{path}: non-numeric value on line {lineno}") from None
            if width is None:
                width = len(feats)
            if len(feats) != width or width == 0:
                raise DataLoadError(f"{path}: line {lineno} has {len(feats)} features, expected {width}")
            labels.append(label)
            rows.append(feats)
    if not rows:
        raise DataLoadError(f"{path}: no data rows")
    return _validated(np.asarray(rows, dtype=np.float64), np.asarray(labels, dtype=np.int64), num_classes, path)


def _validated(x, y, num_classes, where) -> Dataset:
    if num_classes is None:
        num_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= num_classes:
        raise DataLoadError(f"{where}: labels outside [0, {num_classes})")
    return Dataset(x, y, num_classes)
