"""Datasets, synthetic data and IID / label-skewed partitioning across vehicles."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.samples.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.samples[idx], self.labels[idx], self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class Partition:
    """Per-vehicle index lists into one dataset; vehicle ``n`` owns ``indices[n]``."""

    indices: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.indices]

    def validate(self, dataset_size: int) -> None:
        seen = np.concatenate(self.indices) if self.indices else np.zeros(0, np.int64)
        if any(len(ix) == 0 for ix in self.indices):
            raise DataError("every vehicle needs at least one sample")
        if seen.size and (seen.min() < 0 or seen.max() >= dataset_size):
            raise DataError("partition index out of bounds")
        if np.unique(seen).size != seen.size:
            raise DataError("partition indices overlap")

    def to_json(self) -> str:
        return json.dumps({str(n): ix.tolist() for n, ix in enumerate(self.indices)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Partition":
        raw = json.loads(text)
        return cls(tuple(np.asarray(raw[str(n)], dtype=np.int64) for n in range(len(raw))))


# ---------------------------------------------------------------------------
# CSV: one row per sample, "label,pix0,pix1,..."


def load_csv(path, input_shape, num_classes: int) -> Dataset:
    path = Path(path)
    width = math.prod(input_shape)
    labels, rows = [], []
    try:
        with path.open(newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row:
                    continue
                if len(row) != width + 1:
                    raise DataError(f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}")
                label = int(row[0])
                if not 0 <= label < num_classes:
                    raise DataError(f"{path}:{lineno}: label {label} outside [0, {num_classes})")
                labels.append(label)
                rows.append([float(v) for v in row[1:]])
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    samples = np.asarray(rows, dtype=np.float64).reshape(-1, *input_shape)
    if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
        raise DataError(f"{path}: pixel values must lie in [0, 1]")
    return Dataset(samples, np.asarray(labels, dtype=np.int64), num_classes)


def write_csv(ds: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(ds.samples.reshape(len(ds), -1), ds.labels):
            w.writerow([int(y), *(repr(float(v)) for v in x)])


# ---------------------------------------------------------------------------
# generators and partitioners


def synth_dataset(num_classes: int, per_class: int, input_shape, seed: int,
                  noise: float = 0.3) -> Dataset:
    """Class ``k`` is a fixed random template plus Gaussian noise, clipped to [0, 1]."""
    if num_classes < 1 or per_class < 1:
        raise DataError("num_classes and per_class must be positive")
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    templates = rng.uniform(0.0, 1.0, size=(num_classes, *shape))
    noise_arr = rng.normal(0.0, noise, size=(num_classes, per_class, *shape))
    samples = np.clip(templates[:, None] + noise_arr, 0.0, 1.0).reshape(-1, *shape)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(samples, labels, num_classes)


def train_test_split(ds: Dataset, test_per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split holding out ``test_per_class`` samples of every class."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for k in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == k))
        if len(idx) <= test_per_class:
            raise DataError(f"class {k} has {len(idx)} samples, cannot hold out {test_per_class}")
        test.append(idx[:test_per_class])
        train.append(idx[test_per_class:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


def partition_iid(ds: Dataset, n_vehicles: int, seed: int) -> Partition:
    if len(ds) == 0:
        raise DataError("cannot partition an empty dataset")
    if len(ds) < n_vehicles:
        raise DataError(f"{len(ds)} samples cannot cover {n_vehicles} vehicles")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return Partition(tuple(np.sort(p) for p in np.array_split(perm, n_vehicles)))


def _draw_label_sets(rng, n_vehicles, num_classes, m, tries=1000):
    sets = None
    for _ in range(tries):
        sets = [np.sort(rng.choice(num_classes, size=m, replace=False)) for _ in range(n_vehicles)]
        if n_vehicles * m < num_classes or np.unique(np.concatenate(sets)).size == num_classes:
            return sets
    # coverage repair: hand uncovered labels to vehicles holding a label twice-covered
    sets = [list(s) for s in sets]
    for k in range(num_classes):
        counts = np.bincount(np.concatenate(sets), minlength=num_classes)
        if counts[k]:
            continue
        for s in sets:
            dup = [x for x in s if counts[x] > 1]
            if dup:
                s[s.index(dup[0])] = k
                break
    return [np.sort(np.asarray(s)) for s in sets]


def _quotas(size: int, m: int) -> np.ndarray:
    q = np.full(m, size // m)
    q[: size % m] += 1
    return q


def power_law_sizes(total: int, n_vehicles: int, alpha: float) -> np.ndarray:
    """Split ``total`` into ``n_vehicles`` integer sizes proportional to ``rank**-alpha``."""
    w = np.arange(1, n_vehicles + 1, dtype=np.float64) ** (-alpha)
    exact = total * w / w.sum()
    sizes = np.floor(exact).astype(np.int64)
    rest = total - sizes.sum()
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[:rest]] += 1
    return sizes


def partition_noniid(ds: Dataset, n_vehicles: int, labels_per_vehicle: int, power_alpha: float,
                     seed: int) -> Partition:
    """Label-skewed partition with power-law vehicle sizes.

    Each vehicle holds ``labels_per_vehicle`` distinct labels drawn uniformly
    without replacement; vehicle ``n`` gets a share proportional to
    ``(n + 1) ** -power_alpha`` of the largest total the label pools can supply.
    """
    if len(ds) == 0:
        raise DataError("cannot partition an empty dataset")
    m = labels_per_vehicle
    if not 1 <= m <= ds.num_classes:
        raise DataError(f"labels_per_vehicle must lie in [1, {ds.num_classes}]")
    rng = np.random.default_rng(seed)
    label_sets = _draw_label_sets(rng, n_vehicles, ds.num_classes, m)
    supply = ds.class_counts()

    w = np.arange(1, n_vehicles + 1, dtype=np.float64) ** (-power_alpha)
    share = np.zeros(ds.num_classes)
    for s, wn in zip(label_sets, w):
        share[s] += wn / (m * w.sum())
    used = share > 0
    total = int(min(len(ds), np.floor(np.min(supply[used] / share[used]))))

    def demand(sizes):
        d = np.zeros(ds.num_classes, dtype=np.int64)
        for s, size in zip(label_sets, sizes):
            d[s] += _quotas(int(size), m)
        return d

    sizes = np.zeros(n_vehicles, dtype=np.int64)
    while total > 0:
        sizes = power_law_sizes(total, n_vehicles, power_alpha)
        if np.all(demand(sizes) <= supply):
            break
        total -= 1
    # every vehicle must see each of its labels at least once
    if total <= 0 or np.any(sizes < m):
        raise DataError("not enough samples in the chosen labels to give every vehicle data")

    pools = {k: list(rng.permutation(np.flatnonzero(ds.labels == k))) for k in range(ds.num_classes)}
    out = []
    for s, size in zip(label_sets, sizes):
        idx = []
        for k, q in zip(s, _quotas(int(size), m)):
            idx.extend(pools[k][:q])
            del pools[k][:q]
        out.append(np.sort(np.asarray(idx, dtype=np.int64)))
    return Partition(tuple(out))


def label_sets(ds: Dataset, part: Partition) -> list[set[int]]:
    return [set(np.unique(ds.labels[ix]).tolist()) for ix in part.indices]
