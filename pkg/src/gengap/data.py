"""Synthetic dataset generation with disjoint training splits.

Every bundle carries K disjoint training sets plus disjoint unlabeled,
dev, and test splits, with labels balanced within one count per class per
split.  Generation is a pure function of the dataset spec.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import ROLE_CENTERS, ROLE_DATASET, mix64, stream

GENERATORS = ("gauss_mixture", "two_moons", "rings")


@dataclass(frozen=True)
class SplitSizes:
    per_train_set: int
    train_sets: int  # K
    unlabeled: int
    dev: int
    test: int

    def __post_init__(self):
        for name in ("per_train_set", "train_sets", "unlabeled", "dev", "test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DatasetSpec:
    generator: str
    seed: int
    sizes: SplitSizes
    classes: int = 2
    dims: int = 2
    sigma: float = 1.0  # gauss_mixture cluster spread
    noise: float = 0.1  # two_moons / rings jitter
    centers_seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.generator != "gauss_mixture":
            object.__setattr__(self, "classes", 2)
            object.__setattr__(self, "dims", 2)
        if self.classes < 2 or self.dims < 1:
            raise ValueError("need at least 2 classes and 1 dimension")


@dataclass
class DatasetBundle:
    spec: DatasetSpec
    features: np.ndarray  # (N, dims)
    labels: np.ndarray  # (N,)
    train_sets: tuple[np.ndarray, ...]  # index arrays, one per k
    unlabeled: np.ndarray
    dev: np.ndarray
    test: np.ndarray

    def train_set(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train_sets[k]
        return self.features[idx], self.labels[idx]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = getattr(self, name)
        return self.features[idx], self.labels[idx]

    def all_splits(self) -> dict[str, np.ndarray]:
        out = {f"train_{k}": idx for k, idx in enumerate(self.train_sets)}
        out.update(unlabeled=self.unlabeled, dev=self.dev, test=self.test)
        return out


def _balanced_counts(size: int, classes: int) -> list[int]:
    base, rem = divmod(size, classes)
    return [base + (1 if c < rem else 0) for c in range(classes)]


def _sample_gauss(spec: DatasetSpec, centers, count_per_class, rng) -> tuple:
    xs, ys = [], []
    for c, count in enumerate(count_per_class):
        xs.append(centers[c] + spec.sigma * rng.standard_normal((count, spec.dims)))
        ys.append(np.full(count, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def _sample_two_moons(spec: DatasetSpec, count_per_class, rng) -> tuple:
    n0, n1 = count_per_class
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    xs = np.concatenate([x0, x1]) + spec.noise * rng.standard_normal((n0 + n1, 2))
    ys = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return xs, ys


def _sample_rings(spec: DatasetSpec, count_per_class, rng) -> tuple:
    radii = (1.0, 0.5)
    xs, ys = [], []
    for c, count in enumerate(count_per_class):
        theta = rng.uniform(0.0, 2.0 * np.pi, count)
        ring = radii[c] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        xs.append(ring + spec.noise * rng.standard_normal((count, 2)))
        ys.append(np.full(count, c, dtype=np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def generate_dataset(spec: DatasetSpec) -> DatasetBundle:
    """Draw all splits from one seed-keyed stream, in a fixed split order,
    so identical specs produce identical bytes."""
    rng = stream(mix64(spec.seed, ROLE_DATASET))
    centers = None
    if spec.generator == "gauss_mixture":
        centers = stream(mix64(spec.centers_seed, ROLE_CENTERS)).standard_normal(
            (spec.classes, spec.dims)
        )

    split_sizes = [spec.sizes.per_train_set] * spec.sizes.train_sets + [
        spec.sizes.unlabeled,
        spec.sizes.dev,
        spec.sizes.test,
    ]
    feature_parts, label_parts, index_parts = [], [], []
    offset = 0
    for size in split_sizes:
        counts = _balanced_counts(size, spec.classes)
        if spec.generator == "gauss_mixture":
            xs, ys = _sample_gauss(spec, centers, counts, rng)
        elif spec.generator == "two_moons":
            xs, ys = _sample_two_moons(spec, counts, rng)
        else:
            xs, ys = _sample_rings(spec, counts, rng)
        perm = rng.permutation(size)
        feature_parts.append(xs[perm])
        label_parts.append(ys[perm])
        index_parts.append(np.arange(offset, offset + size))
        offset += size

    k = spec.sizes.train_sets
    return DatasetBundle(
        spec=spec,
        features=np.concatenate(feature_parts),
        labels=np.concatenate(label_parts),
        train_sets=tuple(index_parts[:k]),
        unlabeled=index_parts[k],
        dev=index_parts[k + 1],
        test=index_parts[k + 2],
    )


def save_dataset(bundle: DatasetBundle, path: str) -> None:
    arrays = {
        "features": bundle.features,
        "labels": bundle.labels,
        "unlabeled": bundle.unlabeled,
        "dev": bundle.dev,
        "test": bundle.test,
    }
    for i, idx in enumerate(bundle.train_sets):
        arrays[f"train_{i}"] = idx
    np.savez(path, **arrays)


def load_dataset(spec: DatasetSpec, path: str) -> DatasetBundle:
    with np.load(path) as data:
        train_sets = tuple(
            data[f"train_{i}"] for i in range(spec.sizes.train_sets)
        )
        return DatasetBundle(
            spec=spec,
            features=data["features"],
            labels=data["labels"],
            train_sets=train_sets,
            unlabeled=data["unlabeled"],
            dev=data["dev"],
            test=data["test"],
        )
