"""Synthetic 2-D classification datasets, deterministic splits and an on-disk cache."""

import hashlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import NasSelectionError
from .prng import CounterRNG

# Train/val/test fractions
SPLIT_RATIOS = (0.4, 0.3, 0.3)
SPLIT_NAMES = ("train", "val", "test")

# Per-class cluster centers for BLOBS_HARD
BLOBS_PER_CLASS = 3


class DatasetError(NasSelectionError):
    """Invalid dataset request or split."""


class DatasetKind(Enum):
    SPIRALS = "SPIRALS"
    MOONS = "MOONS"
    BLOBS_HARD = "BLOBS_HARD"

    @classmethod
    def parse(cls, name: "str | DatasetKind") -> "DatasetKind":
        if isinstance(name, DatasetKind):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise DatasetError(f"invalid dataset kind {name!r} (valid: {valid})") from None


@dataclass
class Dataset:
    kind: DatasetKind
    inputs: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    classes: int
    noise: float
    seed: int

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r} (valid: {', '.join(SPLIT_NAMES)})")
        idx = self.splits[name]
        return self.inputs[idx], self.labels[idx]

    def fingerprint(self) -> str:
        hasher = hashlib.sha256()
        hasher.update(self.inputs.tobytes())
        hasher.update(self.labels.tobytes())
        for name in SPLIT_NAMES:
            hasher.update(self.splits[name].tobytes())
        return hasher.hexdigest()


def class_counts(n: int, classes: int) -> list[int]:
    base, extra = divmod(n, classes)
    return [base + (1 if k < extra else 0) for k in range(classes)]


def _spirals(rng: CounterRNG, counts: list[int]) -> list[np.ndarray]:
    c = len(counts)
    arms = []
    for k, m in enumerate(counts):
        t = rng.uniform((m,))
        r = 0.2 + t
        theta = 2.0 * np.pi * k / c + 2.0 * np.pi * t
        arms.append(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1))
    return arms


def _moons(rng: CounterRNG, counts: list[int]) -> list[np.ndarray]:
    arcs = []
    for k, m in enumerate(counts):
        phi = rng.uniform((m,), 0.0, np.pi)
        sign = -1.0 if k % 2 else 1.0
        x = k + sign * np.cos(phi)
        y = sign * np.sin(phi) + 0.5 * (k % 2)
        arcs.append(np.stack([x, y], axis=1))
    return arcs


def _blobs_hard(rng: CounterRNG, counts: list[int]) -> list[np.ndarray]:
    centers = rng.fork("centers").uniform((len(counts), BLOBS_PER_CLASS, 2), -3.0, 3.0)
    groups = []
    for k, m in enumerate(counts):
        which = rng.integers(BLOBS_PER_CLASS, m)
        groups.append(centers[k, which] + 0.8 * rng.normal((m, 2)))
    return groups


_GENERATORS = {
    DatasetKind.SPIRALS: _spirals,
    DatasetKind.MOONS: _moons,
    DatasetKind.BLOBS_HARD: _blobs_hard,
}


def split_indices(n: int, seed: int) -> dict[str, np.ndarray]:
    """Disjoint train/val/test index sets covering ``range(n)``."""
    perm = CounterRNG(seed).fork("split").permutation(n)
    n_train = round(n * SPLIT_RATIOS[0])
    n_val = round(n * SPLIT_RATIOS[1])
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def make_dataset(
    kind: "str | DatasetKind",
    n: int = 600,
    classes: int = 3,
    noise_level: float = 0.05,
    seed: int = 0,
) -> Dataset:
    """
    Generate a balanced 2-D classification dataset.

    Args:
        kind: SPIRALS, MOONS or BLOBS_HARD
        n: Total samples, at least 10 per class
        classes: Number of classes (>= 2)
        noise_level: Std of isotropic Gaussian noise added to every point
        seed: Generation and split seed

    Returns:
        Dataset with 0.4/0.3/0.3 train/val/test splits
    """
    dataset_kind = DatasetKind.parse(kind)
    if classes < 2:
        raise DatasetError(f"need at least 2 classes, got {classes}")
    if n < 10 * classes:
        raise DatasetError(f"n={n} is below 10 samples per class ({10 * classes})")
    if noise_level < 0:
        raise DatasetError(f"noise_level must be >= 0, got {noise_level}")

    rng = CounterRNG(seed).fork("dataset", dataset_kind.value)
    counts = class_counts(n, classes)
    groups = _GENERATORS[dataset_kind](rng, counts)
    inputs = np.concatenate(groups, axis=0)
    if noise_level > 0:
        inputs = inputs + noise_level * rng.fork("noise").normal(inputs.shape)
    labels = np.concatenate([np.full(m, k, dtype=np.int64) for k, m in enumerate(counts)])

    return Dataset(
        kind=dataset_kind,
        inputs=inputs,
        labels=labels,
        splits=split_indices(n, seed),
        classes=classes,
        noise=float(noise_level),
        seed=seed,
    )


def cache_path(
    cache_dir: Path, kind: "str | DatasetKind", n: int, classes: int, noise: float, seed: int
) -> Path:
    name = DatasetKind.parse(kind).value.lower()
    return cache_dir / f"{name}-n{n}-c{classes}-noise{float(noise)!r}-seed{seed}.npz"


def load_or_make_dataset(
    kind: "str | DatasetKind",
    n: int,
    classes: int,
    noise_level: float,
    seed: int,
    cache_dir: Path | None = None,
) -> Dataset:
    """``make_dataset`` behind an npz cache keyed by (kind, n, classes, noise, seed)."""
    if cache_dir is None:
        return make_dataset(kind, n, classes, noise_level, seed)

    path = cache_path(cache_dir, kind, n, classes, noise_level, seed)
    if path.exists():
        with np.load(path) as cached:
            return Dataset(
                kind=DatasetKind.parse(kind),
                inputs=cached["inputs"],
                labels=cached["labels"],
                splits={name: cached[name] for name in SPLIT_NAMES},
                classes=classes,
                noise=float(noise_level),
                seed=seed,
            )

    dataset = make_dataset(kind, n, classes, noise_level, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, inputs=dataset.inputs, labels=dataset.labels, **dataset.splits)
    return dataset
