import numpy as np
import pytest

from scripts.nas_selection.datasets import (
    DatasetError,
    DatasetKind,
    cache_path,
    class_counts,
    load_or_make_dataset,
    make_dataset,
    split_indices,
)


def test_default_split_sizes():
    dataset = make_dataset("SPIRALS", n=600, classes=3, seed=7)
    sizes = [len(dataset.splits[name]) for name in ("train", "val", "test")]
    assert sizes == [240, 180, 180]


def test_splits_are_disjoint_and_cover_everything():
    splits = split_indices(101, seed=2)
    joined = np.concatenate(list(splits.values()))
    assert sorted(joined.tolist()) == list(range(101))


@pytest.mark.parametrize("kind", list(DatasetKind))
def test_generation_is_deterministic(kind):
    a = make_dataset(kind, n=90, classes=3, noise_level=0.1, seed=7)
    b = make_dataset(kind, n=90, classes=3, noise_level=0.1, seed=7)
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.fingerprint() == b.fingerprint()
    other = make_dataset(kind, n=90, classes=3, noise_level=0.1, seed=8)
    assert a.fingerprint() != other.fingerprint()


def test_classes_are_balanced():
    dataset = make_dataset("MOONS", n=100, classes=3, seed=0)
    counts = np.bincount(dataset.labels)
    assert counts.max() - counts.min() <= 1
    assert class_counts(100, 3) == [34, 33, 33]


def test_noiseless_spirals_are_separable_by_nearest_neighbour():
    dataset = make_dataset("SPIRALS", n=600, classes=3, noise_level=0.0, seed=1)
    x_train, y_train = dataset.split("train")
    x_test, y_test = dataset.split("test")
    distances = ((x_test[:, None, :] - x_train[None, :, :]) ** 2).sum(axis=2)
    predicted = y_train[np.argmin(distances, axis=1)]
    assert np.mean(predicted == y_test) >= 0.99


@pytest.mark.parametrize(
    "kwargs",
    [
        {"kind": "RINGS"},
        {"kind": "SPIRALS", "classes": 1},
        {"kind": "SPIRALS", "n": 20, "classes": 3},
        {"kind": "SPIRALS", "noise_level": -0.1},
    ],
)
def test_invalid_requests(kwargs):
    with pytest.raises(DatasetError):
        make_dataset(**kwargs)


def test_unknown_split():
    with pytest.raises(DatasetError):
        make_dataset("SPIRALS", n=60).split("holdout")


def test_cache_round_trip(tmp_path):
    made = load_or_make_dataset("BLOBS_HARD", 60, 3, 0.05, 4, cache_dir=tmp_path)
    assert cache_path(tmp_path, "BLOBS_HARD", 60, 3, 0.05, 4).exists()
    cached = load_or_make_dataset("BLOBS_HARD", 60, 3, 0.05, 4, cache_dir=tmp_path)
    assert cached.fingerprint() == made.fingerprint()
    assert cached.kind is DatasetKind.BLOBS_HARD
