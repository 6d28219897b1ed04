"""Shared fixtures: tiny spaces, small datasets and short training recipes."""

from collections.abc import Callable
from dataclasses import replace

import pytest

from scripts.nas_selection.bench import BenchDB, build_bench
from scripts.nas_selection.datasets import Dataset, make_dataset
from scripts.nas_selection.searchspace import CellSpec, build_space
from scripts.nas_selection.selection import SelectConfig, SelectMethod
from scripts.nas_selection.supernet import Supernet
from scripts.nas_selection.trainer import AlphaMode, TrainConfig, bilevel_train

SearchRun = Callable[..., tuple[Supernet, Dataset, SelectConfig]]


@pytest.fixture
def s2p_spec() -> CellSpec:
    return build_space("S2P", num_inputs=2, num_intermediate=2, feature_width=4)


@pytest.fixture
def single_node_spec() -> CellSpec:
    """S2P cell with one intermediate node: 4 genotypes."""
    return build_space("S2P", num_inputs=2, num_intermediate=1, feature_width=4)


@pytest.fixture
def full_spec() -> CellSpec:
    return build_space("FULL", num_inputs=2, num_intermediate=2, feature_width=4)


@pytest.fixture
def small_dataset() -> Dataset:
    return make_dataset("SPIRALS", n=60, classes=3, noise_level=0.05, seed=3)


@pytest.fixture
def short_train() -> TrainConfig:
    return TrainConfig(epochs=2, batch_size=8, lr_w=0.05, lr_alpha=0.3, momentum=0.9, seed=1)


@pytest.fixture
def short_select(short_train: TrainConfig) -> SelectConfig:
    return SelectConfig(method=SelectMethod.PT, finetune_epochs=1, seed=5, train=short_train)


@pytest.fixture
def trained_supernet(
    s2p_spec: CellSpec, small_dataset: Dataset, short_train: TrainConfig
) -> Supernet:
    supernet = Supernet.create(s2p_spec, small_dataset.input_dim, small_dataset.classes, seed=1)
    bilevel_train(supernet, small_dataset, short_train)
    return supernet


# Desk-scale S2P experiment shared by the slow directional tests


@pytest.fixture(scope="session")
def s2p_setup() -> tuple[CellSpec, Dataset, TrainConfig]:
    spec = build_space("S2P", num_inputs=2, num_intermediate=2, feature_width=4)
    dataset = make_dataset("SPIRALS", n=300, classes=3, noise_level=0.05, seed=0)
    return spec, dataset, TrainConfig(epochs=20, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def s2p_bench(s2p_setup: tuple[CellSpec, Dataset, TrainConfig]) -> BenchDB:
    """Every one of the 48 S2P genotypes trained from scratch for three seeds."""
    spec, dataset, train = s2p_setup
    db = build_bench(spec, dataset, train, seeds_per_arch=3)
    assert len(db) == 48
    return db


@pytest.fixture
def search_run(s2p_setup: tuple[CellSpec, Dataset, TrainConfig]) -> SearchRun:
    """``seed -> (searched supernet, dataset, PT config)`` for one search seed."""
    spec, dataset, train = s2p_setup

    def run(
        seed: int, alpha_mode: AlphaMode = AlphaMode.BILEVEL
    ) -> tuple[Supernet, Dataset, SelectConfig]:
        recipe = replace(train, seed=seed, alpha_mode=alpha_mode)
        supernet = Supernet.create(spec, dataset.input_dim, dataset.classes, seed)
        bilevel_train(supernet, dataset, recipe)
        config = SelectConfig(method=SelectMethod.PT, finetune_epochs=2, seed=seed, train=recipe)
        return supernet, dataset, config

    return run
