from dataclasses import replace

import numpy as np
import pytest

from scripts.nas_selection.autodiff import OptState
from scripts.nas_selection.checkpoint import load_checkpoint, save_checkpoint
from scripts.nas_selection.datasets import make_dataset
from scripts.nas_selection.searchspace import Edge, OpKind, enumerate_genotypes, genotype_to_string
from scripts.nas_selection.supernet import Supernet
from scripts.nas_selection.trainer import (
    AlphaMode,
    TrainConfig,
    TrainerError,
    TrainingProgress,
    alpha_step,
    bilevel_train,
    evaluate,
    fine_tune,
    recipe_hash,
    train_from_scratch,
    weight_step,
)


def _supernet(spec, dataset, seed=1):
    return Supernet.create(spec, dataset.input_dim, dataset.classes, seed)


def test_runlog_has_epoch_zero_and_every_epoch(s2p_spec, small_dataset, short_train):
    log = bilevel_train(_supernet(s2p_spec, small_dataset), small_dataset, short_train)
    assert [r.epoch for r in log.records] == [0, 1, 2]
    assert log.initial.alpha["0->2"] == [0.0, 0.0]
    assert log.initial.skip_conv_gap == 0.0
    assert all(0.0 <= r.val_accuracy <= 1.0 for r in log.records)


def test_bilevel_moves_alpha(trained_supernet):
    moved = [np.any(t.data != 0) for t in trained_supernet.alpha_table.alpha.values()]
    assert all(moved)


def test_training_is_bit_reproducible(s2p_spec, small_dataset, short_train):
    a = _supernet(s2p_spec, small_dataset)
    b = _supernet(s2p_spec, small_dataset)
    bilevel_train(a, small_dataset, short_train)
    bilevel_train(b, small_dataset, short_train)
    assert a.checksum() == b.checksum()


def test_fixed_zero_keeps_alpha_exactly_zero(s2p_spec, small_dataset, short_train):
    config = replace(short_train, alpha_mode=AlphaMode.FIXED_ZERO)
    supernet = _supernet(s2p_spec, small_dataset)
    log = bilevel_train(supernet, small_dataset, config)
    for record in log.records:
        assert all(values == [0.0, 0.0] for values in record.alpha.values())
        assert record.skip_conv_gap == 0.0
    assert supernet.alpha_table.frozen
    assert supernet.alpha_table.trainable() == {}


def test_zero_sigma_random_smoothing_equals_bilevel(s2p_spec, small_dataset, short_train):
    plain = _supernet(s2p_spec, small_dataset)
    smoothed = _supernet(s2p_spec, small_dataset)
    bilevel_train(plain, small_dataset, short_train)
    bilevel_train(
        smoothed, small_dataset, replace(short_train, alpha_mode=AlphaMode.SDARTS_RS, rs_sigma=0.0)
    )
    assert plain.checksum() == smoothed.checksum()


def test_random_smoothing_perturbs_weight_steps(s2p_spec, small_dataset, short_train):
    plain = _supernet(s2p_spec, small_dataset)
    smoothed = _supernet(s2p_spec, small_dataset)
    bilevel_train(plain, small_dataset, short_train)
    bilevel_train(
        smoothed, small_dataset, replace(short_train, alpha_mode=AlphaMode.SDARTS_RS, rs_sigma=0.5)
    )
    assert plain.checksum() != smoothed.checksum()


def test_strict_validation_needs_positive_sigma(short_train):
    config = replace(short_train, alpha_mode=AlphaMode.SDARTS_RS, rs_sigma=0.0)
    config.validate()
    with pytest.raises(TrainerError):
        config.validate(strict=True)
    with pytest.raises(TrainerError):
        replace(short_train, batch_size=0).validate()


def test_fine_tune_zero_epochs_is_identity(trained_supernet, small_dataset, short_train):
    before = trained_supernet.checksum()
    log = fine_tune(trained_supernet, small_dataset, short_train, epochs=0)
    assert trained_supernet.checksum() == before
    assert len(log) == 1
    with pytest.raises(TrainerError):
        fine_tune(trained_supernet, small_dataset, short_train, epochs=-1)


def test_fine_tune_leaves_decided_edges_alone(trained_supernet, small_dataset, short_train):
    edge = Edge(2, 0)
    trained_supernet.discretize_edge(edge, OpKind.SKIP)
    alpha = trained_supernet.alpha_table.alpha[edge].data.copy()
    unused = trained_supernet.weights["edge.0->2.dense_relu.w"].data.copy()
    other = trained_supernet.alpha_table.alpha[Edge(3, 2)].data.copy()
    fine_tune(trained_supernet, small_dataset, short_train, epochs=1)
    assert np.array_equal(trained_supernet.alpha_table.alpha[edge].data, alpha)
    assert np.array_equal(trained_supernet.weights["edge.0->2.dense_relu.w"].data, unused)
    assert not np.array_equal(trained_supernet.alpha_table.alpha[Edge(3, 2)].data, other)


def test_fine_tune_without_alpha_updates(trained_supernet, small_dataset, short_train):
    config = replace(short_train, finetune_alpha=False)
    snapshot = trained_supernet.alpha_table.snapshot()
    fine_tune(trained_supernet, small_dataset, config, epochs=1)
    assert trained_supernet.alpha_table.snapshot() == snapshot


def test_empty_val_split_rejected_for_bilevel(s2p_spec, small_dataset, short_train):
    splits = dict(small_dataset.splits, val=np.array([], dtype=np.int64))
    dataset = replace(small_dataset, splits=splits)
    with pytest.raises(TrainerError):
        bilevel_train(_supernet(s2p_spec, dataset), dataset, short_train)


def test_width_mismatch_rejected(s2p_spec, small_dataset, short_train):
    supernet = Supernet.create(s2p_spec, 3, small_dataset.classes, 0)
    with pytest.raises(TrainerError):
        bilevel_train(supernet, small_dataset, short_train)


def test_evaluate_does_not_touch_the_model(trained_supernet, small_dataset):
    before = trained_supernet.checksum()
    accuracy, loss = evaluate(trained_supernet, small_dataset, "test")
    assert 0.0 <= accuracy <= 1.0
    assert loss > 0.0
    assert evaluate(trained_supernet, small_dataset, "test") == (accuracy, loss)
    assert trained_supernet.checksum() == before


def test_recipe_hash_ignores_seed_only(small_dataset, short_train):
    base = recipe_hash(short_train, small_dataset)
    assert recipe_hash(replace(short_train, seed=99), small_dataset) == base
    assert recipe_hash(replace(short_train, epochs=3), small_dataset) != base
    other = make_dataset("SPIRALS", n=60, classes=3, noise_level=0.05, seed=4)
    assert recipe_hash(short_train, other) != base


def test_train_from_scratch(single_node_spec, small_dataset, short_train):
    genotype = enumerate_genotypes(single_node_spec)[0]
    record = train_from_scratch(single_node_spec, genotype, small_dataset, short_train)
    again = train_from_scratch(single_node_spec, genotype, small_dataset, short_train)
    assert record.genotype == genotype_to_string(genotype)
    assert record.seeds == [short_train.seed]
    assert record.test_accuracy == again.test_accuracy
    assert record.config_hash == recipe_hash(short_train, small_dataset)


def _batch(dataset, split, n=8):
    x, y = dataset.split(split)
    return x[:n], y[:n]


def test_weight_step_never_touches_alpha(trained_supernet, small_dataset, short_train):
    table = trained_supernet.alpha_table
    alpha_bits = {e: t.data.tobytes() for e, t in table.alpha.items()}
    weights = {n: t.data.copy() for n, t in trained_supernet.weights.items()}
    state = OptState(short_train.lr_w, short_train.lr_alpha, short_train.momentum)
    constants = {e: t.detach() for e, t in table.alpha.items()}
    weight_step(trained_supernet, _batch(small_dataset, "train"), ("t",), constants, state, 1)
    assert {e: t.data.tobytes() for e, t in table.alpha.items()} == alpha_bits
    moved = [n for n, t in trained_supernet.weights.items() if np.any(t.data != weights[n])]
    assert "head.w" in moved
    assert state.step_count == 1
    assert state.alpha_step_count == 0


def test_alpha_step_never_touches_weights(trained_supernet, small_dataset, short_train):
    table = trained_supernet.alpha_table
    weight_bits = {n: t.data.tobytes() for n, t in trained_supernet.weights.items()}
    alpha = {e: t.data.copy() for e, t in table.alpha.items()}
    state = OptState(short_train.lr_w, short_train.lr_alpha, short_train.momentum)
    alpha_step(trained_supernet, _batch(small_dataset, "val"), ("t",), state, 1)
    assert {n: t.data.tobytes() for n, t in trained_supernet.weights.items()} == weight_bits
    assert all(np.any(t.data != alpha[e]) for e, t in table.alpha.items())
    assert state.velocity == {}
    assert state.alpha_step_count == 1


def test_resume_continues_bit_identically(s2p_spec, small_dataset, short_train, tmp_path):
    config = replace(short_train, epochs=3)
    saved = {}

    def keep_epoch_one(record, supernet, progress):
        if record.epoch == 1:
            saved["path"] = save_checkpoint(
                supernet,
                tmp_path / "epoch_1.json",
                prng_state=progress.prng_state(),
                optimizer=progress.optimizer,
            )

    uninterrupted = _supernet(s2p_spec, small_dataset)
    log = bilevel_train(uninterrupted, small_dataset, config, on_epoch=keep_epoch_one)

    restored, info = load_checkpoint(saved["path"])
    resume = TrainingProgress.restore(info.prng, info.optimizer)
    assert resume.epoch == 1
    tail = bilevel_train(restored, small_dataset, config, resume=resume)
    assert restored.checksum() == uninterrupted.checksum()
    assert [r.epoch for r in tail.records] == [2, 3]
    assert [r.train_loss for r in tail.records] == [r.train_loss for r in log.records[2:]]


def test_resume_rejects_another_run(s2p_spec, small_dataset, short_train):
    supernet = _supernet(s2p_spec, small_dataset)
    state = OptState(short_train.lr_w, short_train.lr_alpha, short_train.momentum)
    foreign = TrainingProgress.restore({"seed": 5, "counter": 1}, state)
    with pytest.raises(TrainerError):
        bilevel_train(supernet, small_dataset, short_train, resume=foreign)


@pytest.mark.slow
def test_search_improves_accuracy_and_widens_skip_gap(s2p_spec):
    dataset = make_dataset("SPIRALS", n=600, classes=3, noise_level=0.05, seed=0)
    config = TrainConfig(epochs=60, batch_size=64, seed=0)
    log = bilevel_train(_supernet(s2p_spec, dataset, seed=0), dataset, config)
    assert log.final.val_accuracy > log.initial.val_accuracy
    assert log.final.skip_conv_gap > log.initial.skip_conv_gap
