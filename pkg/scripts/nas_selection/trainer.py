"""Bilevel supernet training, fine-tuning, evaluation and from-scratch genotype training."""

import hashlib
import json
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, replace
from enum import Enum
from functools import partial
from typing import Any, Protocol

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .autodiff import OptState, Tape, Tensor
from .datasets import Dataset
from .errors import NasSelectionError, NumericError
from .networks import EVAL_NOISE_KEY, GenotypeNetwork
from .prng import CounterRNG
from .records import BenchRecord, EpochRecord, RunLog
from .searchspace import CellSpec, Edge, Genotype, genotype_to_string
from .supernet import Supernet


class TrainerError(NasSelectionError):
    """Invalid training request."""


class TrainingDivergedError(TrainerError, NumericError):
    """Loss or gradient became non-finite."""

    def __init__(self, epoch: int, detail: str = ""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))


class AlphaMode(Enum):
    BILEVEL = "BILEVEL"
    FIXED_ZERO = "FIXED_ZERO"
    SDARTS_RS = "SDARTS_RS"


class RsSchedule(Enum):
    BATCH = "batch"
    EPOCH = "epoch"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    lr_w: float = 0.05
    lr_alpha: float = 0.3
    momentum: float = 0.9
    alpha_mode: AlphaMode = AlphaMode.BILEVEL
    rs_sigma: float = 0.3
    rs_schedule: RsSchedule = RsSchedule.BATCH
    finetune_epochs: int = 5
    finetune_alpha: bool = True
    seed: int = 0

    def validate(self, strict: bool = False) -> None:
        """
        Check ranges. ``strict`` additionally requires ``rs_sigma > 0`` in SDARTS_RS mode;
        the library accepts zero so the mode can be compared against BILEVEL.
        """
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise TrainerError("epochs and finetune_epochs must be >= 0")
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_w <= 0 or self.lr_alpha <= 0:
            raise TrainerError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainerError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.rs_sigma < 0:
            raise TrainerError(f"rs_sigma must be >= 0, got {self.rs_sigma}")
        if strict and self.alpha_mode is AlphaMode.SDARTS_RS and self.rs_sigma <= 0:
            raise TrainerError("SDARTS_RS needs rs_sigma > 0")

    def to_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["alpha_mode"] = self.alpha_mode.value
        values["rs_schedule"] = self.rs_schedule.value
        return values


def recipe_hash(config: TrainConfig, dataset: Dataset) -> str:
    """SHA-256 binding a result to its training recipe and data (seed excluded)."""
    recipe = config.to_dict()
    recipe.pop("seed")
    payload = {
        "train": recipe,
        "dataset": {
            "kind": dataset.kind.value,
            "n": int(dataset.inputs.shape[0]),
            "classes": dataset.classes,
            "noise": dataset.noise,
            "seed": dataset.seed,
            "fingerprint": dataset.fingerprint(),
        },
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class Model(Protocol):
    def parameters(self) -> dict[str, Tensor]: ...

    def forward(self, x: Tensor, noise_key: Sequence[object] = ...) -> Tensor: ...


def evaluate(model: Model | Supernet, dataset: Dataset, split: str = "val") -> tuple[float, float]:
    """
    One deterministic full-split pass without recording.

    Returns:
        (accuracy, mean cross-entropy loss)
    """
    x, y = dataset.split(split)
    if len(y) == 0:
        raise TrainerError(f"split {split!r} is empty")
    with ad.no_tape():
        logits = model.forward(Tensor(x), EVAL_NOISE_KEY)
        loss = ad.cross_entropy(logits, y).item()
    accuracy = float(np.mean(np.argmax(logits.data, axis=1) == y))
    return accuracy, loss


def _batches(n: int, batch_size: int, rng: CounterRNG) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _loss_and_grads(
    forward: Callable[[], Tensor], labels: np.ndarray, wrt: Mapping[str, Tensor], epoch: int
) -> tuple[float, dict[str, np.ndarray]]:
    try:
        with Tape():
            loss = ad.cross_entropy(forward(), labels)
        grads = ad.backward(loss, wrt=wrt.values())
    except NumericError as e:
        raise TrainingDivergedError(epoch, str(e)) from e
    return loss.item(), {name: grads[t] for name, t in wrt.items()}


def _snapshot(
    supernet: Supernet, dataset: Dataset, epoch: int, loss: float, t0: float
) -> EpochRecord:
    return EpochRecord(
        epoch=epoch,
        train_loss=loss,
        val_accuracy=evaluate(supernet, dataset, "val")[0],
        alpha=supernet.alpha_table.snapshot(),
        skip_conv_gap=supernet.skip_conv_gap() if supernet.has_gap() else None,
        wall_time=time.perf_counter() - t0,
    )


@dataclass
class TrainingProgress:
    """
    Resumable position of a supernet training run after ``epoch`` completed epochs.

    ``rng`` is the run's base stream; every batch order and noise draw of epoch
    ``e`` is forked from it by ``e``, so ``(rng.seed, epoch)`` fixes the rest of
    the run. ``optimizer`` carries the momentum buffers and step counters.
    """

    epoch: int
    rng: CounterRNG
    optimizer: OptState

    def prng_state(self) -> dict[str, int]:
        return {"seed": self.rng.seed, "counter": self.epoch}

    @classmethod
    def restore(cls, prng_state: Mapping[str, int], optimizer: OptState) -> "TrainingProgress":
        epoch = int(prng_state["counter"])
        return cls(epoch, CounterRNG(int(prng_state["seed"])), optimizer)


EpochCallback = Callable[[EpochRecord, Supernet, TrainingProgress], None]


def weight_step(
    supernet: Supernet,
    batch: tuple[np.ndarray, np.ndarray],
    noise_key: Sequence[object],
    alpha: Mapping[Edge, Tensor],
    state: OptState,
    epoch: int,
) -> float:
    """
    One SGD+momentum step on the live weights with ``alpha`` held constant.

    ``alpha`` must hold constants (detached or perturbed copies); the stored α
    tensors are never read as leaves, so no α bit changes.
    """
    weights = supernet.trainable_weights()
    forward = partial(supernet.forward, Tensor(batch[0]), noise_key, alpha=alpha)
    loss, grads = _loss_and_grads(forward, batch[1], weights, epoch)
    ad.sgd_momentum_step(weights, grads, state)
    return loss


def alpha_step(
    supernet: Supernet,
    batch: tuple[np.ndarray, np.ndarray],
    noise_key: Sequence[object],
    state: OptState,
    epoch: int,
) -> float:
    """One gradient step on the trainable α with every weight detached."""
    alphas = supernet.alpha_table.trainable()
    frozen = {name: t.detach() for name, t in supernet.weights.items()}
    forward = partial(supernet.forward, Tensor(batch[0]), noise_key, weights=frozen)
    loss, grads = _loss_and_grads(forward, batch[1], alphas, epoch)
    ad.gradient_step(alphas, grads, state)
    return loss


def _perturbed_alpha(supernet: Supernet, rng: CounterRNG, sigma: float) -> dict[Edge, Tensor]:
    table = supernet.alpha_table
    return {
        e: Tensor(table.alpha[e].data + sigma * rng.normal(table.alpha[e].shape))
        for e in supernet.spec.edges
    }


def _run_supernet_epochs(
    supernet: Supernet,
    dataset: Dataset,
    config: TrainConfig,
    epochs: int,
    stream: Sequence[object],
    update_alpha: bool,
    verbose: bool,
    on_epoch: EpochCallback | None,
    resume: TrainingProgress | None = None,
) -> RunLog:
    if supernet.input_dim != dataset.input_dim:
        raise TrainerError(
            f"supernet expects width {supernet.input_dim}, dataset has {dataset.input_dim}"
        )
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    if len(y_train) == 0:
        raise TrainerError("train split is empty")
    update_alpha = update_alpha and bool(supernet.alpha_table.trainable())
    if update_alpha and len(y_val) == 0:
        raise TrainerError("val split is empty; α updates need validation batches")

    base = CounterRNG(config.seed).fork(*stream)
    state = OptState(config.lr_w, config.lr_alpha, config.momentum)
    start = 0
    if resume is not None:
        if resume.rng.seed != base.seed:
            raise TrainerError("resume state belongs to a run with a different seed or stream")
        if not 0 <= resume.epoch <= epochs:
            raise TrainerError(f"cannot resume at epoch {resume.epoch} of {epochs}")
        state.step_count = resume.optimizer.step_count
        state.alpha_step_count = resume.optimizer.alpha_step_count
        state.velocity = {name: v.copy() for name, v in resume.optimizer.velocity.items()}
        start = resume.epoch
    progress = TrainingProgress(start, base, state)
    sdarts = config.alpha_mode is AlphaMode.SDARTS_RS

    t0 = time.perf_counter()
    log = RunLog()
    if resume is None:
        start_loss = evaluate(supernet, dataset, "train")[1]
        log.append(_snapshot(supernet, dataset, 0, start_loss, t0))
        if on_epoch is not None:
            on_epoch(log.final, supernet, progress)

    bar = tqdm(range(start + 1, epochs + 1), desc="epochs", disable=not verbose, leave=False)
    for epoch in bar:
        train_batches = _batches(len(y_train), config.batch_size, base.fork("train", epoch))
        val_batches = (
            _batches(len(y_val), config.batch_size, base.fork("val", epoch)) if update_alpha else []
        )
        losses = []
        for b, idx in enumerate(train_batches):
            noise_key = (*stream, epoch, b)
            if sdarts:
                key = ("rs", epoch) if config.rs_schedule is RsSchedule.EPOCH else ("rs", epoch, b)
                alpha_w = _perturbed_alpha(supernet, base.fork(*key), config.rs_sigma)
            else:
                alpha_w = {e: t.detach() for e, t in supernet.alpha_table.alpha.items()}

            batch = (x_train[idx], y_train[idx])
            losses.append(weight_step(supernet, batch, noise_key, alpha_w, state, epoch))
            if update_alpha:
                vidx = val_batches[b % len(val_batches)]
                val_batch = (x_val[vidx], y_val[vidx])
                alpha_step(supernet, val_batch, (*noise_key, "val"), state, epoch)

        record = _snapshot(supernet, dataset, epoch, float(np.mean(losses)), t0)
        log.append(record)
        progress.epoch = epoch
        if on_epoch is not None:
            on_epoch(record, supernet, progress)
        if verbose:
            bar.set_postfix(loss=f"{record.train_loss:.4f}", val=f"{record.val_accuracy:.3f}")
    return log


def bilevel_train(
    supernet: Supernet,
    dataset: Dataset,
    config: TrainConfig,
    verbose: bool = False,
    on_epoch: EpochCallback | None = None,
    resume: TrainingProgress | None = None,
) -> RunLog:
    """
    First-order alternating optimisation of weights (train batches) and α (val batches).

    Each batch takes one SGD+momentum step on the weights with α held constant
    (perturbed by N(0, rs_sigma^2) in SDARTS_RS mode) and then one gradient step
    on α with the weights held constant. FIXED_ZERO zeroes and freezes α first.

    Args:
        supernet: Trained in place
        dataset: Source of train and val batches
        config: Training recipe
        verbose: Show a progress bar
        on_epoch: Called with each epoch record (epoch 0 included) and the run's
            progress, e.g. to checkpoint
        resume: Progress saved with a checkpoint of ``supernet``; training continues
            from the epoch after it, bit-identically to an uninterrupted run

    Returns:
        RunLog with an epoch-0 record followed by one record per epoch; a resumed
        run logs only the epochs it trained
    """
    config.validate()
    if config.alpha_mode is AlphaMode.FIXED_ZERO:
        supernet.alpha_table.zero_and_freeze()
    return _run_supernet_epochs(
        supernet,
        dataset,
        config,
        config.epochs,
        stream=("search",),
        update_alpha=config.alpha_mode is not AlphaMode.FIXED_ZERO,
        verbose=verbose,
        on_epoch=on_epoch,
        resume=resume,
    )


def fine_tune(
    supernet: Supernet,
    dataset: Dataset,
    config: TrainConfig,
    epochs: int,
    stream: Sequence[object] = ("finetune",),
    verbose: bool = False,
) -> RunLog:
    """
    Continue training a partially decided supernet.

    Weights of live ops keep training; undecided α keep training unless
    ``config.finetune_alpha`` is off or α is frozen. ``epochs=0`` leaves the
    supernet untouched.
    """
    if epochs < 0:
        raise TrainerError(f"fine-tune epochs must be >= 0, got {epochs}")
    return _run_supernet_epochs(
        supernet,
        dataset,
        replace(config, epochs=epochs),
        epochs,
        stream=stream,
        update_alpha=config.finetune_alpha and config.alpha_mode is not AlphaMode.FIXED_ZERO,
        verbose=verbose,
        on_epoch=None,
    )


def train_weights(
    model: Model,
    dataset: Dataset,
    config: TrainConfig,
    epochs: int | None = None,
    stream: Sequence[object] = ("weights",),
) -> RunLog:
    """Plain SGD+momentum on every parameter of a discrete network."""
    x_train, y_train = dataset.split("train")
    if len(y_train) == 0:
        raise TrainerError("train split is empty")
    epochs = config.epochs if epochs is None else epochs
    base = CounterRNG(config.seed).fork(*stream)
    state = OptState(config.lr_w, config.lr_alpha, config.momentum)
    params = model.parameters()

    t0 = time.perf_counter()
    log = RunLog()
    start_loss = evaluate(model, dataset, "train")[1]
    log.append(EpochRecord(0, start_loss, evaluate(model, dataset, "val")[0], {}, None, 0.0))
    for epoch in range(1, epochs + 1):
        losses = []
        batches = _batches(len(y_train), config.batch_size, base.fork("train", epoch))
        for b, idx in enumerate(batches):
            xb = Tensor(x_train[idx])
            noise_key = (*stream, epoch, b)
            loss, grads = _loss_and_grads(
                partial(model.forward, xb, noise_key), y_train[idx], params, epoch
            )
            losses.append(loss)
            ad.sgd_momentum_step(params, grads, state)
        log.append(
            EpochRecord(
                epoch,
                float(np.mean(losses)),
                evaluate(model, dataset, "val")[0],
                {},
                None,
                time.perf_counter() - t0,
            )
        )
    return log


def train_from_scratch(
    spec: CellSpec, genotype: Genotype, dataset: Dataset, config: TrainConfig
) -> BenchRecord:
    """
    Train a fresh genotype network with ``config`` and report val/test accuracy.

    Returns:
        Single-seed BenchRecord (seed = ``config.seed``)
    """
    genotype.validate(spec)
    t0 = time.perf_counter()
    network = GenotypeNetwork.initialize(
        spec, genotype, dataset.input_dim, dataset.classes, config.seed
    )
    train_weights(network, dataset, config, stream=("scratch",))
    val_acc, _ = evaluate(network, dataset, "val")
    test_acc, _ = evaluate(network, dataset, "test")
    return BenchRecord(
        genotype=genotype_to_string(genotype),
        seeds=[config.seed],
        val_accuracy=[val_acc],
        test_accuracy=[test_acc],
        config_hash=recipe_hash(config, dataset),
        wall_time=time.perf_counter() - t0,
    )
