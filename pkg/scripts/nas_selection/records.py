"""Persistent run records: per-epoch training logs and per-genotype bench results."""

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvariantError

# RunLog JSONL field order
RUNLOG_FIELDS = ["epoch", "train_loss", "val_accuracy", "alpha", "skip_conv_gap", "wall_time"]

# BenchRecord field order in the bench DB (wall_time lives in the timings sidecar)
BENCH_RECORD_FIELDS = [
    "genotype",
    "seeds",
    "val_accuracy",
    "test_accuracy",
    "mean_val",
    "std_val",
    "mean_test",
    "std_test",
    "config_hash",
]


class RecordError(InvariantError):
    """Inconsistent run or bench record."""


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    alpha: dict[str, list[float]]
    skip_conv_gap: float | None
    wall_time: float

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in RUNLOG_FIELDS}


@dataclass
class RunLog:
    """Epoch records in strictly increasing epoch order; epoch 0 is the state before training."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise RecordError(
                f"epoch {record.epoch} does not follow epoch {self.records[-1].epoch}"
            )
        if self.records and set(record.alpha) != set(self.records[-1].alpha):
            raise RecordError("alpha snapshot does not match the table shape")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EpochRecord:
        if not self.records:
            raise RecordError("run log is empty")
        return self.records[-1]

    @property
    def initial(self) -> EpochRecord:
        if not self.records:
            raise RecordError("run log is empty")
        return self.records[0]

    def to_jsonl(self, path: Path, include_wall_time: bool = True) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for record in self.records:
                row = record.to_dict()
                if not include_wall_time:
                    row["wall_time"] = None
                f.write(json.dumps(row) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path: Path) -> "RunLog":
        log = cls()
        with open(path, encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    row = json.loads(line)
                    log.append(EpochRecord(**{name: row[name] for name in RUNLOG_FIELDS}))
        return log


@dataclass
class BenchRecord:
    """From-scratch results of one genotype over one or more seeds."""

    genotype: str
    seeds: list[int]
    val_accuracy: list[float]
    test_accuracy: list[float]
    config_hash: str
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        if not self.seeds or not (
            len(self.seeds) == len(self.val_accuracy) == len(self.test_accuracy)
        ):
            raise RecordError(f"{self.genotype}: seeds and accuracies differ in length")

    @property
    def mean_val(self) -> float:
        return float(np.mean(self.val_accuracy))

    @property
    def std_val(self) -> float:
        return float(np.std(self.val_accuracy))

    @property
    def mean_test(self) -> float:
        return float(np.mean(self.test_accuracy))

    @property
    def std_test(self) -> float:
        return float(np.std(self.test_accuracy))

    @classmethod
    def merge(cls, records: Sequence["BenchRecord"]) -> "BenchRecord":
        """Combine single-seed records of one genotype, ordered by seed."""
        if not records:
            raise RecordError("nothing to merge")
        first = records[0]
        if any(r.genotype != first.genotype or r.config_hash != first.config_hash for r in records):
            raise RecordError("cannot merge records of different genotypes or recipes")
        rows = sorted(
            (s, v, t)
            for r in records
            for s, v, t in zip(r.seeds, r.val_accuracy, r.test_accuracy, strict=True)
        )
        return cls(
            genotype=first.genotype,
            seeds=[s for s, _, _ in rows],
            val_accuracy=[v for _, v, _ in rows],
            test_accuracy=[t for _, _, t in rows],
            config_hash=first.config_hash,
            wall_time=sum(r.wall_time for r in records),
        )

    def to_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values.update(
            mean_val=self.mean_val,
            std_val=self.std_val,
            mean_test=self.mean_test,
            std_test=self.std_test,
        )
        return {name: values[name] for name in BENCH_RECORD_FIELDS}

    @classmethod
    def from_dict(cls, row: dict[str, Any]) -> "BenchRecord":
        record = cls(
            genotype=row["genotype"],
            seeds=[int(s) for s in row["seeds"]],
            val_accuracy=[float(v) for v in row["val_accuracy"]],
            test_accuracy=[float(t) for t in row["test_accuracy"]],
            config_hash=row["config_hash"],
        )
        for name in ("mean_val", "std_val", "mean_test", "std_test"):
            if name in row and not math.isclose(row[name], getattr(record, name), abs_tol=1e-12):
                raise RecordError(f"{record.genotype}: stored {name} disagrees with its seeds")
        return record


def accuracies(records: Iterable[BenchRecord]) -> np.ndarray:
    return np.array([r.mean_test for r in records])
