"""Exhaustive from-scratch benchmark of a toy space, used as the selection oracle.

Bench DB file (JSON lines, UTF-8):

    line 1     header: format, version, space (descriptor), config_hash, seeds,
               expected_count
    line 2..   one BenchRecord per genotype in enumeration order, fields in
               BENCH_RECORD_FIELDS order

While building, records are appended to ``<db>.partial`` and flushed one by
one; an interrupted build resumes from it. On completion the partial file is
renamed to the DB path and ``<db>.manifest.json`` records the record count and
the DB's SHA-256. Per-genotype wall times go to ``<db>.timings.csv`` so the DB
bytes depend only on the inputs.
"""

import hashlib
import json
import os
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import pandas as pd  # type: ignore[import-untyped]
from tqdm import tqdm

from .checkpoint import load_checkpoint
from .datasets import Dataset
from .errors import NasSelectionError
from .records import BenchRecord, RecordError
from .searchspace import (
    DEFAULT_GENOTYPE_CAP,
    CellSpec,
    Genotype,
    enumerate_genotypes,
    genotype_to_string,
)
from .selection import SelectConfig, SelectMethod, run_selection
from .trainer import TrainConfig, recipe_hash, train_from_scratch

BENCH_FORMAT = "nas-selection-bench"
BENCH_VERSION = 1

TRAJECTORY_COLUMNS = ["epoch", "status", "genotype", "oracle_mean_test", "percentile", "path"]


class BenchError(NasSelectionError):
    """Unreadable bench file, version mismatch or recipe mismatch."""


class BenchQueryError(BenchError):
    """Genotype not present in the bench."""


@dataclass
class BenchDB:
    header: dict[str, Any]
    records: dict[str, BenchRecord] = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return str(self.header["config_hash"])

    @property
    def expected_count(self) -> int:
        return int(self.header["expected_count"])

    def is_complete(self) -> bool:
        return len(self.records) == self.expected_count

    def __len__(self) -> int:
        return len(self.records)

    def to_lines(self) -> list[str]:
        lines = [json.dumps(self.header)]
        lines.extend(json.dumps(r.to_dict()) for r in self.records.values())
        return lines

    def save(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        return path

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records.values()])


def make_header(
    spec: CellSpec, dataset: Dataset, config: TrainConfig, seeds: Sequence[int], count: int
) -> dict[str, Any]:
    return {
        "format": BENCH_FORMAT,
        "version": BENCH_VERSION,
        "space": spec.descriptor(),
        "config_hash": recipe_hash(config, dataset),
        "seeds": list(seeds),
        "expected_count": count,
    }


def _read_lines(path: Path) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise BenchError(f"cannot read bench file {path}: {e}") from e
    lines = text.split("\n")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise BenchError(f"{path}: unreadable header") from e
    if header.get("format") != BENCH_FORMAT:
        raise BenchError(f"{path} is not a bench DB")
    if header.get("version") != BENCH_VERSION:
        raise BenchError(f"bench version {header.get('version')} != supported {BENCH_VERSION}")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            # torn final line of an interrupted build
            break
    return header, rows


def load_bench(
    path: Path, expected_config_hash: str | None = None, require_complete: bool = True
) -> BenchDB:
    """
    Load a bench DB.

    Raises:
        BenchError: Wrong format/version, config-hash mismatch or incomplete DB
    """
    header, rows = _read_lines(Path(path))
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash:
        raise BenchError(
            f"bench config hash {header['config_hash'][:12]} does not match "
            f"{expected_config_hash[:12]}"
        )
    try:
        records = [BenchRecord.from_dict(row) for row in rows]
    except (KeyError, RecordError) as e:
        raise BenchError(f"{path}: invalid record: {e}") from e
    db = BenchDB(header, {r.genotype: r for r in records})
    if require_complete and not db.is_complete():
        raise BenchError(f"{path}: {len(db)} of {db.expected_count} records present")
    return db


def _bench_job(
    spec: CellSpec, genotype: Genotype, dataset: Dataset, config: TrainConfig, seeds: list[int]
) -> BenchRecord:
    runs = [train_from_scratch(spec, genotype, dataset, replace(config, seed=s)) for s in seeds]
    return BenchRecord.merge(runs)


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_bench(
    spec: CellSpec,
    dataset: Dataset,
    config: TrainConfig,
    seeds_per_arch: int = 3,
    out_path: Path | None = None,
    cap: int = DEFAULT_GENOTYPE_CAP,
    workers: int = 1,
    verbose: bool = False,
) -> BenchDB:
    """
    Train every genotype of ``spec`` from scratch for ``seeds_per_arch`` seeds.

    Args:
        spec: Space to enumerate (count must be within ``cap``)
        dataset: Training/evaluation data
        config: From-scratch recipe; seeds are ``config.seed + k``
        seeds_per_arch: Seeds per genotype (>= 1)
        out_path: DB path; enables incremental persistence and resume
        cap: Genotype enumeration cap
        workers: Process pool size; records are written by this process only
        verbose: Progress bar

    Returns:
        Complete BenchDB
    """
    if seeds_per_arch < 1:
        raise BenchError(f"seeds_per_arch must be >= 1, got {seeds_per_arch}")
    genotypes = enumerate_genotypes(spec, cap)
    seeds = [config.seed + k for k in range(seeds_per_arch)]
    header = make_header(spec, dataset, config, seeds, len(genotypes))
    db = BenchDB(header)

    partial = timings = None
    if out_path is not None:
        if out_path.exists():
            existing = load_bench(out_path, require_complete=False)
            if existing.header != header:
                raise BenchError(f"{out_path} was built with a different space, recipe or seeds")
            if existing.is_complete():
                return existing
        partial = out_path.with_name(out_path.name + ".partial")
        timings = out_path.with_name(out_path.name + ".timings.csv")
        if partial.exists():
            previous, rows = _read_lines(partial)
            if previous != header:
                raise BenchError(
                    f"cannot resume {partial}: config hash {previous.get('config_hash', '?')[:12]}"
                    f" differs from {header['config_hash'][:12]}"
                )
            db.records = {r.genotype: r for r in (BenchRecord.from_dict(row) for row in rows)}
        partial.parent.mkdir(parents=True, exist_ok=True)
        partial.write_text("\n".join(db.to_lines()) + "\n", encoding="utf-8")
        if not db.records or not timings.exists():
            timings.write_text("genotype,wall_time\n", encoding="utf-8")

    todo = [g for g in genotypes if genotype_to_string(g) not in db.records]
    jobs = [(spec, g, dataset, config, seeds) for g in todo]
    bar = tqdm(total=len(genotypes), initial=len(db.records), desc="bench", disable=not verbose)

    def record(result: BenchRecord) -> None:
        db.records[result.genotype] = result
        if partial is not None and timings is not None:
            with open(partial, "a", encoding="utf-8") as f:
                f.write(json.dumps(result.to_dict()) + "\n")
                f.flush()
            with open(timings, "a", encoding="utf-8") as f:
                f.write(f"{result.genotype},{result.wall_time:.3f}\n")
        bar.update(1)

    if workers > 1 and jobs:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for result in pool.map(_bench_job, *zip(*jobs, strict=True)):
                record(result)
    else:
        for job in jobs:
            record(_bench_job(*job))
    bar.close()

    # enumeration order regardless of resume history
    db.records = {genotype_to_string(g): db.records[genotype_to_string(g)] for g in genotypes}
    if out_path is not None and partial is not None:
        db.save(partial)
        os.replace(partial, out_path)
        manifest = {
            "expected_count": db.expected_count,
            "record_count": len(db),
            "complete": db.is_complete(),
            "sha256": _file_sha256(out_path),
        }
        manifest_path = out_path.with_name(out_path.name + ".manifest.json")
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return db


def _key(genotype: "Genotype | str") -> str:
    return genotype if isinstance(genotype, str) else genotype_to_string(genotype)


def query(db: BenchDB, genotype: "Genotype | str") -> BenchRecord:
    key = _key(genotype)
    try:
        return db.records[key]
    except KeyError:
        raise BenchQueryError(f"genotype not in bench: {key}") from None


def rank_of(db: BenchDB, genotype: "Genotype | str") -> float:
    """Fraction of records with strictly lower mean test accuracy (ties share the lower rank)."""
    target = query(db, genotype).mean_test
    lower = sum(1 for r in db.records.values() if r.mean_test < target)
    return lower / len(db.records)


def trajectory_eval(
    checkpoints: Sequence[tuple[int, Path]],
    method: "SelectMethod | str",
    db: BenchDB,
    dataset: Dataset,
    config: SelectConfig,
    spec: CellSpec | None = None,
    verbose: bool = False,
) -> pd.DataFrame:
    """
    Run one selection method on each supernet snapshot and look the result up in the bench.

    Missing checkpoint files produce a ``status="missing"`` row instead of an error.

    Returns:
        DataFrame with TRAJECTORY_COLUMNS, one row per requested epoch
    """
    select_config = replace(config, method=SelectMethod.parse(method))
    rows = []
    for epoch, path in sorted(checkpoints, key=lambda item: item[0]):
        if not Path(path).exists():
            if verbose:
                tqdm.write(f"Warning: checkpoint for epoch {epoch} missing: {path}")
            rows.append(
                {
                    "epoch": epoch,
                    "status": "missing",
                    "genotype": None,
                    "oracle_mean_test": None,
                    "percentile": None,
                    "path": str(path),
                }
            )
            continue
        supernet, _ = load_checkpoint(Path(path), expected_spec=spec)
        genotype, _ = run_selection(supernet, dataset, select_config)
        rows.append(
            {
                "epoch": epoch,
                "status": "ok",
                "genotype": genotype_to_string(genotype),
                "oracle_mean_test": query(db, genotype).mean_test,
                "percentile": rank_of(db, genotype),
                "path": str(path),
            }
        )
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)
