"""Command-line interface: search, select, bench, analyze and verify."""

import argparse
import re
import sys
from collections.abc import Sequence
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd  # type: ignore[import-untyped]

from .analysis import (
    ABLATION_COLUMNS,
    GAP_COLUMNS,
    STRENGTH_COLUMNS,
    SUPERNET_MIXING_COLUMNS,
    TAU_COLUMNS,
    FeatureSamples,
    alpha_vs_strength_report,
    edge_shuffle_robustness,
    finetune_ablation,
    mixing_grid_oracle,
    optimal_mixing,
    skip_gap_trajectory,
    stationarity_residual,
    supernet_mixing_table,
)
from .bench import (
    TRAJECTORY_COLUMNS,
    BenchDB,
    build_bench,
    load_bench,
    query,
    rank_of,
    trajectory_eval,
)
from .checkpoint import CheckpointInfo, load_checkpoint, save_checkpoint
from .config import Config, load_config, s1_pools_fragment, write_resolved_config
from .datasets import Dataset, load_or_make_dataset
from .errors import ConfigError, InvariantError, NasSelectionError, NumericError
from .networks import VanillaChain
from .records import BENCH_RECORD_FIELDS, EpochRecord, RunLog
from .reporting import (
    VERIFY_COLUMNS,
    generate_report_md,
    write_runlog_jsonl,
    write_summary_json,
    write_table_csv,
    write_trace,
)
from .searchspace import Edge, SpaceVariant, genotype_to_string, top2_pools_from_alpha
from .selection import SelectMethod, run_selection, selection_summary
from .supernet import Supernet
from .trainer import TrainingProgress, bilevel_train, train_weights
from .verification import (
    VerificationResult,
    determinism_check,
    gradcheck_sweep,
    mixing_oracle_sweep,
)

ANALYZE_KINDS = [
    "prop1",
    "skip-gap",
    "shuffle",
    "alpha-vs-strength",
    "trajectory",
    "finetune-ablation",
]
VERIFY_KINDS = ["gradcheck", "prop1-oracle", "determinism"]

# Older kind names still accepted on the command line
KIND_ALIASES = {"mixing": "prop1", "mixing-oracle": "prop1-oracle"}

CHECKPOINT_PATTERN = re.compile(r"epoch_(\d+)\.json$")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file (dotted keys)")
    parser.add_argument(
        "--verbose",
        "-v",
        action="store_true",
        help="Enable progress bars and per-decision logging",
    )
    parser.add_argument(
        "--quiet",
        "-q",
        action="store_true",
        help="Suppress all output except errors",
    )


def parse_args(argv: Sequence[str] | None = None) -> tuple[argparse.Namespace, list[str]]:
    """
    Parse command-line arguments.

    Returns:
        (namespace, remaining ``--section.key value`` override tokens)
    """
    parser = argparse.ArgumentParser(
        description="Desk-scale supernet search with magnitude and perturbation selection",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m scripts.nas_selection search --config s2p.toml --train.epochs 60 --verbose
  python -m scripts.nas_selection select --config s2p.toml \\
    --checkpoint ./out/nas_selection/search/run1/supernet.json --method pt
  python -m scripts.nas_selection bench --config s2p.toml --bench.seeds_per_arch 3
  python -m scripts.nas_selection analyze trajectory --config s2p.toml \\
    --checkpoints ./out/nas_selection/search/run1/checkpoints --bench ./bench.jsonl
  python -m scripts.nas_selection verify gradcheck

Any config key can be overridden with --<section>.<key> <value>, or with the
environment variable NAS_SELECTION__<SECTION>__<KEY>.
""",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    search = sub.add_parser("search", help="Train a supernet and write epoch checkpoints")
    _add_common(search)
    search.add_argument(
        "--resume", help="Epoch checkpoint of an earlier run with the same config to continue"
    )

    select = sub.add_parser("select", help="Derive a genotype from a supernet checkpoint")
    _add_common(select)
    select.add_argument("--checkpoint", required=True, help="Supernet checkpoint file")
    select.add_argument(
        "--method",
        choices=[m.value for m in SelectMethod],
        help="Selection method (default: select.method)",
    )
    select.add_argument("--bench", help="Bench DB for the oracle percentile of the result")

    bench = sub.add_parser("bench", help="Train every genotype of the space from scratch")
    _add_common(bench)
    bench.add_argument(
        "--db", help="Bench DB path; an existing partial build there is resumed"
    )

    analyze = sub.add_parser("analyze", help="Diagnostic reports")
    analyze.add_argument("kind", choices=[*ANALYZE_KINDS, "mixing"])
    _add_common(analyze)
    analyze.add_argument("--checkpoint", help="Supernet checkpoint file")
    analyze.add_argument("--samples", help="npz with x_e, o_e, m_star arrays (mixing)")
    analyze.add_argument("--runlog", help="runlog.jsonl from a search run (skip-gap)")
    analyze.add_argument("--checkpoints", help="Checkpoint directory of a search run (trajectory)")
    analyze.add_argument("--epochs", help="Comma-separated epochs to evaluate (trajectory)")
    analyze.add_argument("--method", choices=[m.value for m in SelectMethod])
    analyze.add_argument("--bench", help="Bench DB (trajectory, finetune-ablation)")

    verify = sub.add_parser("verify", help="Self-checks against brute-force oracles")
    verify.add_argument("kind", choices=[*VERIFY_KINDS, "mixing-oracle"])
    _add_common(verify)

    args, extras = parser.parse_known_args(argv)
    if hasattr(args, "kind"):
        args.kind = KIND_ALIASES.get(args.kind, args.kind)
    return args, extras


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _out_dir(config: Config, *parts: str) -> Path:
    run_name = config.io.run_name or datetime.now().strftime("%Y%m%d-%H%M%S")
    out_dir = Path(config.io.out_dir).joinpath(*parts, run_name)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _load_dataset(config: Config) -> Dataset:
    d = config.dataset
    cache_dir = Path(config.io.cache_dir) if config.io.cache_dir else None
    return load_or_make_dataset(d.kind, d.n, d.classes, d.noise, d.seed, cache_dir)


def _read_checkpoint(
    path_text: str | None, config: Config, dataset: Dataset
) -> tuple[Supernet, CheckpointInfo]:
    if not path_text:
        raise ConfigError("this command needs --checkpoint")
    path = Path(path_text)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    supernet, info = load_checkpoint(path, expected_spec=config.build_spec())
    if supernet.input_dim != dataset.input_dim or supernet.num_classes != dataset.classes:
        raise ConfigError(
            f"checkpoint expects {supernet.input_dim} inputs / {supernet.num_classes} classes, "
            f"dataset has {dataset.input_dim} / {dataset.classes}"
        )
    return supernet, info


def _load_supernet(path_text: str | None, config: Config, dataset: Dataset) -> Supernet:
    return _read_checkpoint(path_text, config, dataset)[0]


def _load_resume_point(
    path_text: str, config: Config, dataset: Dataset
) -> tuple[Supernet, TrainingProgress]:
    supernet, info = _read_checkpoint(path_text, config, dataset)
    if info.prng is None or info.optimizer is None:
        raise ConfigError(f"{path_text} carries no training state to resume from")
    return supernet, TrainingProgress.restore(info.prng, info.optimizer)


def _continue_runlog(path: Path, epoch: int, resumed: RunLog) -> RunLog:
    """Records up to ``epoch`` of the run log at ``path`` (if any), then ``resumed``."""
    combined = RunLog()
    if path.exists():
        for record in RunLog.from_jsonl(path).records:
            if record.epoch <= epoch:
                combined.append(record)
    for record in resumed.records:
        combined.append(record)
    return combined


def _load_bench(path_text: str | None) -> BenchDB | None:
    if not path_text:
        return None
    path = Path(path_text)
    if not path.exists():
        raise ConfigError(f"bench DB not found: {path}")
    return load_bench(path)


def _print_summary(
    title: str, lines: Sequence[str], out_dir: Path, files: Sequence[str], quiet: bool
) -> None:
    if quiet:
        return
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)
    print(f"\nOutputs written to: {out_dir}")
    for name in files:
        print(f"  - {name}")


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def run_search(args: argparse.Namespace, config: Config) -> int:
    """
    Train a supernet, checkpointing every ``io.checkpoint_every`` epochs.

    Returns:
        Exit code (0=success)
    """
    spec = config.build_spec()
    dataset = _load_dataset(config)
    train = config.train_config()
    out_dir = _out_dir(config, "search")
    write_resolved_config(config, out_dir)
    if not args.quiet:
        print(f"Output directory: {out_dir}")
        print(
            f"Space {spec.variant.value}: {len(spec.edges)} edges, "
            f"dataset {dataset.kind.value} ({len(dataset.labels)} samples)"
        )
        print(f"\nTraining supernet ({train.alpha_mode.value}, {train.epochs} epochs)...")

    resume: TrainingProgress | None = None
    if args.resume:
        supernet, resume = _load_resume_point(args.resume, config, dataset)
        if not args.quiet:
            print(f"Resuming after epoch {resume.epoch} from {args.resume}")
    else:
        supernet = Supernet.create(
            spec, dataset.input_dim, dataset.classes, train.seed, config.train.mask_renormalize
        )
    checkpoint_dir = out_dir / "checkpoints"
    every = config.io.checkpoint_every
    final_progress = resume

    def checkpoint(record: EpochRecord, net: Supernet, progress: TrainingProgress) -> None:
        nonlocal final_progress
        final_progress = progress
        if record.epoch == train.epochs or (every > 0 and record.epoch % every == 0):
            save_checkpoint(
                net,
                checkpoint_dir / f"epoch_{record.epoch:04d}.json",
                prng_state=progress.prng_state(),
                meta={"epoch": record.epoch, "alpha_mode": train.alpha_mode.value},
                optimizer=progress.optimizer,
            )

    log = bilevel_train(
        supernet, dataset, train, verbose=args.verbose, on_epoch=checkpoint, resume=resume
    )
    runlog_path = out_dir / "runlog.jsonl"
    if resume is not None:
        log = _continue_runlog(runlog_path, resume.epoch, log)

    files = ["resolved_config.toml", "runlog.jsonl", "supernet.json", "checkpoints/"]
    write_runlog_jsonl(log, runlog_path)
    save_checkpoint(
        supernet,
        out_dir / "supernet.json",
        prng_state=None if final_progress is None else final_progress.prng_state(),
        meta={"epoch": train.epochs},
        optimizer=None if final_progress is None else final_progress.optimizer,
    )
    if spec.variant is SpaceVariant.FULL:
        alpha = {e: t.data for e, t in supernet.alpha_table.alpha.items()}
        fragment = s1_pools_fragment(top2_pools_from_alpha(spec, alpha))
        (out_dir / "s1_pools.toml").write_text(fragment, encoding="utf-8")
        files.append("s1_pools.toml")

    final = log.final
    summary = {
        "space": spec.variant.value,
        "alpha_mode": train.alpha_mode.value,
        "epochs": train.epochs,
        "final_train_loss": final.train_loss,
        "final_val_accuracy": final.val_accuracy,
        "final_skip_conv_gap": final.skip_conv_gap,
        "spec_hash": spec.spec_hash(),
    }
    write_summary_json(summary, out_dir / "search_summary.json")
    files.append("search_summary.json")

    lines = [
        f"Space: {spec.variant.value} ({train.alpha_mode.value})",
        f"Epochs: {train.epochs}",
        f"Final val accuracy: {final.val_accuracy:.3f}",
    ]
    if final.skip_conv_gap is not None:
        lines.append(f"Final skip/conv gap: {final.skip_conv_gap:+.4f}")
    _print_summary("SUPERNET SEARCH SUMMARY", lines, out_dir, files, args.quiet)
    return 0


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


def run_select(args: argparse.Namespace, config: Config) -> int:
    dataset = _load_dataset(config)
    supernet = _load_supernet(args.checkpoint, config, dataset)
    select = config.select_config()
    if args.method:
        select = replace(select, method=SelectMethod.parse(args.method))
    db = _load_bench(args.bench)
    out_dir = _out_dir(config, "select")
    write_resolved_config(config, out_dir)
    if not args.quiet:
        print(f"Output directory: {out_dir}")
        print(f"\nSelecting with {select.method.value}...")

    genotype, trace = run_selection(supernet, dataset, select, verbose=args.verbose)
    text = genotype_to_string(genotype)
    (out_dir / "genotype.txt").write_text(text + "\n", encoding="utf-8")
    write_trace(trace, text, out_dir / "trace.csv", out_dir / "trace.json")
    files = ["resolved_config.toml", "genotype.txt", "trace.csv", "trace.json"]

    summary = selection_summary(trace)
    summary["genotype"] = text
    summary["checkpoint"] = str(args.checkpoint)
    if db is not None:
        summary["oracle_mean_test"] = query(db, genotype).mean_test
        summary["percentile"] = rank_of(db, genotype)
    write_summary_json(summary, out_dir / "select_summary.json")
    files.append("select_summary.json")

    lines = [f"Method: {select.method.value}", f"Decisions: {len(trace.decisions)}"]
    if summary["final_val_accuracy"] is not None:
        accuracy = summary["final_val_accuracy"]
        lines.append(f"Supernet val accuracy after last decision: {accuracy:.3f}")
    if db is not None:
        lines.append(f"Oracle percentile: {summary['percentile']:.3f}")
    _print_summary("SELECTION SUMMARY", lines, out_dir, files, args.quiet)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def run_bench(args: argparse.Namespace, config: Config) -> int:
    spec = config.build_spec()
    dataset = _load_dataset(config)
    train = config.bench_train_config()
    out_dir = _out_dir(config, "bench")
    write_resolved_config(config, out_dir)
    db_path = Path(args.db) if args.db else out_dir / "bench.jsonl"
    if not args.quiet:
        print(f"Output directory: {out_dir}")
        print(f"Bench DB: {db_path}")
        print(f"\nTraining every {spec.variant.value} genotype from scratch...")

    db = build_bench(
        spec,
        dataset,
        train,
        seeds_per_arch=config.bench.seeds_per_arch,
        out_path=db_path,
        cap=config.bench.cap,
        workers=config.bench.workers,
        verbose=args.verbose,
    )
    table = db.to_frame().sort_values("mean_test", ascending=False, kind="stable")
    write_table_csv(table, BENCH_RECORD_FIELDS, out_dir / "bench_ranking.csv")
    best, worst = table.iloc[0], table.iloc[-1]
    write_summary_json(
        {
            "db": str(db_path),
            "records": len(db),
            "config_hash": db.config_hash,
            "best": {"genotype": best["genotype"], "mean_test": best["mean_test"]},
            "worst": {"genotype": worst["genotype"], "mean_test": worst["mean_test"]},
        },
        out_dir / "bench_summary.json",
    )
    lines = [
        f"Records: {len(db)} ({len(db) * config.bench.seeds_per_arch} training runs)",
        f"Best:  {best['genotype']}  test={best['mean_test']:.3f}",
        f"Worst: {worst['genotype']}  test={worst['mean_test']:.3f}",
    ]
    files = ["resolved_config.toml", "bench_ranking.csv", "bench_summary.json"]
    if db_path.parent == out_dir:
        files.insert(1, db_path.name)
    _print_summary("BENCH SUMMARY", lines, out_dir, files, args.quiet)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _analyze_mixing(args: argparse.Namespace, config: Config, out_dir: Path) -> list[str]:
    if args.samples:
        with np.load(args.samples) as data:
            samples = FeatureSamples(data["x_e"], data["o_e"], data["m_star"])
        solution = optimal_mixing(samples)
        grid = mixing_grid_oracle(samples, config.analyze.grid_step)
        row = {
            "theta_conv": solution.theta_conv,
            "theta_skip": solution.theta_skip,
            "alpha_conv": solution.alpha_conv,
            "alpha_skip": solution.alpha_skip,
            "in_unit_interval": solution.in_unit_interval,
            "grid_theta_conv": grid.theta_conv,
            "grid_objective": grid.objective,
            "stationarity_residual": stationarity_residual(samples, solution),
        }
        df = pd.DataFrame([row])
        write_table_csv(df, list(row), out_dir / "mixing.csv")
        if not args.quiet:
            print(f"theta_conv={solution.theta_conv:.6f} theta_skip={solution.theta_skip:.6f}")
        return ["mixing.csv"]

    dataset = _load_dataset(config)
    supernet = _load_supernet(args.checkpoint, config, dataset)
    table = supernet_mixing_table(supernet, dataset, config.analyze.eval_split)
    write_table_csv(table, SUPERNET_MIXING_COLUMNS, out_dir / "supernet_mixing.csv")
    generate_report_md(
        "Skip/Conv Mixing on a Trained Supernet",
        {"Checkpoint": args.checkpoint, "Split": config.analyze.eval_split},
        {"Per-edge residuals": table},
        out_dir / "supernet_mixing.md",
        notes=["Target feature map approximated by the final intermediate node's output."],
    )
    return ["supernet_mixing.csv", "supernet_mixing.md"]


def _analyze_skip_gap(args: argparse.Namespace, config: Config, out_dir: Path) -> list[str]:
    if not args.runlog:
        raise ConfigError("skip-gap needs --runlog")
    path = Path(args.runlog)
    if not path.exists():
        raise ConfigError(f"run log not found: {path}")
    trajectory = skip_gap_trajectory(RunLog.from_jsonl(path))
    write_table_csv(trajectory.points, GAP_COLUMNS, out_dir / "skip_gap.csv")
    write_summary_json(
        {"runlog": str(path), "spearman": trajectory.spearman, "flag": trajectory.flag},
        out_dir / "skip_gap_summary.json",
    )
    if not args.quiet:
        rho = "undefined" if trajectory.spearman is None else f"{trajectory.spearman:.3f}"
        print(f"Spearman(epoch, gap) = {rho} {trajectory.flag}".rstrip())
    return ["skip_gap.csv", "skip_gap_summary.json"]


def _analyze_shuffle(args: argparse.Namespace, config: Config, out_dir: Path) -> list[str]:
    dataset = _load_dataset(config)
    supernet = _load_supernet(args.checkpoint, config, dataset)
    train = config.train_config()
    a = config.analyze
    if not args.quiet:
        print(f"Training vanilla chain baseline (depth {a.chain_depth})...")
    chain = VanillaChain.initialize(
        dataset.input_dim, supernet.spec.feature_width, a.chain_depth, dataset.classes, train.seed
    )
    train_weights(chain, dataset, train)

    rows = []
    for name, model in (("supernet", supernet), ("vanilla_chain", chain)):
        result = edge_shuffle_robustness(model, dataset, a.trials, train.seed, a.eval_split)
        rows.append(
            {
                "model": name,
                "baseline": result.baseline,
                "shuffled_mean": result.mean,
                "shuffled_std": result.std,
                "drop": result.drop,
                "trials": ",".join(f"{v:.4f}" for v in result.accuracies),
                "swaps": ";".join(result.swaps),
            }
        )
        if not args.quiet:
            print(
                f"  {name}: {result.baseline:.3f} -> {result.mean:.3f} ± {result.std:.3f} "
                f"(drop {result.drop:+.3f})"
            )
    df = pd.DataFrame(rows)
    write_table_csv(df, list(rows[0]), out_dir / "shuffle.csv")
    return ["shuffle.csv"]


def _analyze_alpha_vs_strength(
    args: argparse.Namespace, config: Config, out_dir: Path
) -> list[str]:
    dataset = _load_dataset(config)
    supernet = _load_supernet(args.checkpoint, config, dataset)
    edges = [Edge.parse(text) for text in config.analyze.edges] or None
    report = alpha_vs_strength_report(
        supernet,
        dataset,
        config.select_config(),
        edges=edges,
        num_edges=config.analyze.num_edges,
        verbose=args.verbose,
    )
    write_table_csv(report.table, STRENGTH_COLUMNS, out_dir / "alpha_vs_strength.csv")
    write_table_csv(report.taus, TAU_COLUMNS, out_dir / "kendall_tau.csv")
    generate_report_md(
        "Architecture Weight vs Operation Strength",
        {"Checkpoint": args.checkpoint, "Edges": len(report.taus)},
        {"Per-op values": report.table, "Rank agreement": report.taus},
        out_dir / "alpha_vs_strength.md",
    )
    return ["alpha_vs_strength.csv", "kendall_tau.csv", "alpha_vs_strength.md"]


def _requested_checkpoints(directory: Path, epochs_text: str | None) -> list[tuple[int, Path]]:
    if epochs_text:
        epochs = [int(e) for e in epochs_text.split(",") if e.strip()]
        return [(e, directory / f"epoch_{e:04d}.json") for e in epochs]
    found = []
    for path in sorted(directory.glob("epoch_*.json")):
        match = CHECKPOINT_PATTERN.search(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return found


def _analyze_trajectory(args: argparse.Namespace, config: Config, out_dir: Path) -> list[str]:
    if not args.checkpoints:
        raise ConfigError("trajectory needs --checkpoints")
    db = _load_bench(args.bench)
    if db is None:
        raise ConfigError("trajectory needs --bench")
    directory = Path(args.checkpoints)
    checkpoints = _requested_checkpoints(directory, args.epochs)
    if not checkpoints:
        raise ConfigError(f"no epoch_*.json checkpoints in {directory}")
    dataset = _load_dataset(config)
    method = args.method or config.select.method
    df = trajectory_eval(
        checkpoints,
        method,
        db,
        dataset,
        config.select_config(),
        spec=config.build_spec(),
        verbose=args.verbose,
    )
    missing = int((df["status"] == "missing").sum())
    if missing:
        print(f"Warning: {missing} requested checkpoint(s) missing", file=sys.stderr)
    write_table_csv(df, TRAJECTORY_COLUMNS, out_dir / "trajectory.csv")
    return ["trajectory.csv"]


def _analyze_finetune_ablation(
    args: argparse.Namespace, config: Config, out_dir: Path
) -> list[str]:
    dataset = _load_dataset(config)
    supernet = _load_supernet(args.checkpoint, config, dataset)
    db = _load_bench(args.bench)
    df = finetune_ablation(
        supernet, dataset, config.select_config(), db, config.analyze.budgets, args.verbose
    )
    write_table_csv(df, ABLATION_COLUMNS, out_dir / "finetune_ablation.csv")
    return ["finetune_ablation.csv"]


ANALYZERS = {
    "prop1": _analyze_mixing,
    "skip-gap": _analyze_skip_gap,
    "shuffle": _analyze_shuffle,
    "alpha-vs-strength": _analyze_alpha_vs_strength,
    "trajectory": _analyze_trajectory,
    "finetune-ablation": _analyze_finetune_ablation,
}


def run_analyze(args: argparse.Namespace, config: Config) -> int:
    out_dir = _out_dir(config, "analyze", args.kind)
    write_resolved_config(config, out_dir)
    if not args.quiet:
        print(f"Output directory: {out_dir}")
    files = ANALYZERS[args.kind](args, config, out_dir)
    _print_summary(
        f"ANALYSIS: {args.kind}", [], out_dir, ["resolved_config.toml", *files], args.quiet
    )
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _verify(args: argparse.Namespace, config: Config) -> VerificationResult:
    a = config.analyze
    if args.kind == "gradcheck":
        return gradcheck_sweep(
            a.gradcheck_models, a.gradcheck_tolerance, config.train.seed, verbose=args.verbose
        )
    if args.kind == "prop1-oracle":
        return mixing_oracle_sweep(a.oracle_sets, a.grid_step, config.train.seed, args.verbose)
    return determinism_check(
        config.build_spec(),
        _load_dataset(config),
        config.train_config(),
        config.select_config(),
        config.train.mask_renormalize,
    )


def run_verify(args: argparse.Namespace, config: Config) -> int:
    """
    Run one self-check.

    Returns:
        Exit code (0=all checks passed, 2=a check failed)
    """
    out_dir = _out_dir(config, "verify", args.kind)
    write_resolved_config(config, out_dir)
    result = _verify(args, config)
    df = pd.DataFrame([c.to_dict() for c in result.checks])
    write_table_csv(df, VERIFY_COLUMNS, out_dir / "verify.csv")

    for failure in result.failures:
        print(
            f"Error: {failure.check} failed on {failure.case}: "
            f"{failure.value} (threshold {failure.threshold}) {failure.detail}".rstrip(),
            file=sys.stderr,
        )
    lines = [
        f"Checks: {len(result.checks)}",
        f"Failed: {len(result.failures)}",
        f"Result: {'PASS' if result.passed else 'FAIL'}",
    ]
    _print_summary(
        f"VERIFY {args.kind.upper()}",
        lines,
        out_dir,
        ["resolved_config.toml", "verify.csv"],
        args.quiet,
    )
    return 0 if result.passed else 2


COMMANDS = {
    "search": run_search,
    "select": run_select,
    "bench": run_bench,
    "analyze": run_analyze,
    "verify": run_verify,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point."""
    try:
        args, overrides = parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; 2 is reserved for invariant failures
        return 0 if e.code in (0, None) else 1

    # Validate flags
    if args.quiet and args.verbose:
        print("Error: Cannot use --quiet and --verbose together", file=sys.stderr)
        return 1

    try:
        config = load_config(Path(args.config) if args.config else None, overrides)
        return COMMANDS[args.command](args, config)
    except KeyboardInterrupt:
        print("\nInterrupted by user", file=sys.stderr)
        return 130
    except NumericError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 3
    except InvariantError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except NasSelectionError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"Fatal error: {e}", file=sys.stderr)
        import traceback

        traceback.print_exc()
        return 1
