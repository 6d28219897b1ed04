import json

import numpy as np
import pandas as pd
import pytest

from scripts.nas_selection.checkpoint import save_checkpoint
from scripts.nas_selection.cli import main, parse_args
from scripts.nas_selection.searchspace import build_space, parse_genotype
from scripts.nas_selection.supernet import Supernet


@pytest.fixture
def tiny(tmp_path):
    """Overrides for a one-node space and a two-epoch recipe writing under tmp_path."""
    return [
        "--io.out_dir",
        str(tmp_path),
        "--io.run_name",
        "t",
        "--io.checkpoint_every",
        "1",
        "--space.num_intermediate",
        "1",
        "--space.feature_width",
        "4",
        "--dataset.n",
        "60",
        "--train.epochs",
        "2",
        "--train.batch",
        "8",
        "--select.finetune_epochs",
        "1",
        "--bench.seeds_per_arch",
        "1",
    ]


def test_overrides_pass_through_in_order():
    args, extras = parse_args(["verify", "gradcheck", "-v", "--train.seed", "3", "--io.run_name=x"])
    assert args.command == "verify"
    assert args.kind == "gradcheck"
    assert args.verbose
    assert extras == ["--train.seed", "3", "--io.run_name=x"]


def test_quiet_and_verbose_conflict(capsys):
    assert main(["verify", "prop1-oracle", "-q", "-v"]) == 1
    assert "--quiet and --verbose" in capsys.readouterr().err


def test_unknown_config_key_exits_1(tmp_path, capsys):
    assert main(["verify", "prop1-oracle", "--io.out_dir", str(tmp_path), "--io.outdir", "x"]) == 1
    assert "unknown key io.outdir" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        ["analyze", "bogus"],
        ["verify", "nothing"],
        [],
        ["select"],
        ["search", "--verbose=yes"],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage:" in capsys.readouterr().err


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "search" in capsys.readouterr().out


def test_old_kind_names_are_aliases():
    args, _ = parse_args(["analyze", "mixing"])
    assert args.kind == "prop1"
    args, _ = parse_args(["verify", "mixing-oracle"])
    assert args.kind == "prop1-oracle"


def test_verify_mixing_oracle(tmp_path):
    argv = ["verify", "prop1-oracle", "-q", "--io.out_dir", str(tmp_path), "--io.run_name", "t"]
    assert main([*argv, "--analyze.oracle_sets", "3"]) == 0
    out_dir = tmp_path / "verify" / "prop1-oracle" / "t"
    table = pd.read_csv(out_dir / "verify.csv")
    assert table["passed"].all()
    assert (out_dir / "resolved_config.toml").exists()


def test_analyze_mixing_from_samples(tmp_path, capsys):
    r = np.random.default_rng(0).normal(size=(50, 4))
    samples = tmp_path / "samples.npz"
    np.savez(samples, x_e=r, o_e=-r, m_star=np.zeros_like(r))
    argv = ["analyze", "prop1", "--samples", str(samples), "--io.out_dir", str(tmp_path)]
    assert main([*argv, "--io.run_name", "m"]) == 0
    assert "theta_conv=0.500000" in capsys.readouterr().out
    row = pd.read_csv(tmp_path / "analyze" / "prop1" / "m" / "mixing.csv").iloc[0]
    assert row["theta_skip"] == 0.5


def test_missing_checkpoint_is_a_usage_error(tiny, tmp_path):
    assert main(["select", "-q", "--checkpoint", str(tmp_path / "nope.json"), *tiny]) == 1


def test_search_select_bench_and_analyze(tiny, tmp_path, capsys):
    assert main(["search", "-q", *tiny]) == 0
    run = tmp_path / "search" / "t"
    for name in ("supernet.json", "runlog.jsonl", "search_summary.json", "resolved_config.toml"):
        assert (run / name).exists()
    assert (run / "checkpoints" / "epoch_0002.json").exists()
    assert len((run / "runlog.jsonl").read_text().splitlines()) == 3

    assert main(["bench", "-q", *tiny]) == 0
    db = tmp_path / "bench" / "t" / "bench.jsonl"
    assert len(db.read_text().splitlines()) == 1 + 4

    capsys.readouterr()
    argv = ["select", "-q", "--checkpoint", str(run / "supernet.json"), "--method", "mag"]
    assert main([*argv, "--bench", str(db), *tiny]) == 0
    genotype = capsys.readouterr().out.strip().splitlines()[-1]
    spec = build_space("S2P", num_inputs=2, num_intermediate=1, feature_width=4)
    assert len(parse_genotype(genotype, spec).retained(2)) == 2
    summary = json.loads((tmp_path / "select" / "t" / "select_summary.json").read_text())
    assert summary["genotype"] == genotype
    assert 0.0 <= summary["percentile"] < 1.0

    argv = ["analyze", "trajectory", "-q", "--checkpoints", str(run / "checkpoints")]
    assert main([*argv, "--epochs", "1,2,7", "--bench", str(db), *tiny]) == 0
    trajectory = pd.read_csv(tmp_path / "analyze" / "trajectory" / "t" / "trajectory.csv")
    assert trajectory["status"].tolist() == ["ok", "ok", "missing"]
    assert "1 requested checkpoint(s) missing" in capsys.readouterr().err

    assert main(["analyze", "skip-gap", "-q", "--runlog", str(run / "runlog.jsonl"), *tiny]) == 0
    gap = pd.read_csv(tmp_path / "analyze" / "skip-gap" / "t" / "skip_gap.csv")
    assert gap["epoch"].tolist() == [0, 1, 2]

    # four trials are below the minimum: invariant violation
    argv = ["analyze", "shuffle", "-q", "--checkpoint", str(run / "supernet.json")]
    assert main([*argv, "--analyze.trials", "4", *tiny]) == 2


def test_search_resumes_bit_identically(tiny, tmp_path):
    assert main(["search", "-q", *tiny]) == 0
    run = tmp_path / "search" / "t"
    final = (run / "supernet.json").read_bytes()
    last = (run / "checkpoints" / "epoch_0002.json").read_bytes()
    runlog = (run / "runlog.jsonl").read_text().splitlines()

    resume = ["--resume", str(run / "checkpoints" / "epoch_0001.json")]
    assert main(["search", "-q", *resume, *tiny, "--io.run_name", "r"]) == 0
    resumed = tmp_path / "search" / "r"
    assert (resumed / "supernet.json").read_bytes() == final
    assert (resumed / "checkpoints" / "epoch_0002.json").read_bytes() == last
    rows = [json.loads(line) for line in (resumed / "runlog.jsonl").read_text().splitlines()]
    assert [row["epoch"] for row in rows] == [2]
    assert rows[0]["alpha"] == json.loads(runlog[2])["alpha"]

    # resuming inside the original run keeps its earlier log records
    assert main(["search", "-q", *resume, *tiny]) == 0
    assert (run / "supernet.json").read_bytes() == final
    epochs = [json.loads(line)["epoch"] for line in (run / "runlog.jsonl").read_text().splitlines()]
    assert epochs == [0, 1, 2]


def test_resume_needs_training_state(tiny, tmp_path, capsys):
    spec = build_space("S2P", num_inputs=2, num_intermediate=1, feature_width=4)
    bare = save_checkpoint(Supernet.create(spec, 2, 3, seed=0), tmp_path / "bare.json")
    assert main(["search", "-q", "--resume", str(bare), *tiny]) == 1
    assert "no training state" in capsys.readouterr().err
