"""
Diagnostics: the skip/conv mixing optimum, its grid oracle and the trained-supernet measurement,
skip-gap trajectories, edge-shuffle robustness, α-vs-strength rankings and the
fine-tune budget ablation.

Variances and covariances pool all n·d scalar entries with the unbiased
denominator. For residuals a = o - m* and b = x - m* the optimum of
Var(θ·a + (1 - θ)·b) is

    θ_conv = (Var(b) - Cov) / Z,   θ_skip = (Var(a) - Cov) / Z,
    Z = Var(a) + Var(b) - 2·Cov

and α_conv, α_skip are the logs of the two numerators (up to a shared constant).
"""

import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd  # type: ignore[import-untyped]
from scipy import stats  # type: ignore[import-untyped]
from tqdm import tqdm

from .autodiff import Tensor
from .bench import BenchDB, query, rank_of
from .datasets import Dataset
from .errors import InvariantError, NumericError
from .networks import VanillaChain
from .prng import CounterRNG, derive_seed
from .records import RunLog
from .searchspace import Edge, OpKind, genotype_to_string
from .selection import SelectConfig, SelectMethod, measure_op_strength, run_selection
from .supernet import Supernet
from .trainer import evaluate

SUPERNET_MIXING_COLUMNS = [
    "edge",
    "variant",
    "var_skip_residual",
    "var_conv_residual",
    "cov_residual",
    "theta_skip_pred",
    "theta_conv_pred",
    "alpha_skip_softmax",
    "alpha_conv_softmax",
    "in_unit_interval",
    "note",
]

GAP_COLUMNS = ["epoch", "val_accuracy", "skip_conv_gap"]

STRENGTH_COLUMNS = ["edge", "op", "alpha_softmax", "strength"]

TAU_COLUMNS = ["edge", "kendall_tau", "flag"]

ABLATION_COLUMNS = [
    "finetune_epochs",
    "genotype",
    "final_val_accuracy",
    "oracle_mean_test",
    "percentile",
]

DEFAULT_ABLATION_BUDGETS = (0, 1, 5, 10)
MIN_SHUFFLE_TRIALS = 5
M_STAR_PROXY = "final intermediate node"


class AnalysisError(InvariantError):
    """Analysis precondition violated (pool shape, trial count, series length)."""


class DegenerateSamplesError(AnalysisError, NumericError):
    """Residual difference has zero variance; the mixing optimum is not unique."""


@dataclass
class FeatureSamples:
    """Edge input (skip path), parametric op output and target feature map, all (n, d)."""

    x_e: np.ndarray
    o_e: np.ndarray
    m_star: np.ndarray

    def __post_init__(self) -> None:
        self.x_e = np.asarray(self.x_e, dtype=np.float64)
        self.o_e = np.asarray(self.o_e, dtype=np.float64)
        self.m_star = np.asarray(self.m_star, dtype=np.float64)
        if not self.x_e.shape == self.o_e.shape == self.m_star.shape:
            raise AnalysisError(
                f"sample shapes differ: {self.x_e.shape}, {self.o_e.shape}, {self.m_star.shape}"
            )
        if self.x_e.ndim != 2 or self.x_e.shape[0] < 2:
            raise AnalysisError(f"need (n, d) samples with n >= 2, got {self.x_e.shape}")
        if not all(np.isfinite(a).all() for a in (self.x_e, self.o_e, self.m_star)):
            raise DegenerateSamplesError("samples contain non-finite values")

    def residuals(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (conv residual, skip residual)."""
        return (self.o_e - self.m_star).ravel(), (self.x_e - self.m_star).ravel()

    def scaled(self, factor: float) -> "FeatureSamples":
        return FeatureSamples(self.x_e * factor, self.o_e * factor, self.m_star * factor)


@dataclass
class ThetaSolution:
    theta_conv: float
    theta_skip: float
    alpha_conv: float | None
    alpha_skip: float | None
    var_conv: float
    var_skip: float
    cov: float

    @property
    def alpha_defined(self) -> bool:
        return self.alpha_conv is not None and self.alpha_skip is not None

    @property
    def in_unit_interval(self) -> bool:
        return 0.0 <= self.theta_conv <= 1.0


def residual_moments(samples: FeatureSamples) -> tuple[float, float, float]:
    """(Var(o - m*), Var(x - m*), Cov) over all scalar entries, ddof=1."""
    a, b = samples.residuals()
    cov = np.cov(a, b, ddof=1)
    return float(cov[0, 0]), float(cov[1, 1]), float(cov[0, 1])


def optimal_mixing(samples: FeatureSamples) -> ThetaSolution:
    """
    Mixing weights minimizing the variance of the mixed residual, θ_conv + θ_skip = 1.

    Raises:
        DegenerateSamplesError: Z = 0
    """
    var_conv, var_skip, cov = residual_moments(samples)
    num_conv = var_skip - cov
    num_skip = var_conv - cov
    z = num_conv + num_skip
    if not z > 1e-300:
        raise DegenerateSamplesError(
            f"Var(o - x) is zero (Var conv {var_conv:.3g}, Var skip {var_skip:.3g}, cov {cov:.3g})"
        )
    positive = num_conv > 0 and num_skip > 0
    return ThetaSolution(
        theta_conv=num_conv / z,
        theta_skip=num_skip / z,
        alpha_conv=math.log(num_conv) if positive else None,
        alpha_skip=math.log(num_skip) if positive else None,
        var_conv=var_conv,
        var_skip=var_skip,
        cov=cov,
    )


def mixing_objective(samples: FeatureSamples, theta_conv: float) -> float:
    """Var(θ·o + (1 - θ)·x - m*) computed directly from the samples."""
    a, b = samples.residuals()
    return float(np.var(theta_conv * a + (1.0 - theta_conv) * b, ddof=1))


def stationarity_residual(samples: FeatureSamples, solution: ThetaSolution) -> float:
    """
    |∂L/∂θ_conv - ∂L/∂θ_skip| / 2 at the solution, relative to Var(a) + Var(b).

    Zero at a stationary point of the equality-constrained objective.
    """
    var_conv, var_skip, cov = residual_moments(samples)
    d_conv = solution.theta_conv * var_conv + solution.theta_skip * cov
    d_skip = solution.theta_skip * var_skip + solution.theta_conv * cov
    return abs(d_conv - d_skip) / (var_conv + var_skip)


@dataclass
class GridResult:
    theta_conv: float
    objective: float
    thetas: np.ndarray = field(repr=False)
    objectives: np.ndarray = field(repr=False)


def mixing_grid_oracle(samples: FeatureSamples, step: float = 0.001) -> GridResult:
    """
    Brute-force sweep of θ_conv over [0, 1]; returns the first grid argmin.

    Raises:
        AnalysisError: ``step`` outside (0, 0.1]
    """
    if not 0.0 < step <= 0.1:
        raise AnalysisError(f"grid step must be in (0, 0.1], got {step}")
    thetas = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    objectives = np.array([mixing_objective(samples, float(t)) for t in thetas])
    best = int(np.argmin(objectives))
    return GridResult(float(thetas[best]), float(objectives[best]), thetas, objectives)


def _skip_conv_pair(supernet: Supernet, edge: Edge) -> tuple[OpKind, OpKind]:
    pool = supernet.spec.pool(edge)
    if len(pool) != 2 or OpKind.SKIP not in pool:
        raise AnalysisError(f"edge {edge} pool {[op.tag for op in pool]} is not skip + one op")
    conv = pool[1 - pool.index(OpKind.SKIP)]
    if not conv.is_parametric:
        raise AnalysisError(f"edge {edge} pairs skip with non-parametric {conv.tag}")
    return OpKind.SKIP, conv


def _standardize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    centred = values - values.mean()
    return centred / std if std > 0 else centred


def supernet_mixing_table(
    supernet: Supernet, dataset: Dataset, split: str = "val"
) -> pd.DataFrame:
    """
    Per-edge residual statistics of a skip/conv supernet against the predicted optimum.

    The target feature map is approximated by the final intermediate node's
    mixed output. Each edge yields a ``raw`` row and a ``standardized`` row
    (every array scaled to zero mean, unit variance). Report only.

    Returns:
        DataFrame with SUPERNET_MIXING_COLUMNS, two rows per live edge
    """
    pairs = {e: _skip_conv_pair(supernet, e) for e in supernet.spec.edges}
    x, _ = dataset.split(split)
    if len(x) < 2:
        raise AnalysisError(f"split {split!r} has fewer than two samples")
    nodes, ops = supernet.forward_trace(Tensor(x))
    m_star = nodes[-1]

    rows = []
    for edge in supernet.spec.edges:
        if edge in supernet.pruned_edges:
            continue
        skip, conv = pairs[edge]
        pool = supernet.spec.pool(edge)
        softmax = supernet.alpha_table.softmax(edge, masked=False)
        variants = {
            "raw": (nodes[edge.source], ops[edge][conv], m_star),
            "standardized": tuple(
                _standardize(a) for a in (nodes[edge.source], ops[edge][conv], m_star)
            ),
        }
        for variant, (x_e, o_e, m) in variants.items():
            row: dict[str, object] = {
                "edge": str(edge),
                "variant": variant,
                "alpha_skip_softmax": float(softmax[pool.index(skip)]),
                "alpha_conv_softmax": float(softmax[pool.index(conv)]),
                "note": f"m* proxy: {M_STAR_PROXY}",
            }
            samples = FeatureSamples(x_e, o_e, m)
            var_conv, var_skip, cov = residual_moments(samples)
            row.update(var_skip_residual=var_skip, var_conv_residual=var_conv, cov_residual=cov)
            try:
                solution = optimal_mixing(samples)
            except DegenerateSamplesError:
                row.update(theta_skip_pred=None, theta_conv_pred=None, in_unit_interval=None)
                row["note"] = f"{row['note']}; degenerate residuals"
            else:
                row.update(
                    theta_skip_pred=solution.theta_skip,
                    theta_conv_pred=solution.theta_conv,
                    in_unit_interval=solution.in_unit_interval,
                )
            rows.append(row)
    return pd.DataFrame(rows, columns=SUPERNET_MIXING_COLUMNS)


@dataclass
class GapTrajectory:
    points: pd.DataFrame
    spearman: float | None
    flag: str = ""


def skip_gap_trajectory(runlog: RunLog) -> GapTrajectory:
    """
    (epoch, val accuracy, softmaxed skip-minus-conv gap) per epoch and the
    Spearman correlation between epoch and gap.

    Raises:
        AnalysisError: The run's space has no skip/conv gap
    """
    if any(r.skip_conv_gap is None for r in runlog.records):
        raise AnalysisError("skip/conv gap undefined for this run's space")
    points = pd.DataFrame(
        [(r.epoch, r.val_accuracy, r.skip_conv_gap) for r in runlog.records], columns=GAP_COLUMNS
    )
    gaps = points["skip_conv_gap"].to_numpy(dtype=np.float64)
    if len(gaps) < 2:
        return GapTrajectory(points, None, "fewer than two epochs")
    if np.all(gaps == gaps[0]):
        return GapTrajectory(points, None, "constant gap; correlation undefined")
    rho, _ = stats.spearmanr(points["epoch"].to_numpy(), gaps)
    return GapTrajectory(points, float(rho))


def aggregate_trials(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1)."""
    if len(values) < 2:
        raise AnalysisError("need at least two trials to aggregate")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1))


@dataclass
class ShuffleResult:
    baseline: float
    accuracies: list[float]
    mean: float
    std: float
    swaps: list[str]

    @property
    def drop(self) -> float:
        return self.baseline - self.mean


def _shuffled(model: Supernet | VanillaChain, seed: int) -> tuple[Supernet | VanillaChain, str]:
    if isinstance(model, Supernet):
        pairs = model.swappable_pairs()
        a, b = pairs[int(CounterRNG(seed).integers(len(pairs), 1)[0])]
        return model.swap_edges(a, b), f"{a}<->{b}"
    pairs = [(i, j) for i in range(model.depth) for j in range(i + 1, model.depth)]
    i, j = pairs[int(CounterRNG(seed).integers(len(pairs), 1)[0])]
    return model.swap_layers(i, j), f"layer.{i}<->layer.{j}"


def edge_shuffle_robustness(
    model: Supernet | VanillaChain,
    dataset: Dataset,
    trials: int = MIN_SHUFFLE_TRIALS,
    seed: int = 0,
    split: str = "val",
    identity: bool = False,
) -> ShuffleResult:
    """
    Accuracy before and after swapping two interchangeable units, over ``trials`` trials.

    A supernet swaps two edges with matching pools (weights, α and masks move
    together); a vanilla chain swaps two hidden layers. ``identity=True``
    evaluates the unmodified model in every trial.

    Raises:
        AnalysisError: Fewer than five trials or fewer than two swappable units
    """
    if trials < MIN_SHUFFLE_TRIALS:
        raise AnalysisError(f"need at least {MIN_SHUFFLE_TRIALS} trials, got {trials}")
    if isinstance(model, Supernet):
        if not model.can_shuffle():
            raise AnalysisError("supernet has no pair of edges with the same pool")
    elif model.depth < 2:
        raise AnalysisError(f"chain of depth {model.depth} has nothing to swap")

    baseline = evaluate(model, dataset, split)[0]
    accuracies, swaps = [], []
    for t in range(trials):
        if identity:
            accuracies.append(evaluate(model, dataset, split)[0])
            swaps.append("identity")
            continue
        shuffled, swap = _shuffled(model, derive_seed(seed, "shuffle", t))
        accuracies.append(evaluate(shuffled, dataset, split)[0])
        swaps.append(swap)
    mean, std = aggregate_trials(accuracies)
    return ShuffleResult(baseline, accuracies, mean, std, swaps)


def kendall_tau(ranking_a: Sequence[float], ranking_b: Sequence[float]) -> float:
    """
    Tie-adjusted Kendall τ-b; NaN when either side is constant.

    Raises:
        AnalysisError: Lengths differ or are below two
    """
    if len(ranking_a) != len(ranking_b):
        raise AnalysisError(f"rankings differ in length: {len(ranking_a)} vs {len(ranking_b)}")
    if len(ranking_a) < 2:
        raise AnalysisError("Kendall τ needs at least two items")
    a = np.asarray(ranking_a, dtype=np.float64)
    b = np.asarray(ranking_b, dtype=np.float64)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    tau, _ = stats.kendalltau(a, b, variant="b")
    return float(tau)


@dataclass
class StrengthReport:
    table: pd.DataFrame
    taus: pd.DataFrame


def _pick_edges(supernet: Supernet, count: int, seed: int) -> list[Edge]:
    undecided = [
        e
        for e in supernet.spec.edges
        if e not in supernet.discretized and e not in supernet.pruned_edges
    ]
    order = CounterRNG(seed).fork("strength-edges").permutation(len(undecided))
    return [undecided[int(i)] for i in order[:count]]


def alpha_vs_strength_report(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    edges: Sequence[Edge] | None = None,
    num_edges: int = 3,
    verbose: bool = False,
) -> StrengthReport:
    """
    Softmaxed α next to measured discretization accuracy for every op on the given edges.

    Without ``edges``, ``num_edges`` undecided edges are drawn with ``config.seed``.
    Each edge also gets the Kendall τ between the two rankings; ties on every op
    leave τ undefined and flagged.
    """
    chosen = list(edges) if edges is not None else _pick_edges(supernet, num_edges, config.seed)
    rows, tau_rows = [], []
    for edge in tqdm(chosen, desc="strength", disable=not verbose):
        strengths = measure_op_strength(supernet, edge, dataset, config)
        softmax = supernet.alpha_softmax(edge)
        pool = supernet.spec.pool(edge)
        ops = list(strengths)
        alphas = [float(softmax[pool.index(op)]) for op in ops]
        for op, alpha in zip(ops, alphas, strict=True):
            rows.append(
                {"edge": str(edge), "op": op.tag, "alpha_softmax": alpha, "strength": strengths[op]}
            )
        if len(ops) < 2:
            tau, flag = float("nan"), "single candidate"
        else:
            tau = kendall_tau(alphas, [strengths[op] for op in ops])
            flag = "undefined (ties)" if math.isnan(tau) else ""
        tau_rows.append({"edge": str(edge), "kendall_tau": tau, "flag": flag})
        if verbose:
            tqdm.write(f"  {edge}: tau={tau:.3f} {flag}".rstrip())
    return StrengthReport(
        pd.DataFrame(rows, columns=STRENGTH_COLUMNS), pd.DataFrame(tau_rows, columns=TAU_COLUMNS)
    )


def finetune_ablation(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    db: BenchDB | None = None,
    budgets: Sequence[int] = DEFAULT_ABLATION_BUDGETS,
    verbose: bool = False,
) -> pd.DataFrame:
    """
    Run PT on a copy of ``supernet`` for every fine-tune budget and look each result up.

    Returns:
        DataFrame with ABLATION_COLUMNS; oracle columns are empty without ``db``
    """
    rows = []
    for budget in tqdm(budgets, desc="budgets", disable=not verbose):
        if budget < 0:
            raise AnalysisError(f"fine-tune budget must be >= 0, got {budget}")
        run_config = replace(
            config, method=SelectMethod.PT, finetune_epochs=budget, topology_finetune_epochs=budget
        )
        clone = supernet.clone()
        genotype, _ = run_selection(clone, dataset, run_config)
        row: dict[str, object] = {
            "finetune_epochs": budget,
            "genotype": genotype_to_string(genotype),
            "final_val_accuracy": evaluate(clone, dataset, "val")[0],
            "oracle_mean_test": None,
            "percentile": None,
        }
        if db is not None:
            row.update(
                oracle_mean_test=query(db, genotype).mean_test,
                percentile=rank_of(db, genotype),
            )
        rows.append(row)
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS)
