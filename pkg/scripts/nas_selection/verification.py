"""Self-checks behind ``verify``: gradient sweep, mixing-oracle sweep and run determinism."""

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from .analysis import (
    FeatureSamples,
    mixing_grid_oracle,
    optimal_mixing,
    stationarity_residual,
)
from .autodiff import Tensor
from .checkpoint import checkpoint_bytes
from .datasets import Dataset
from .prng import CounterRNG, derive_seed
from .searchspace import CellSpec, SpaceVariant, build_space, genotype_to_string
from .selection import SelectConfig, run_selection
from .supernet import Supernet, alpha_name
from .trainer import TrainConfig, bilevel_train

# Gradient sweep defaults
GRADCHECK_EPSILON = 1e-6
GRADCHECK_VARIANTS = (SpaceVariant.S2P, SpaceVariant.S3P, SpaceVariant.S4P, SpaceVariant.FULL)

# Mixing-oracle thresholds
ORACLE_TOLERANCE = 0.005
STATIONARITY_TOLERANCE = 1e-10


@dataclass
class CheckResult:
    check: str
    case: str
    value: float | str
    threshold: float | str
    passed: bool
    detail: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "check": self.check,
            "case": self.case,
            "value": self.value,
            "threshold": self.threshold,
            "passed": self.passed,
            "detail": self.detail,
        }


@dataclass
class VerificationResult:
    """Outcome of one verify kind."""

    kind: str
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def random_supernet_builder(
    spec: CellSpec, input_dim: int, num_classes: int
) -> ad.ModelBuilder:
    """Builder for grad_check: every weight and α of a fresh supernet with random α."""

    def build(seed: int) -> tuple[dict[str, Tensor], ad.LossFn]:
        supernet = Supernet.create(spec, input_dim, num_classes, seed)
        rng = CounterRNG(seed).fork("alpha")
        alpha = {
            e: Tensor(0.5 * rng.fork(str(e)).normal((len(spec.pool(e)),)), True, alpha_name(e))
            for e in spec.edges
        }
        params = dict(supernet.weights)
        params.update({alpha_name(e): t for e, t in alpha.items()})

        def loss_fn(p: Mapping[str, Tensor], inputs: Any) -> Tensor:
            x, y = inputs
            weights = {name: p[name] for name in supernet.weights}
            mixing = {e: p[alpha_name(e)] for e in spec.edges}
            logits = supernet.forward(Tensor(x), ("gradcheck",), weights=weights, alpha=mixing)
            return ad.cross_entropy(logits, y)

        return params, loss_fn

    return build


def gradcheck_sweep(
    models: int = 100,
    tolerance: float = 1e-4,
    seed: int = 0,
    epsilon: float = GRADCHECK_EPSILON,
    verbose: bool = False,
) -> VerificationResult:
    """Autodiff vs central differences on ``models`` random small supernets."""
    result = VerificationResult("gradcheck")
    for i in tqdm(range(models), desc="gradcheck", disable=not verbose):
        variant = GRADCHECK_VARIANTS[i % len(GRADCHECK_VARIANTS)]
        spec = build_space(variant, num_inputs=2, num_intermediate=1 + i % 2, feature_width=3)
        rng = CounterRNG(derive_seed(seed, "gradcheck", i))
        x = rng.fork("x").normal((4, 2))
        y = rng.fork("y").integers(3, 4)
        error = ad.grad_check(
            random_supernet_builder(spec, 2, 3), (x, y), epsilon, derive_seed(seed, "model", i)
        )
        result.checks.append(
            CheckResult(
                "gradcheck",
                f"model {i} ({variant.value}, {spec.num_intermediate} intermediate)",
                error,
                tolerance,
                error <= tolerance,
            )
        )
    return result


# ---------------------------------------------------------------------------
# Mixing optimum vs grid oracle
# ---------------------------------------------------------------------------


def random_feature_samples(seed: int, n: int = 1000, d: int = 8) -> FeatureSamples:
    """Target plus two noisy, partly correlated estimates of it."""
    rng = CounterRNG(seed)
    scale_skip, scale_conv = 0.5 + 1.5 * rng.fork("scales").uniform((2,))
    coupling = float(rng.fork("coupling").uniform((1,), -0.5, 0.5)[0])
    m_star = rng.fork("m").normal((n, d))
    skip_noise = scale_skip * rng.fork("skip").normal((n, d))
    conv_noise = scale_conv * rng.fork("conv").normal((n, d)) + coupling * skip_noise
    return FeatureSamples(m_star + skip_noise, m_star + conv_noise, m_star)


def symmetric_samples(seed: int, n: int = 200, d: int = 8) -> FeatureSamples:
    """Skip and conv residuals of exactly equal variance."""
    r = CounterRNG(seed).normal((n, d))
    return FeatureSamples(r, -r, np.zeros((n, d)))


def perfect_skip_samples(seed: int, n: int = 200, d: int = 8) -> FeatureSamples:
    """x_e equal to the target."""
    rng = CounterRNG(seed)
    m_star = rng.fork("m").normal((n, d))
    return FeatureSamples(m_star.copy(), m_star + rng.fork("o").normal((n, d)), m_star)


def mixing_oracle_sweep(
    sets: int = 20, step: float = 0.001, seed: int = 0, verbose: bool = False
) -> VerificationResult:
    """Closed-form mixing weights against the brute-force grid plus the two exact cases."""
    result = VerificationResult("mixing-oracle")
    for k in tqdm(range(sets), desc="oracle", disable=not verbose):
        samples = random_feature_samples(derive_seed(seed, "mixing", k))
        solution = optimal_mixing(samples)
        residual = stationarity_residual(samples, solution)
        result.checks.append(
            CheckResult(
                "stationarity",
                f"set {k}",
                residual,
                STATIONARITY_TOLERANCE,
                residual <= STATIONARITY_TOLERANCE,
            )
        )
        if not solution.in_unit_interval:
            result.checks.append(
                CheckResult(
                    "grid",
                    f"set {k}",
                    solution.theta_conv,
                    "[0, 1]",
                    True,
                    "closed form outside [0, 1]; grid not compared",
                )
            )
            continue
        grid = mixing_grid_oracle(samples, step)
        gap = abs(grid.theta_conv - solution.theta_conv)
        result.checks.append(
            CheckResult("grid", f"set {k}", gap, ORACLE_TOLERANCE, gap <= ORACLE_TOLERANCE)
        )

    symmetric = optimal_mixing(symmetric_samples(seed))
    result.checks.append(
        CheckResult(
            "symmetric",
            "equal residual variance",
            symmetric.theta_conv,
            0.5,
            symmetric.theta_conv == 0.5 and symmetric.theta_skip == 0.5,
        )
    )
    perfect = optimal_mixing(perfect_skip_samples(seed))
    result.checks.append(
        CheckResult(
            "perfect-skip",
            "x_e = m*",
            perfect.theta_skip,
            1.0,
            perfect.theta_skip == 1.0 and perfect.theta_conv == 0.0,
        )
    )
    return result


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------


def _search_and_select(
    spec: CellSpec,
    dataset: Dataset,
    train: TrainConfig,
    select: SelectConfig,
    renormalize: bool,
) -> tuple[str, str, str]:
    supernet = Supernet.create(spec, dataset.input_dim, dataset.classes, train.seed, renormalize)
    bilevel_train(supernet, dataset, train)
    checkpoint = hashlib.sha256(checkpoint_bytes(supernet)).hexdigest()
    genotype, trace = run_selection(supernet, dataset, select)
    trace_text = json.dumps(trace.to_rows(), sort_keys=True)
    return checkpoint, genotype_to_string(genotype), hashlib.sha256(trace_text.encode()).hexdigest()


def determinism_check(
    spec: CellSpec,
    dataset: Dataset,
    train: TrainConfig,
    select: SelectConfig,
    renormalize: bool = True,
) -> VerificationResult:
    """Run search + select twice with identical inputs and compare every artifact."""
    first = _search_and_select(spec, dataset, train, select, renormalize)
    second = _search_and_select(spec, dataset, train, select, renormalize)
    result = VerificationResult("determinism")
    for name, a, b in zip(("checkpoint", "genotype", "trace"), first, second, strict=True):
        result.checks.append(CheckResult(name, "two identical runs", b, a, a == b))
    return result
