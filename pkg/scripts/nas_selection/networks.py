"""Operation application, parameter initialisation and the standalone networks.

Parameter names are shared by every network so weights can move between a
supernet and the genotype network derived from it:

    stem.<i>.w / stem.<i>.b                one dense+tanh stem per cell input node
    edge.<src>-><dst>.<op>.w / .b          dense ops on a cell edge
    layer.<k>.w / layer.<k>.b              vanilla chain layers
    head.w / head.b                        linear classifier on the cell output
"""

import copy
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prng import CounterRNG, derive_seed
from .searchspace import CellSpec, Edge, Genotype, OpKind

# Key used for noise ops outside training; evaluation stays a pure function
EVAL_NOISE_KEY: tuple[object, ...] = ("eval",)


def param_name(edge: Edge, op: OpKind, part: str) -> str:
    return f"edge.{edge}.{op.tag}.{part}"


def init_dense(
    params: dict[str, Tensor], prefix: str, fan_in: int, fan_out: int, seed: int
) -> None:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], one PRNG stream per tensor name."""
    bound = 1.0 / np.sqrt(fan_in)
    base = CounterRNG(seed)
    for part, shape in (("w", (fan_in, fan_out)), ("b", (fan_out,))):
        name = f"{prefix}.{part}"
        data = base.fork(name).uniform(shape, -bound, bound)
        params[name] = Tensor(data, requires_grad=True, name=name)


def init_stems_and_head(
    params: dict[str, Tensor],
    num_stems: int,
    input_dim: int,
    width: int,
    num_classes: int,
    seed: int,
) -> None:
    for i in range(num_stems):
        init_dense(params, f"stem.{i}", input_dim, width, seed)
    init_dense(params, "head", width, num_classes, seed)


def init_edge_ops(
    params: dict[str, Tensor], edge: Edge, ops: Sequence[OpKind], width: int, seed: int
) -> None:
    for op in ops:
        if op.is_parametric:
            init_dense(params, f"edge.{edge}.{op.tag}", width, width, seed)


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.bias_add(ad.matmul(x, w), b)


def stem_forward(params: Mapping[str, Tensor], x: Tensor, num_stems: int) -> list[Tensor]:
    return [
        ad.tanh(dense(x, params[f"stem.{i}.w"], params[f"stem.{i}.b"])) for i in range(num_stems)
    ]


def head_forward(params: Mapping[str, Tensor], h: Tensor) -> Tensor:
    return dense(h, params["head.w"], params["head.b"])


def noise_seed_for(base_seed: int, edge: Edge, noise_key: Sequence[object]) -> int:
    return derive_seed(base_seed, str(edge), *noise_key)


def apply_op(
    op: OpKind,
    edge: Edge,
    x: Tensor,
    params: Mapping[str, Tensor],
    noise_seed: int,
) -> Tensor | None:
    """
    Output of one candidate op on ``edge``; ``None`` stands for ZERO.

    NOISE ignores ``x`` and draws from ``noise_seed``.
    """
    if op is OpKind.SKIP:
        return x
    if op is OpKind.ZERO:
        return None
    if op is OpKind.NOISE:
        return ad.gaussian_noise_const(x.shape, noise_seed, x)
    out = dense(x, params[param_name(edge, op, "w")], params[param_name(edge, op, "b")])
    if op is OpKind.DENSE_RELU:
        return ad.relu(out)
    if op is OpKind.DENSE_TANH:
        return ad.tanh(out)
    return out


def sum_contributions(terms: Sequence[Tensor | None], shape: tuple[int, ...]) -> Tensor:
    """Sum in order, skipping zero contributions; all-zero gives a constant zero tensor."""
    total: Tensor | None = None
    for t in terms:
        if t is None:
            continue
        total = t if total is None else ad.add(total, t)
    return total if total is not None else Tensor(np.zeros(shape))


def cell_output(intermediate: Sequence[Tensor]) -> Tensor:
    k = len(intermediate)
    if k == 1:
        return intermediate[0]
    return ad.weighted_sum(Tensor(np.full(k, 1.0 / k)), list(intermediate))


@dataclass
class GenotypeNetwork:
    """Standalone discrete network for one genotype."""

    spec: CellSpec
    genotype: Genotype
    input_dim: int
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)
    noise_seed: int = 0

    @classmethod
    def initialize(
        cls,
        spec: CellSpec,
        genotype: Genotype,
        input_dim: int,
        num_classes: int,
        seed: int,
    ) -> "GenotypeNetwork":
        genotype.validate(spec)
        params: dict[str, Tensor] = {}
        init_stems_and_head(
            params, spec.num_inputs, input_dim, spec.feature_width, num_classes, seed
        )
        for edge, op in genotype.choices:
            init_edge_ops(params, edge, [op], spec.feature_width, seed)
        return cls(spec, genotype, input_dim, num_classes, params, derive_seed(seed, "noise"))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, x: Tensor, noise_key: Sequence[object] = EVAL_NOISE_KEY) -> Tensor:
        spec = self.spec
        nodes: list[Tensor] = stem_forward(self.params, x, spec.num_inputs)
        batch_shape = (x.shape[0], spec.feature_width)
        for node in spec.intermediate_nodes:
            terms = [
                apply_op(
                    self.genotype.op_choice[e],
                    e,
                    nodes[e.source],
                    self.params,
                    noise_seed_for(self.noise_seed, e, noise_key),
                )
                for e in self.genotype.retained(node)
            ]
            nodes.append(sum_contributions(terms, batch_shape))
        return head_forward(self.params, cell_output(nodes[spec.num_inputs :]))


@dataclass
class VanillaChain:
    """
    Plain feed-forward baseline: stem, ``depth`` distinct dense_relu layers, head.

    Every layer is width x width, so any two layers can trade places.
    """

    input_dim: int
    width: int
    depth: int
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialize(
        cls, input_dim: int, width: int, depth: int, num_classes: int, seed: int
    ) -> "VanillaChain":
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        params: dict[str, Tensor] = {}
        init_stems_and_head(params, 1, input_dim, width, num_classes, seed)
        for k in range(depth):
            init_dense(params, f"layer.{k}", width, width, seed)
        return cls(input_dim, width, depth, num_classes, params)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, x: Tensor, noise_key: Sequence[object] = EVAL_NOISE_KEY) -> Tensor:
        (h,) = stem_forward(self.params, x, 1)
        for k in range(self.depth):
            h = ad.relu(dense(h, self.params[f"layer.{k}.w"], self.params[f"layer.{k}.b"]))
        return head_forward(self.params, h)

    def swap_layers(self, i: int, j: int) -> "VanillaChain":
        """Copy with layers ``i`` and ``j`` exchanged; this chain is untouched."""
        if not (0 <= i < self.depth and 0 <= j < self.depth):
            raise ValueError(f"layer indices out of range: {i}, {j}")
        other = copy.deepcopy(self)
        for part in ("w", "b"):
            a, b = f"layer.{i}.{part}", f"layer.{j}.{part}"
            other.params[a], other.params[b] = other.params[b], other.params[a]
        return other
