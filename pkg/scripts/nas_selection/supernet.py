"""Continuously relaxed supernet: mixed edges, masking, discretization, pruning, shuffling."""

import copy
import hashlib
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvariantError
from .networks import (
    EVAL_NOISE_KEY,
    GenotypeNetwork,
    apply_op,
    cell_output,
    head_forward,
    init_edge_ops,
    init_stems_and_head,
    noise_seed_for,
    param_name,
    stem_forward,
    sum_contributions,
)
from .prng import CounterRNG, derive_seed
from .searchspace import CellSpec, Edge, Genotype, OpKind


class SupernetError(InvariantError):
    """Precondition of a supernet operation violated."""


def alpha_name(edge: Edge) -> str:
    return f"alpha.{edge}"


def _softmax(values: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    active = np.ones(values.shape, dtype=bool) if mask is None else mask
    out = np.zeros(values.shape)
    z = values[active]
    e = np.exp(z - z.max())
    out[active] = e / e.sum()
    return out


@dataclass
class AlphaTable:
    """Architecture logits and op masks for every edge of a cell."""

    spec: CellSpec
    alpha: dict[Edge, Tensor]
    mask: dict[Edge, np.ndarray]
    frozen: bool = False
    renormalize: bool = True
    decided: set[Edge] = field(default_factory=set)

    @classmethod
    def zeros(cls, spec: CellSpec, renormalize: bool = True) -> "AlphaTable":
        alpha = {
            e: Tensor(np.zeros(len(spec.pool(e))), requires_grad=True, name=alpha_name(e))
            for e in spec.edges
        }
        mask = {e: np.ones(len(spec.pool(e)), dtype=bool) for e in spec.edges}
        return cls(spec, alpha, mask, renormalize=renormalize)

    def weights(self, edge: Edge, alpha: Tensor | None = None) -> Tensor:
        """Differentiable mixing weights of ``edge`` over its active ops."""
        source = self.alpha[edge] if alpha is None else alpha
        return ad.softmax(source, self.mask[edge], renormalize=self.renormalize)

    def softmax(self, edge: Edge, masked: bool = True) -> np.ndarray:
        values = self.alpha[edge].data
        if not masked:
            return _softmax(values)
        if self.renormalize:
            return _softmax(values, self.mask[edge])
        return _softmax(values) * self.mask[edge]

    def trainable(self) -> dict[str, Tensor]:
        """α tensors that an α-step may update (none when frozen, never decided edges)."""
        if self.frozen:
            return {}
        return {alpha_name(e): self.alpha[e] for e in self.spec.edges if e not in self.decided}

    def snapshot(self) -> dict[str, list[float]]:
        return {str(e): self.alpha[e].data.tolist() for e in self.spec.edges}

    def zero_and_freeze(self) -> None:
        for edge in self.spec.edges:
            self.alpha[edge].data = np.zeros(len(self.spec.pool(edge)))
        self.frozen = True


@dataclass
class Supernet:
    """Weight-sharing network holding every candidate op on every edge."""

    spec: CellSpec
    input_dim: int
    num_classes: int
    weights: dict[str, Tensor]
    alpha_table: AlphaTable
    noise_seed: int
    discretized: dict[Edge, OpKind] = field(default_factory=dict)
    pruned_edges: set[Edge] = field(default_factory=set)
    _removed: set[Edge] = field(default_factory=set, repr=False)

    @classmethod
    def create(
        cls,
        spec: CellSpec,
        input_dim: int,
        num_classes: int,
        seed: int,
        renormalize: bool = True,
    ) -> "Supernet":
        weights: dict[str, Tensor] = {}
        init_stems_and_head(
            weights, spec.num_inputs, input_dim, spec.feature_width, num_classes, seed
        )
        for edge in spec.edges:
            init_edge_ops(weights, edge, spec.pool(edge), spec.feature_width, seed)
        return cls(
            spec=spec,
            input_dim=input_dim,
            num_classes=num_classes,
            weights=weights,
            alpha_table=AlphaTable.zeros(spec, renormalize=renormalize),
            noise_seed=derive_seed(seed, "noise"),
        )

    # ------------------------------------------------------------------
    # Forward
    # ------------------------------------------------------------------

    def _edge_output(
        self,
        edge: Edge,
        x: Tensor,
        noise_key: Sequence[object],
        weights: Mapping[str, Tensor],
        alpha: Mapping[Edge, Tensor] | None,
    ) -> Tensor | None:
        seed = noise_seed_for(self.noise_seed, edge, noise_key)
        params = weights
        if edge in self.discretized:
            return apply_op(self.discretized[edge], edge, x, params, seed)
        mask = self.alpha_table.mask[edge]
        if not mask.any():
            raise SupernetError(f"every op on edge {edge} is masked")
        terms = [
            apply_op(op, edge, x, params, seed) if mask[i] else None
            for i, op in enumerate(self.spec.pool(edge))
        ]
        if all(t is None for t in terms):
            return None
        mix = self.alpha_table.weights(edge, None if alpha is None else alpha[edge])
        return ad.weighted_sum(mix, terms)

    def mixed_edge_forward(
        self, edge: Edge, x: Tensor, noise_key: Sequence[object] = EVAL_NOISE_KEY
    ) -> Tensor:
        """Softmax-weighted sum of the active ops of ``edge`` applied to ``x``."""
        if edge in self.pruned_edges:
            raise SupernetError(f"edge {edge} is pruned")
        if x.data.ndim != 2 or x.shape[1] != self.spec.feature_width:
            raise SupernetError(f"edge input must have width {self.spec.feature_width}")
        out = self._edge_output(edge, x, noise_key, self.weights, None)
        return out if out is not None else Tensor(np.zeros(x.shape))

    def _node_values(
        self,
        x: Tensor,
        noise_key: Sequence[object],
        weights: Mapping[str, Tensor],
        alpha: Mapping[Edge, Tensor] | None,
    ) -> list[Tensor]:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise SupernetError(f"input width {x.shape} does not match supernet ({self.input_dim})")
        params = weights
        nodes: list[Tensor] = stem_forward(params, x, self.spec.num_inputs)
        shape = (x.shape[0], self.spec.feature_width)
        for node in self.spec.intermediate_nodes:
            terms = [
                None
                if e in self.pruned_edges or e in self._removed
                else self._edge_output(e, nodes[e.source], noise_key, params, alpha)
                for e in self.spec.incoming(node)
            ]
            nodes.append(sum_contributions(terms, shape))
        return nodes

    def forward(
        self,
        x: Tensor,
        noise_key: Sequence[object] = EVAL_NOISE_KEY,
        *,
        weights: Mapping[str, Tensor] | None = None,
        alpha: Mapping[Edge, Tensor] | None = None,
    ) -> Tensor:
        """
        Logits of shape (batch, num_classes).

        ``weights`` and ``alpha`` substitute the stored tensors for one pass; the
        trainer passes detached copies so that only one side receives gradients.
        """
        params = self.weights if weights is None else weights
        nodes = self._node_values(x, noise_key, params, alpha)
        return head_forward(params, cell_output(nodes[self.spec.num_inputs :]))

    def forward_trace(
        self, x: Tensor, noise_key: Sequence[object] = EVAL_NOISE_KEY
    ) -> tuple[list[np.ndarray], dict[Edge, dict[OpKind, np.ndarray]]]:
        """Node values and every active op's raw output per edge (no tape)."""
        if ad.active_tape() is not None:
            raise SupernetError("forward_trace must run outside a tape")
        nodes = self._node_values(x, noise_key, self.weights, None)
        ops: dict[Edge, dict[OpKind, np.ndarray]] = {}
        for edge in self.spec.edges:
            if edge in self.pruned_edges:
                continue
            seed = noise_seed_for(self.noise_seed, edge, noise_key)
            outputs: dict[OpKind, np.ndarray] = {}
            for op in self.spec.pool(edge):
                out = apply_op(op, edge, nodes[edge.source], self.weights, seed)
                outputs[op] = np.zeros(nodes[edge.source].shape) if out is None else out.data
            ops[edge] = outputs
        return [n.data for n in nodes], ops

    # ------------------------------------------------------------------
    # Parameters
    # ------------------------------------------------------------------

    def trainable_weights(self) -> dict[str, Tensor]:
        """Weights that still influence the output: pruned edges and unchosen ops excluded."""
        frozen_prefixes = [f"edge.{e}." for e in self.pruned_edges]
        for edge, op in self.discretized.items():
            frozen_prefixes.extend(
                f"edge.{edge}.{other.tag}." for other in self.spec.pool(edge) if other is not op
            )
        return {
            name: t
            for name, t in self.weights.items()
            if not any(name.startswith(p) for p in frozen_prefixes)
        }

    def alpha_softmax(self, edge: Edge) -> np.ndarray:
        return self.alpha_table.softmax(edge)

    def edge_strength(self, edge: Edge) -> float:
        """Largest raw α among the active non-ZERO ops of ``edge``."""
        values = self.alpha_table.alpha[edge].data
        mask = self.alpha_table.mask[edge]
        pool = self.spec.pool(edge)
        return max(
            float(values[i])
            for i, op in enumerate(pool)
            if mask[i] and op is not OpKind.ZERO
        )

    def skip_conv_gap(self) -> float:
        """Mean over edges of softmax(α)[SKIP] - softmax(α)[conv] on two-op skip/conv pools."""
        gaps = []
        for edge in self.spec.edges:
            pool = self.spec.pool(edge)
            if len(pool) != 2 or OpKind.SKIP not in pool:
                raise SupernetError(f"skip/conv gap undefined on edge {edge} with pool {pool}")
            conv = pool[1 - pool.index(OpKind.SKIP)]
            if not conv.is_parametric:
                raise SupernetError(f"skip/conv gap undefined on edge {edge} with pool {pool}")
            weights = self.alpha_table.softmax(edge, masked=False)
            gaps.append(weights[pool.index(OpKind.SKIP)] - weights[pool.index(conv)])
        return float(np.mean(gaps))

    def has_gap(self) -> bool:
        try:
            self.skip_conv_gap()
        except SupernetError:
            return False
        return True

    # ------------------------------------------------------------------
    # Structural edits
    # ------------------------------------------------------------------

    def _op_index(self, edge: Edge, op: OpKind) -> int:
        pool = self.spec.pool(edge)
        if op not in pool:
            raise SupernetError(f"op {op.tag} is not in the pool of edge {edge}")
        return pool.index(op)

    def mask_op(self, edge: Edge, op: OpKind) -> None:
        if edge in self.discretized:
            raise SupernetError(f"edge {edge} is already discretized")
        i = self._op_index(edge, op)
        mask = self.alpha_table.mask[edge]
        if mask[i] and mask.sum() == 1:
            raise SupernetError(f"cannot mask the last active op on edge {edge}")
        mask[i] = False

    def unmask_op(self, edge: Edge, op: OpKind) -> None:
        if edge in self.discretized:
            raise SupernetError(f"edge {edge} is already discretized")
        self.alpha_table.mask[edge][self._op_index(edge, op)] = True

    def discretize_edge(self, edge: Edge, op: OpKind) -> None:
        """Fix ``edge`` to ``op``; its α entries stay but are excluded from updates."""
        if edge in self.discretized:
            raise SupernetError(f"edge {edge} is already discretized")
        if edge in self.pruned_edges:
            raise SupernetError(f"edge {edge} is pruned")
        if op is OpKind.ZERO:
            raise SupernetError("zero cannot be chosen as a final op")
        i = self._op_index(edge, op)
        one_hot = np.zeros(len(self.spec.pool(edge)), dtype=bool)
        one_hot[i] = True
        self.alpha_table.mask[edge] = one_hot
        self.alpha_table.decided.add(edge)
        self.discretized[edge] = op

    def active_inputs(self, node: int) -> tuple[Edge, ...]:
        return tuple(e for e in self.spec.incoming(node) if e not in self.pruned_edges)

    def prune_node_inputs(self, node: int, keep: Sequence[Edge]) -> None:
        kept = set(keep)
        if len(kept) != 2 or len(keep) != 2:
            raise SupernetError(f"keep-set must name exactly 2 distinct edges, got {list(keep)}")
        active = self.active_inputs(node)
        for edge in kept:
            if edge.target != node or not self.spec.has_edge(edge):
                raise SupernetError(f"edge {edge} is not an input of node {node}")
            if edge in self.pruned_edges:
                raise SupernetError(f"keep edge {edge} is already pruned")
        if len(active) <= 2:
            raise SupernetError(f"node {node} has {len(active)} active inputs, nothing to prune")
        self.pruned_edges.update(e for e in active if e not in kept)

    @contextmanager
    def edge_removed(self, edge: Edge) -> Iterator[None]:
        """Zero the contribution of ``edge`` for the duration of the block."""
        self._removed.add(edge)
        try:
            yield
        finally:
            self._removed.discard(edge)

    def swappable_pairs(self) -> list[tuple[Edge, Edge]]:
        live = [e for e in self.spec.edges if e not in self.pruned_edges]
        return [
            (a, b) for a, b in combinations(live, 2) if self.spec.pool(a) == self.spec.pool(b)
        ]

    def can_shuffle(self) -> bool:
        return bool(self.swappable_pairs())

    def shuffle_edges(self, seed: int) -> "Supernet":
        """Copy with two randomly chosen pool-compatible edges swapped; self is untouched."""
        pairs = self.swappable_pairs()
        if not pairs:
            raise SupernetError("no pair of edges with a compatible signature")
        a, b = pairs[int(CounterRNG(seed).integers(len(pairs), 1)[0])]
        return self.swap_edges(a, b)

    def swap_edges(self, a: Edge, b: Edge) -> "Supernet":
        if self.spec.pool(a) != self.spec.pool(b):
            raise SupernetError(f"edges {a} and {b} have different pools")
        other = self.clone()
        for op in self.spec.pool(a):
            if not op.is_parametric:
                continue
            for part in ("w", "b"):
                na, nb = param_name(a, op, part), param_name(b, op, part)
                other.weights[na].data, other.weights[nb].data = (
                    self.weights[nb].data.copy(),
                    self.weights[na].data.copy(),
                )
        table = other.alpha_table
        table.alpha[a].data, table.alpha[b].data = (
            self.alpha_table.alpha[b].data.copy(),
            self.alpha_table.alpha[a].data.copy(),
        )
        table.mask[a], table.mask[b] = (
            self.alpha_table.mask[b].copy(),
            self.alpha_table.mask[a].copy(),
        )
        for edge_x, edge_y in ((a, b), (b, a)):
            if edge_y in self.discretized:
                other.discretized[edge_x] = self.discretized[edge_y]
                table.decided.add(edge_x)
            else:
                other.discretized.pop(edge_x, None)
                table.decided.discard(edge_x)
        return other

    # ------------------------------------------------------------------
    # Copies and identity
    # ------------------------------------------------------------------

    def clone(self) -> "Supernet":
        return copy.deepcopy(self)

    def checksum(self) -> str:
        """SHA-256 over weights, α, masks and the decided structure."""
        hasher = hashlib.sha256()
        for name in sorted(self.weights):
            hasher.update(name.encode("utf-8"))
            hasher.update(self.weights[name].data.tobytes())
        for edge in self.spec.edges:
            hasher.update(str(edge).encode("utf-8"))
            hasher.update(self.alpha_table.alpha[edge].data.tobytes())
            hasher.update(self.alpha_table.mask[edge].tobytes())
        decided = sorted((str(e), op.tag) for e, op in self.discretized.items())
        pruned = sorted(str(e) for e in self.pruned_edges)
        hasher.update(repr((decided, pruned, self.alpha_table.frozen)).encode("utf-8"))
        return hasher.hexdigest()

    def is_fully_decided(self) -> bool:
        live = [e for e in self.spec.edges if e not in self.pruned_edges]
        if any(e not in self.discretized for e in live):
            return False
        return all(
            len(self.active_inputs(n)) == self.spec.inputs_to_keep(n)
            for n in self.spec.intermediate_nodes
        )

    def to_genotype(self) -> Genotype:
        if not self.is_fully_decided():
            raise SupernetError("supernet still has undecided edges or unpruned nodes")
        genotype = Genotype.from_mapping(
            {e: op for e, op in self.discretized.items() if e not in self.pruned_edges}
        )
        genotype.validate(self.spec)
        return genotype

    def to_genotype_network(self) -> GenotypeNetwork:
        """Standalone network sharing this supernet's trained weights (copied)."""
        genotype = self.to_genotype()
        names = [n for n in self.weights if n.startswith(("stem.", "head."))]
        for edge, op in genotype.choices:
            if op.is_parametric:
                names.extend(param_name(edge, op, part) for part in ("w", "b"))
        params = {n: Tensor(self.weights[n].data, requires_grad=True, name=n) for n in names}
        return GenotypeNetwork(
            self.spec, genotype, self.input_dim, self.num_classes, params, self.noise_seed
        )
