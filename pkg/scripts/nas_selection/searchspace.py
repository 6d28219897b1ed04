"""Cell DAG, candidate-operation pools, genotypes and exhaustive enumeration."""

import hashlib
import itertools
import json
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvariantError, NasSelectionError

DEFAULT_GENOTYPE_CAP = 10_000


class SearchSpaceError(NasSelectionError):
    """Invalid space definition or space variant."""


class GenotypeCapError(SearchSpaceError):
    """Enumeration would exceed the configured cap."""

    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"space has {count} genotypes, cap is {cap}")


class GenotypeParseError(SearchSpaceError):
    """Malformed genotype text."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class GenotypeInvariantError(SearchSpaceError, InvariantError):
    """Well-formed genotype text that does not describe a valid sub-DAG of the space."""


class OpKind(Enum):
    SKIP = "skip"
    ZERO = "zero"
    NOISE = "noise"
    DENSE = "dense"
    DENSE_RELU = "dense_relu"
    DENSE_TANH = "dense_tanh"

    @classmethod
    def from_tag(cls, tag: str) -> "OpKind":
        try:
            return cls(tag)
        except ValueError:
            raise SearchSpaceError(f"unknown op tag: {tag!r}") from None

    @property
    def tag(self) -> str:
        return self.value

    @property
    def is_parametric(self) -> bool:
        return self in (OpKind.DENSE, OpKind.DENSE_RELU, OpKind.DENSE_TANH)

    def param_count(self, width: int) -> int:
        """Weights plus bias of a width x width dense layer; zero for parameter-free ops."""
        return width * width + width if self.is_parametric else 0


# Canonical op order; pool order and tie-breaking follow it
OP_ORDER: tuple[OpKind, ...] = tuple(OpKind)


class SpaceVariant(Enum):
    FULL = "FULL"
    S1P = "S1P"
    S2P = "S2P"
    S3P = "S3P"
    S4P = "S4P"

    @classmethod
    def parse(cls, name: "str | SpaceVariant") -> "SpaceVariant":
        if isinstance(name, SpaceVariant):
            return name
        try:
            return cls(str(name).upper())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise SearchSpaceError(f"unknown space variant {name!r} (valid: {valid})") from None


VARIANT_POOLS: dict[SpaceVariant, tuple[OpKind, ...]] = {
    SpaceVariant.FULL: OP_ORDER,
    SpaceVariant.S2P: (OpKind.SKIP, OpKind.DENSE_RELU),
    SpaceVariant.S3P: (OpKind.SKIP, OpKind.ZERO, OpKind.DENSE_RELU),
    SpaceVariant.S4P: (OpKind.NOISE, OpKind.DENSE_RELU),
}


@dataclass(frozen=True, order=True)
class Edge:
    """Directed edge between two cell nodes; sorts by (target, source)."""

    target: int
    source: int

    def __str__(self) -> str:
        return f"{self.source}->{self.target}"

    @classmethod
    def parse(cls, text: str) -> "Edge":
        try:
            src, dst = text.split("->")
            return cls(target=int(dst), source=int(src))
        except ValueError:
            raise SearchSpaceError(f"malformed edge {text!r}, expected 'src->dst'") from None


@dataclass(frozen=True)
class CellSpec:
    """
    One cell: input nodes ``0..num_inputs-1`` followed by intermediate nodes,
    every intermediate node fed by every earlier node.
    """

    variant: SpaceVariant
    num_inputs: int
    num_intermediate: int
    feature_width: int
    edges: tuple[Edge, ...]
    pools: tuple[tuple[OpKind, ...], ...]
    _index: dict[Edge, int] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.num_inputs < 1 or self.num_intermediate < 1 or self.feature_width < 1:
            raise SearchSpaceError("num_inputs, num_intermediate and feature_width must be >= 1")
        if len(self.edges) != len(self.pools):
            raise SearchSpaceError("edges and pools differ in length")
        expected = tuple(
            Edge(target=t, source=s)
            for t in range(self.num_inputs, self.num_nodes)
            for s in range(t)
        )
        if self.edges != expected:
            raise SearchSpaceError("edges must be the complete DAG ordered by (target, source)")
        for edge, pool in zip(self.edges, self.pools, strict=True):
            if not pool:
                raise SearchSpaceError(f"edge {edge} has an empty pool")
            if len(set(pool)) != len(pool):
                raise SearchSpaceError(f"edge {edge} has duplicate ops in its pool")
        object.__setattr__(self, "_index", {e: i for i, e in enumerate(self.edges)})

    @property
    def num_nodes(self) -> int:
        return self.num_inputs + self.num_intermediate

    @property
    def intermediate_nodes(self) -> range:
        return range(self.num_inputs, self.num_nodes)

    def edge_index(self, edge: Edge) -> int:
        try:
            return self._index[edge]
        except KeyError:
            raise SearchSpaceError(f"edge {edge} is not in the space") from None

    def has_edge(self, edge: Edge) -> bool:
        return edge in self._index

    def pool(self, edge: Edge) -> tuple[OpKind, ...]:
        return self.pools[self.edge_index(edge)]

    def selectable_ops(self, edge: Edge) -> tuple[OpKind, ...]:
        return tuple(op for op in self.pool(edge) if op is not OpKind.ZERO)

    def incoming(self, node: int) -> tuple[Edge, ...]:
        return tuple(e for e in self.edges if e.target == node)

    def inputs_to_keep(self, node: int) -> int:
        """Retained inputs per node: 2, or every input when the node has fewer."""
        return min(2, len(self.incoming(node)))

    def descriptor(self) -> dict:
        return {
            "variant": self.variant.value,
            "num_inputs": self.num_inputs,
            "num_intermediate": self.num_intermediate,
            "feature_width": self.feature_width,
            "pools": {
                str(e): [op.tag for op in p]
                for e, p in zip(self.edges, self.pools, strict=True)
            },
        }

    def spec_hash(self) -> str:
        payload = json.dumps(self.descriptor(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_space(
    variant: "str | SpaceVariant",
    num_inputs: int = 2,
    num_intermediate: int = 2,
    feature_width: int = 8,
    s1_pools: Mapping[str, Sequence[str]] | None = None,
) -> CellSpec:
    """
    Build the complete cell DAG for a space variant.

    Args:
        variant: FULL, S1P, S2P, S3P or S4P
        num_inputs: Input nodes (>= 1)
        num_intermediate: Intermediate nodes (>= 1)
        feature_width: Shared width of every feature map
        s1_pools: For S1P only, ``{"src->dst": [tag_a, tag_b]}`` for every edge

    Returns:
        CellSpec with edges ordered by (target, source)
    """
    kind = SpaceVariant.parse(variant)
    if num_inputs < 1 or num_intermediate < 1 or feature_width < 1:
        raise SearchSpaceError("num_inputs, num_intermediate and feature_width must be >= 1")
    edges = tuple(
        Edge(target=t, source=s)
        for t in range(num_inputs, num_inputs + num_intermediate)
        for s in range(t)
    )

    if kind is SpaceVariant.S1P:
        if not s1_pools:
            raise SearchSpaceError("S1P needs per-edge pools (space.s1_pools)")
        known = {str(e) for e in edges}
        unknown = sorted(set(s1_pools) - known)
        if unknown:
            raise SearchSpaceError(f"s1_pools names edges outside the space: {unknown}")
        pools = []
        for edge in edges:
            tags = s1_pools.get(str(edge))
            if tags is None:
                raise SearchSpaceError(f"s1_pools has no entry for edge {edge}")
            ops = [OpKind.from_tag(t) for t in tags]
            if len(ops) != 2 or ops[0] is ops[1]:
                raise SearchSpaceError(f"s1_pools entry for {edge} must list two distinct ops")
            pools.append(tuple(sorted(ops, key=OP_ORDER.index)))
        return CellSpec(kind, num_inputs, num_intermediate, feature_width, edges, tuple(pools))

    pool = VARIANT_POOLS[kind]
    return CellSpec(
        kind, num_inputs, num_intermediate, feature_width, edges, tuple(pool for _ in edges)
    )


@dataclass(frozen=True)
class Genotype:
    """Discrete architecture: retained edges, each with one non-ZERO op, in canonical order."""

    choices: tuple[tuple[Edge, OpKind], ...]

    @classmethod
    def from_mapping(cls, op_choice: Mapping[Edge, OpKind]) -> "Genotype":
        return cls(tuple(sorted(op_choice.items(), key=lambda item: item[0])))

    @property
    def op_choice(self) -> dict[Edge, OpKind]:
        return dict(self.choices)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple(e for e, _ in self.choices)

    def retained(self, node: int) -> tuple[Edge, ...]:
        return tuple(e for e, _ in self.choices if e.target == node)

    def validate(self, spec: CellSpec) -> None:
        """Raise GenotypeInvariantError unless this is a valid sub-DAG of ``spec``."""
        seen: set[Edge] = set()
        for edge, op in self.choices:
            if edge in seen:
                raise GenotypeInvariantError(f"edge {edge} listed twice")
            seen.add(edge)
            if not spec.has_edge(edge):
                raise GenotypeInvariantError(f"edge {edge} is not in the space")
            if op is OpKind.ZERO:
                raise GenotypeInvariantError(f"edge {edge}: zero is never a final op")
            if op not in spec.pool(edge):
                raise GenotypeInvariantError(f"edge {edge}: op {op.tag} not in its pool")
        for node in spec.intermediate_nodes:
            n = len(self.retained(node))
            need = spec.inputs_to_keep(node)
            if n != need:
                raise GenotypeInvariantError(f"node {node} lists {n} inputs, expected {need}")


def count_genotypes(spec: CellSpec) -> int:
    """Exact genotype count (ZERO excluded), without enumerating."""
    total = 1
    for node in spec.intermediate_nodes:
        options = 0
        for pair in itertools.combinations(spec.incoming(node), spec.inputs_to_keep(node)):
            options += math.prod(len(spec.selectable_ops(e)) for e in pair)
        total *= options
    return total


def iter_genotypes(spec: CellSpec) -> Iterator[Genotype]:
    """Yield every genotype: topologies in node order, then op choices in pool order."""
    per_node = [
        list(itertools.combinations(spec.incoming(node), spec.inputs_to_keep(node)))
        for node in spec.intermediate_nodes
    ]
    for topology in itertools.product(*per_node):
        retained = sorted(e for pair in topology for e in pair)
        for ops in itertools.product(*(spec.selectable_ops(e) for e in retained)):
            yield Genotype(tuple(zip(retained, ops, strict=True)))


def enumerate_genotypes(spec: CellSpec, cap: int = DEFAULT_GENOTYPE_CAP) -> list[Genotype]:
    count = count_genotypes(spec)
    if count > cap:
        raise GenotypeCapError(count, cap)
    return list(iter_genotypes(spec))


def genotype_to_string(genotype: Genotype) -> str:
    return ";".join(f"{op.tag}@{edge}" for edge, op in sorted(genotype.choices, key=lambda c: c[0]))


def _scan_int(text: str, pos: int, offset: int, what: str) -> tuple[int, int]:
    end = pos
    while end < len(text) and text[end].isdigit():
        end += 1
    if end == pos:
        raise GenotypeParseError(f"expected {what}", offset + pos)
    return int(text[pos:end]), end


def _parse_item(item: str, offset: int) -> tuple[Edge, OpKind]:
    at = item.find("@")
    if at <= 0:
        raise GenotypeParseError("expected 'op@src->dst'", offset + max(at, 0))
    tag = item[:at]
    try:
        op = OpKind(tag)
    except ValueError:
        raise GenotypeParseError(f"unknown op tag {tag!r}", offset) from None
    source, pos = _scan_int(item, at + 1, offset, "source node index")
    if not item.startswith("->", pos):
        raise GenotypeParseError("expected '->'", offset + pos)
    target, pos = _scan_int(item, pos + 2, offset, "target node index")
    if pos != len(item):
        raise GenotypeParseError("unexpected trailing characters", offset + pos)
    return Edge(target=target, source=source), op


def parse_genotype(text: str, spec: CellSpec) -> Genotype:
    """
    Parse ``op@src->dst;...`` and validate it against ``spec``.

    Raises:
        GenotypeParseError: Malformed text or unknown op tag (with character position)
        GenotypeInvariantError: Edge outside the space, op outside the pool, or a
            node without exactly its required inputs
    """
    if not text:
        raise GenotypeParseError("empty genotype", 0)
    choices: dict[Edge, OpKind] = {}
    offset = 0
    for item in text.split(";"):
        edge, op = _parse_item(item, offset)
        if edge in choices:
            raise GenotypeInvariantError(f"edge {edge} listed twice")
        choices[edge] = op
        offset += len(item) + 1
    genotype = Genotype.from_mapping(choices)
    genotype.validate(spec)
    return genotype


def top2_pools_from_alpha(
    spec: CellSpec, alpha: Mapping[Edge, np.ndarray]
) -> dict[str, list[str]]:
    """
    Per-edge pools of the two strongest non-ZERO ops of a trained supernet.

    Ties go to the op that comes first in the pool. The result is suitable for
    ``space.s1_pools``.
    """
    pools: dict[str, list[str]] = {}
    for edge in spec.edges:
        pool = spec.pool(edge)
        values = np.asarray(alpha[edge], dtype=np.float64)
        ranked = sorted(
            (i for i, op in enumerate(pool) if op is not OpKind.ZERO),
            key=lambda i: (-values[i], i),
        )
        if len(ranked) < 2:
            raise SearchSpaceError(f"edge {edge} has fewer than two selectable ops")
        top = sorted(ranked[:2])
        pools[str(edge)] = [pool[i].tag for i in top]
    return pools
