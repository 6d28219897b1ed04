"""Architecture selection: magnitude, perturbation (PT), PT-Mag and operation strength."""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from tqdm import tqdm

from .datasets import Dataset
from .errors import InvariantError
from .prng import CounterRNG
from .searchspace import Edge, Genotype, OpKind
from .supernet import Supernet
from .trainer import TrainConfig, evaluate, fine_tune

# SelectionTrace row order when written as a table
TRACE_COLUMNS = [
    "step",
    "phase",
    "item",
    "candidates",
    "scores",
    "chosen",
    "val_accuracy_after",
    "alpha",
    "note",
]


class SelectionError(InvariantError):
    """Selection precondition violated or supernet changed by a candidate evaluation."""


class SelectMethod(Enum):
    MAG = "mag"
    PT = "pt"
    PT_MAG = "pt-mag"

    @classmethod
    def parse(cls, name: "str | SelectMethod") -> "SelectMethod":
        if isinstance(name, SelectMethod):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise SelectionError(f"unknown selection method {name!r} (valid: {valid})") from None


@dataclass(frozen=True)
class SelectConfig:
    """
    Selection recipe.

    ``topology_finetune_epochs`` defaults to ``finetune_epochs``;
    ``strength_epochs`` (the convergence budget of measure_op_strength)
    defaults to three times ``finetune_epochs``.
    """

    method: SelectMethod = SelectMethod.PT
    finetune_epochs: int = 5
    topology_finetune_epochs: int | None = None
    strength_epochs: int | None = None
    seed: int = 0
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def topology_budget(self) -> int:
        if self.topology_finetune_epochs is None:
            return self.finetune_epochs
        return self.topology_finetune_epochs

    @property
    def strength_budget(self) -> int:
        if self.strength_epochs is None:
            return 3 * self.finetune_epochs
        return self.strength_epochs


@dataclass
class SelectionDecision:
    phase: str
    item: str
    candidates: list[str]
    scores: dict[str, float]
    chosen: list[str]
    val_accuracy_after: float | None
    alpha: list[float] | None = None
    note: str = ""


@dataclass
class SelectionTrace:
    method: str
    seed: int
    edge_order: list[str] = field(default_factory=list)
    node_order: list[int] = field(default_factory=list)
    decisions: list[SelectionDecision] = field(default_factory=list)

    def to_rows(self) -> list[dict[str, Any]]:
        rows = []
        for step, d in enumerate(self.decisions):
            rows.append(
                {
                    "step": step,
                    "phase": d.phase,
                    "item": d.item,
                    "candidates": ",".join(d.candidates),
                    "scores": json.dumps(d.scores, sort_keys=True),
                    "chosen": ",".join(d.chosen),
                    "val_accuracy_after": d.val_accuracy_after,
                    "alpha": None if d.alpha is None else json.dumps(d.alpha),
                    "note": d.note,
                }
            )
        return rows


def _live_candidates(supernet: Supernet, edge: Edge) -> list[OpKind]:
    mask = supernet.alpha_table.mask[edge]
    return [
        op for i, op in enumerate(supernet.spec.pool(edge)) if mask[i] and op is not OpKind.ZERO
    ]


def _argmax_alpha(supernet: Supernet, edge: Edge, candidates: list[OpKind]) -> OpKind:
    """Largest α among ``candidates``; ties go to the lowest pool index."""
    pool = supernet.spec.pool(edge)
    alpha = supernet.alpha_table.alpha[edge].data
    return min(candidates, key=lambda op: (-alpha[pool.index(op)], pool.index(op)))


def _top_edges_by_strength(supernet: Supernet, node: int) -> list[Edge]:
    keep = supernet.spec.inputs_to_keep(node)
    inputs = supernet.active_inputs(node)
    ranked = sorted(
        inputs, key=lambda e: (-supernet.edge_strength(e), supernet.spec.edge_index(e))
    )
    return sorted(ranked[:keep])


def magnitude_select_traced(supernet: Supernet) -> tuple[Genotype, SelectionTrace]:
    """
    DARTS discretization from α alone; the supernet is not modified.

    Per edge the op with the largest α among active non-ZERO ops is chosen
    (ties to the lowest op index); per node the inputs with the largest
    raw non-ZERO α are retained (ties to the lowest edge index).
    """
    spec = supernet.spec
    trace = SelectionTrace(method="mag", seed=0)
    choice: dict[Edge, OpKind] = {}
    for edge in spec.edges:
        if edge in supernet.pruned_edges:
            continue
        if edge in supernet.discretized:
            choice[edge] = supernet.discretized[edge]
            continue
        candidates = _live_candidates(supernet, edge)
        if not candidates:
            raise SelectionError(f"edge {edge} has no selectable op")
        alpha = supernet.alpha_table.alpha[edge].data
        pool = spec.pool(edge)
        choice[edge] = _argmax_alpha(supernet, edge, candidates)
        trace.edge_order.append(str(edge))
        trace.decisions.append(
            SelectionDecision(
                phase="op",
                item=str(edge),
                candidates=[op.tag for op in candidates],
                scores={op.tag: float(alpha[pool.index(op)]) for op in candidates},
                chosen=[choice[edge].tag],
                val_accuracy_after=None,
                alpha=alpha.tolist(),
            )
        )

    retained: dict[Edge, OpKind] = {}
    for node in spec.intermediate_nodes:
        keep = _top_edges_by_strength(supernet, node)
        trace.node_order.append(node)
        trace.decisions.append(
            SelectionDecision(
                phase="topology",
                item=str(node),
                candidates=[str(e) for e in supernet.active_inputs(node)],
                scores={str(e): supernet.edge_strength(e) for e in supernet.active_inputs(node)},
                chosen=[str(e) for e in keep],
                val_accuracy_after=None,
            )
        )
        retained.update((e, choice[e]) for e in keep)

    genotype = Genotype.from_mapping(retained)
    genotype.validate(spec)
    return genotype, trace


def magnitude_select(supernet: Supernet) -> Genotype:
    return magnitude_select_traced(supernet)[0]


def _edge_order(supernet: Supernet, seed: int) -> list[Edge]:
    undecided = [
        e
        for e in supernet.spec.edges
        if e not in supernet.discretized and e not in supernet.pruned_edges
    ]
    perm = CounterRNG(seed).fork("edge-order").permutation(len(undecided))
    return [undecided[i] for i in perm]


def _node_order(supernet: Supernet, seed: int) -> list[int]:
    nodes = list(supernet.spec.intermediate_nodes)
    perm = CounterRNG(seed).fork("node-order").permutation(len(nodes))
    return [nodes[i] for i in perm]


def _masked_scores(
    supernet: Supernet, edge: Edge, candidates: list[OpKind], dataset: Dataset
) -> dict[OpKind, float]:
    """Validation accuracy with each candidate masked out in turn (ACC without o)."""
    before = supernet.checksum()
    scores: dict[OpKind, float] = {}
    for op in candidates:
        supernet.mask_op(edge, op)
        try:
            scores[op] = evaluate(supernet, dataset, "val")[0]
        finally:
            supernet.unmask_op(edge, op)
        if supernet.checksum() != before:
            raise SelectionError(f"evaluating {op.tag} on {edge} changed the supernet")
    return scores


def _most_damaging(
    candidates: list[OpKind],
    scores: dict[OpKind, float],
    alpha: np.ndarray,
    pool: tuple[OpKind, ...],
) -> OpKind:
    """Lowest accuracy without the op; ties to larger α, then lower op index."""
    return min(candidates, key=lambda op: (scores[op], -alpha[pool.index(op)], pool.index(op)))


def _lowest_two(
    supernet: Supernet, inputs: list[Edge], scores: dict[Edge, float], need: int
) -> list[Edge]:
    ranked = sorted(inputs, key=lambda e: (scores[e], supernet.spec.edge_index(e)))
    return sorted(ranked[:need])


def _progressive_ops(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    trace: SelectionTrace,
    perturbation: bool,
    verbose: bool,
) -> None:
    order = _edge_order(supernet, config.seed)
    trace.edge_order.extend(str(e) for e in order)
    pool_of = supernet.spec.pool
    for step, edge in enumerate(tqdm(order, desc="edges", disable=not verbose, leave=False)):
        candidates = _live_candidates(supernet, edge)
        if not candidates:
            raise SelectionError(f"edge {edge} has no selectable op")
        alpha = supernet.alpha_table.alpha[edge].data.copy()
        scores: dict[OpKind, float] = {}
        note = ""
        if len(candidates) == 1:
            chosen = candidates[0]
            note = "single candidate, decided without evaluation"
        elif perturbation:
            scores = _masked_scores(supernet, edge, candidates, dataset)
            chosen = _most_damaging(candidates, scores, alpha, pool_of(edge))
        else:
            chosen = _argmax_alpha(supernet, edge, candidates)

        supernet.discretize_edge(edge, chosen)
        fine_tune(
            supernet,
            dataset,
            config.train,
            config.finetune_epochs,
            stream=("select-op", trace.method, config.seed, step),
        )
        val_after = evaluate(supernet, dataset, "val")[0]
        trace.decisions.append(
            SelectionDecision(
                phase="op",
                item=str(edge),
                candidates=[op.tag for op in candidates],
                scores={op.tag: acc for op, acc in scores.items()},
                chosen=[chosen.tag],
                val_accuracy_after=val_after,
                alpha=alpha.tolist(),
                note=note,
            )
        )
        if verbose:
            tqdm.write(f"  {edge}: {chosen.tag} (val acc {val_after:.4f})")


def _progressive_topology(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    trace: SelectionTrace,
    perturbation: bool,
    verbose: bool,
) -> None:
    live = [e for e in supernet.spec.edges if e not in supernet.pruned_edges]
    if any(e not in supernet.discretized for e in live):
        raise SelectionError("topology selection needs every live edge discretized first")

    order = _node_order(supernet, config.seed)
    trace.node_order.extend(order)
    for step, node in enumerate(tqdm(order, desc="nodes", disable=not verbose, leave=False)):
        inputs = list(supernet.active_inputs(node))
        need = supernet.spec.inputs_to_keep(node)
        if len(inputs) <= need:
            trace.decisions.append(
                SelectionDecision(
                    phase="topology",
                    item=str(node),
                    candidates=[str(e) for e in inputs],
                    scores={},
                    chosen=[str(e) for e in inputs],
                    val_accuracy_after=evaluate(supernet, dataset, "val")[0],
                    note=f"{len(inputs)} inputs, kept without evaluation",
                )
            )
            continue

        scores: dict[Edge, float] = {}
        if perturbation:
            before = supernet.checksum()
            for edge in inputs:
                with supernet.edge_removed(edge):
                    scores[edge] = evaluate(supernet, dataset, "val")[0]
            if supernet.checksum() != before:
                raise SelectionError(f"evaluating inputs of node {node} changed the supernet")
            keep = _lowest_two(supernet, inputs, scores, need)
        else:
            scores = {e: supernet.edge_strength(e) for e in inputs}
            keep = _top_edges_by_strength(supernet, node)

        supernet.prune_node_inputs(node, keep)
        fine_tune(
            supernet,
            dataset,
            config.train,
            config.topology_budget,
            stream=("select-topology", trace.method, config.seed, step),
        )
        val_after = evaluate(supernet, dataset, "val")[0]
        trace.decisions.append(
            SelectionDecision(
                phase="topology",
                item=str(node),
                candidates=[str(e) for e in inputs],
                scores={str(e): s for e, s in scores.items()},
                chosen=[str(e) for e in keep],
                val_accuracy_after=val_after,
            )
        )
        if verbose:
            tqdm.write(f"  node {node}: keep {', '.join(str(e) for e in keep)}")


def pt_select_operations(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    trace: SelectionTrace | None = None,
    verbose: bool = False,
) -> tuple[Genotype, SelectionTrace]:
    """
    Perturbation-based operation selection, one edge at a time (supernet modified in place).

    Edges are visited in a seeded random order. For every active non-ZERO op the
    op is masked, validation accuracy is measured and the op is unmasked; the edge
    is discretized to the op whose removal hurts accuracy most, and the supernet
    is fine-tuned for ``finetune_epochs`` before the next edge.

    Returns:
        (partial genotype holding every decided edge, trace)
    """
    trace = trace or SelectionTrace(method="pt", seed=config.seed)
    if not dataset.split("val")[1].size:
        raise SelectionError("perturbation scores need a non-empty val split")
    _progressive_ops(supernet, dataset, config, trace, perturbation=True, verbose=verbose)
    return Genotype.from_mapping(dict(supernet.discretized)), trace


def pt_select_topology(
    supernet: Supernet,
    dataset: Dataset,
    config: SelectConfig,
    trace: SelectionTrace | None = None,
    verbose: bool = False,
) -> tuple[Genotype, SelectionTrace]:
    """
    Perturbation-based topology selection over nodes in seeded random order.

    Each input edge of a node is removed in turn and validation accuracy is
    measured; the two edges whose removal hurts most are kept, the rest are
    pruned, and the supernet is fine-tuned.
    """
    trace = trace or SelectionTrace(method="pt", seed=config.seed)
    _progressive_topology(supernet, dataset, config, trace, perturbation=True, verbose=verbose)
    return supernet.to_genotype(), trace


def pt_select(
    supernet: Supernet, dataset: Dataset, config: SelectConfig, verbose: bool = False
) -> tuple[Genotype, SelectionTrace]:
    """Operation phase followed by topology phase."""
    _, trace = pt_select_operations(supernet, dataset, config, verbose=verbose)
    return pt_select_topology(supernet, dataset, config, trace, verbose=verbose)


def pt_mag_select(
    supernet: Supernet, dataset: Dataset, config: SelectConfig, verbose: bool = False
) -> tuple[Genotype, SelectionTrace]:
    """Progressive schedule of PT with every decision taken by α magnitude instead."""
    trace = SelectionTrace(method="pt-mag", seed=config.seed)
    _progressive_ops(supernet, dataset, config, trace, perturbation=False, verbose=verbose)
    _progressive_topology(supernet, dataset, config, trace, perturbation=False, verbose=verbose)
    return supernet.to_genotype(), trace


def run_selection(
    supernet: Supernet, dataset: Dataset, config: SelectConfig, verbose: bool = False
) -> tuple[Genotype, SelectionTrace]:
    method = SelectMethod.parse(config.method)
    if method is SelectMethod.MAG:
        genotype, trace = magnitude_select_traced(supernet)
        trace.seed = config.seed
        return genotype, trace
    if method is SelectMethod.PT:
        return pt_select(supernet, dataset, config, verbose=verbose)
    return pt_mag_select(supernet, dataset, config, verbose=verbose)


def measure_op_strength(
    supernet: Supernet, edge: Edge, dataset: Dataset, config: SelectConfig
) -> dict[OpKind, float]:
    """
    Discretization accuracy at convergence of every active non-ZERO op on ``edge``.

    Each op is measured on its own deep clone: discretize the edge to the op,
    fine-tune for ``config.strength_budget`` epochs with the same stream for
    every op, and evaluate val accuracy. ``config.workers > 1`` runs the clones
    on a thread pool; results equal the sequential run.
    """
    if edge in supernet.discretized or edge in supernet.pruned_edges:
        raise SelectionError(f"edge {edge} is already decided")
    candidates = _live_candidates(supernet, edge)
    if not candidates:
        raise SelectionError(f"edge {edge} has no selectable op")

    def strength(op: OpKind) -> float:
        clone = supernet.clone()
        clone.discretize_edge(edge, op)
        fine_tune(
            clone, dataset, config.train, config.strength_budget, stream=("strength", str(edge))
        )
        return evaluate(clone, dataset, "val")[0]

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            values = list(pool.map(strength, candidates))
    else:
        values = [strength(op) for op in candidates]
    return dict(zip(candidates, values, strict=True))


def selection_summary(trace: SelectionTrace) -> dict[str, Any]:
    after = [d.val_accuracy_after for d in trace.decisions if d.val_accuracy_after is not None]
    return {
        "method": trace.method,
        "seed": trace.seed,
        "decisions": len(trace.decisions),
        "final_val_accuracy": after[-1] if after else None,
        "mean_val_accuracy_after": float(np.mean(after)) if after else None,
    }
