from dataclasses import replace

import numpy as np
import pytest

from scripts.nas_selection.bench import build_bench, query, rank_of
from scripts.nas_selection.searchspace import (
    Edge,
    OpKind,
    enumerate_genotypes,
    genotype_to_string,
)
from scripts.nas_selection.selection import (
    SelectConfig,
    SelectionError,
    SelectMethod,
    _lowest_two,
    _most_damaging,
    magnitude_select,
    magnitude_select_traced,
    measure_op_strength,
    pt_mag_select,
    pt_select,
    pt_select_operations,
    pt_select_topology,
    run_selection,
    selection_summary,
)
from scripts.nas_selection.supernet import Supernet
from scripts.nas_selection.trainer import AlphaMode, bilevel_train

E02, E12, E03, E13, E23 = Edge(2, 0), Edge(2, 1), Edge(3, 0), Edge(3, 1), Edge(3, 2)


@pytest.fixture
def untrained(s2p_spec, small_dataset):
    return Supernet.create(s2p_spec, small_dataset.input_dim, small_dataset.classes, seed=0)


def _set_alpha(supernet, values):
    for edge, alpha in values.items():
        supernet.alpha_table.alpha[edge].data = np.array(alpha, dtype=np.float64)


def test_magnitude_ties_go_to_lowest_index(untrained):
    before = untrained.checksum()
    genotype = magnitude_select(untrained)
    assert genotype_to_string(genotype) == "skip@0->2;skip@1->2;skip@0->3;skip@1->3"
    assert untrained.checksum() == before


def test_magnitude_follows_alpha(untrained):
    _set_alpha(
        untrained,
        {E02: [0.0, 2.0], E12: [1.0, 0.0], E03: [0.0, 0.1], E13: [3.0, 0.0], E23: [0.0, 4.0]},
    )
    genotype, trace = magnitude_select_traced(untrained)
    assert genotype_to_string(genotype) == "dense_relu@0->2;skip@1->2;skip@1->3;dense_relu@2->3"
    assert [d.phase for d in trace.decisions] == ["op"] * 5 + ["topology"] * 2
    assert trace.decisions[0].alpha == [0.0, 2.0]


def test_most_damaging_rule():
    pool = (OpKind.SKIP, OpKind.DENSE_RELU)
    candidates = list(pool)
    alpha = np.array([0.0, 0.0])
    scores = {OpKind.SKIP: 0.4, OpKind.DENSE_RELU: 0.59}
    assert _most_damaging(candidates, scores, alpha, pool) is OpKind.SKIP
    tied = {OpKind.SKIP: 0.5, OpKind.DENSE_RELU: 0.5}
    assert _most_damaging(candidates, tied, np.array([0.0, 1.0]), pool) is OpKind.DENSE_RELU
    assert _most_damaging(candidates, tied, alpha, pool) is OpKind.SKIP


def test_lowest_two_rule(untrained):
    scores = {E03: 0.50, E13: 0.80, E23: 0.79}
    assert _lowest_two(untrained, [E03, E13, E23], scores, 2) == [E03, E23]


def _check_trace_against_rules(supernet, trace):
    pool_of = supernet.spec.pool
    for decision in trace.decisions:
        if decision.phase != "op" or not decision.scores:
            continue
        pool = pool_of(Edge.parse(decision.item))
        alpha = decision.alpha
        best = min(
            decision.candidates,
            key=lambda tag: (
                decision.scores[tag],
                -alpha[pool.index(OpKind(tag))],
                pool.index(OpKind(tag)),
            ),
        )
        assert decision.chosen == [best]


def test_pt_pipeline(trained_supernet, small_dataset, short_select, s2p_spec):
    genotype, trace = pt_select(trained_supernet, small_dataset, short_select)
    keys = {genotype_to_string(g) for g in enumerate_genotypes(s2p_spec)}
    assert genotype_to_string(genotype) in keys
    assert sorted(trace.edge_order) == sorted(str(e) for e in s2p_spec.edges)
    assert sorted(trace.node_order) == [2, 3]
    _check_trace_against_rules(trained_supernet, trace)
    node2 = next(d for d in trace.decisions if d.phase == "topology" and d.item == "2")
    assert node2.scores == {}
    assert node2.chosen == ["0->2", "1->2"]
    for node in s2p_spec.intermediate_nodes:
        assert len(genotype.retained(node)) == 2


def test_pt_topology_keeps_lowest_scores(trained_supernet, small_dataset, short_select):
    _, trace = pt_select(trained_supernet, small_dataset, short_select)
    node3 = next(d for d in trace.decisions if d.phase == "topology" and d.item == "3")
    order = {str(e): i for i, e in enumerate(trained_supernet.spec.edges)}
    ranked = sorted(node3.candidates, key=lambda e: (node3.scores[e], order[e]))
    assert sorted(node3.chosen, key=order.get) == sorted(ranked[:2], key=order.get)


def test_pt_is_deterministic(trained_supernet, small_dataset, short_select):
    a, trace_a = pt_select(trained_supernet.clone(), small_dataset, short_select)
    b, trace_b = pt_select(trained_supernet.clone(), small_dataset, short_select)
    assert a == b
    assert trace_a.to_rows() == trace_b.to_rows()


def test_pt_operations_on_decided_supernet_is_identity(untrained, small_dataset, short_select):
    for edge in untrained.spec.edges:
        untrained.discretize_edge(edge, OpKind.SKIP)
    before = untrained.checksum()
    genotype, trace = pt_select_operations(untrained, small_dataset, short_select)
    assert trace.decisions == []
    assert untrained.checksum() == before
    assert len(genotype.choices) == 5


def test_topology_needs_decided_ops(trained_supernet, small_dataset, short_select):
    with pytest.raises(SelectionError):
        pt_select_topology(trained_supernet, small_dataset, short_select)


def test_pt_mag_matches_magnitude_for_decisive_alpha(untrained, small_dataset, short_select):
    _set_alpha(
        untrained,
        {E02: [5.0, 0.0], E12: [0.0, 5.0], E03: [5.0, 0.0], E13: [0.0, 5.0], E23: [1.0, 0.0]},
    )
    expected = magnitude_select(untrained)
    config = replace(short_select, finetune_epochs=0, topology_finetune_epochs=0)
    genotype, trace = pt_mag_select(untrained, small_dataset, config)
    assert genotype == expected
    op_decisions = [d for d in trace.decisions if d.phase == "op"]
    assert len(op_decisions) == 5
    assert all(d.alpha is not None and d.scores == {} for d in op_decisions)


def test_run_selection_dispatch(trained_supernet, small_dataset, short_select):
    config = replace(short_select, method=SelectMethod.parse("PT-MAG"))
    genotype, trace = run_selection(trained_supernet.clone(), small_dataset, config)
    assert trace.method == "pt-mag"
    mag_config = replace(short_select, method=SelectMethod.MAG)
    _, mag_trace = run_selection(trained_supernet, small_dataset, mag_config)
    assert mag_trace.seed == short_select.seed
    with pytest.raises(SelectionError, match="unknown selection method"):
        SelectMethod.parse("random")


def test_selection_summary(trained_supernet, small_dataset, short_select):
    _, trace = pt_select(trained_supernet, small_dataset, short_select)
    summary = selection_summary(trace)
    assert summary["method"] == "pt"
    assert summary["decisions"] == len(trace.decisions)
    assert summary["final_val_accuracy"] == trace.decisions[-1].val_accuracy_after


def test_measure_op_strength_leaves_original_untouched(
    trained_supernet, small_dataset, short_select
):
    before = trained_supernet.checksum()
    strengths = measure_op_strength(trained_supernet, E23, small_dataset, short_select)
    assert set(strengths) == {OpKind.SKIP, OpKind.DENSE_RELU}
    assert all(0.0 <= v <= 1.0 for v in strengths.values())
    assert trained_supernet.checksum() == before
    threaded = measure_op_strength(
        trained_supernet, E23, small_dataset, replace(short_select, workers=2)
    )
    assert threaded == strengths


def test_measure_op_strength_rejects_decided_edge(trained_supernet, small_dataset, short_select):
    trained_supernet.discretize_edge(E23, OpKind.SKIP)
    with pytest.raises(SelectionError):
        measure_op_strength(trained_supernet, E23, small_dataset, short_select)


def test_budget_defaults():
    config = SelectConfig(finetune_epochs=4)
    assert config.topology_budget == 4
    assert config.strength_budget == 12
    assert SelectConfig(finetune_epochs=4, strength_epochs=2).strength_budget == 2


def _check_pt_mag_trace(supernet, trace):
    order = {str(e): i for i, e in enumerate(supernet.spec.edges)}
    for decision in trace.decisions:
        if decision.phase == "op" and len(decision.candidates) > 1:
            pool = supernet.spec.pool(Edge.parse(decision.item))
            alpha = decision.alpha
            best = min(
                decision.candidates,
                key=lambda tag: (-alpha[pool.index(OpKind(tag))], pool.index(OpKind(tag))),
            )
            assert decision.chosen == [best]
        elif decision.phase == "topology" and decision.scores:
            need = len(decision.chosen)
            ranked = sorted(decision.candidates, key=lambda e: (-decision.scores[e], order[e]))
            assert sorted(decision.chosen, key=order.get) == sorted(ranked[:need], key=order.get)


def test_pt_mag_trace_follows_alpha(trained_supernet, small_dataset, short_select):
    _, trace = pt_mag_select(trained_supernet, small_dataset, short_select)
    assert any(len(d.candidates) > 1 for d in trace.decisions if d.phase == "op")
    _check_pt_mag_trace(trained_supernet, trace)


def test_pt_and_pt_mag_share_one_decision_schedule(trained_supernet, small_dataset, short_select):
    _, pt = pt_select(trained_supernet.clone(), small_dataset, short_select)
    _, pt_mag = pt_mag_select(trained_supernet.clone(), small_dataset, short_select)
    assert pt.edge_order == pt_mag.edge_order
    assert pt.node_order == pt_mag.node_order
    steps = list(zip(pt.decisions, pt_mag.decisions, strict=True))
    assert [(a.phase, a.item) for a, _ in steps] == [(b.phase, b.item) for _, b in steps]
    assert all(a.val_accuracy_after is not None for a, _ in steps)
    assert all(b.val_accuracy_after is not None for _, b in steps)


def test_fixed_zero_search_still_selects(single_node_spec, small_dataset, short_train):
    train = replace(short_train, alpha_mode=AlphaMode.FIXED_ZERO)
    supernet = Supernet.create(
        single_node_spec, small_dataset.input_dim, small_dataset.classes, seed=2
    )
    bilevel_train(supernet, small_dataset, train)
    assert genotype_to_string(magnitude_select(supernet)) == "skip@0->2;skip@1->2"

    config = SelectConfig(method=SelectMethod.PT, finetune_epochs=1, seed=5, train=train)
    genotype, trace = pt_select(supernet, small_dataset, config)
    assert all(not alpha.any() for alpha in (t.data for t in supernet.alpha_table.alpha.values()))
    assert all(d.scores for d in trace.decisions if d.phase == "op")
    db = build_bench(single_node_spec, small_dataset, replace(short_train, epochs=1), 1)
    assert 0.0 <= rank_of(db, genotype) < 1.0


# Directional checks over five search seeds on the S2P space


@pytest.mark.slow
def test_pt_selects_better_genotypes_than_magnitude(search_run, s2p_bench):
    at_least_mag = top_half = 0
    for seed in range(5):
        supernet, dataset, config = search_run(seed)
        mag = magnitude_select(supernet)
        pt, _ = pt_select(supernet, dataset, config)
        at_least_mag += query(s2p_bench, pt).mean_test >= query(s2p_bench, mag).mean_test
        top_half += rank_of(s2p_bench, pt) >= 0.5
    assert at_least_mag >= 4
    assert top_half >= 4


@pytest.mark.slow
def test_pt_keeps_supernet_accuracy_above_pt_mag(search_run):
    wins = 0
    for seed in range(5):
        supernet, dataset, config = search_run(seed)
        _, pt = pt_select(supernet.clone(), dataset, config)
        _, pt_mag = pt_mag_select(supernet.clone(), dataset, config)
        _check_pt_mag_trace(supernet, pt_mag)
        steps = zip(pt.decisions, pt_mag.decisions, strict=True)
        wins += all(a.val_accuracy_after >= b.val_accuracy_after for a, b in steps)
    assert wins >= 4


@pytest.mark.slow
def test_fixed_zero_pt_beats_chance(search_run, s2p_bench):
    above_chance = 0
    for seed in range(5):
        supernet, dataset, config = search_run(seed, AlphaMode.FIXED_ZERO)
        genotype, _ = pt_select(supernet, dataset, config)
        above_chance += rank_of(s2p_bench, genotype) > 0.5
    assert above_chance >= 3
