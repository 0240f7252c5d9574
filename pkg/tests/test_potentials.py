import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxcrf.graph import ABOVE_BELOW, SURROUND, build_graph, default_relations
from ctxcrf.nn import ParamStore
from ctxcrf.potentials import (
    UNARY,
    ContextCRF,
    Head,
    PotentialNetsConfig,
    PotentialTables,
    batch_edges,
    energy,
    pairwise_forward,
    unary_forward,
)
from ctxcrf.bench.suites import tiny_nets_config


def make_head(widths, seed=0):
    return Head.build(ParamStore(), "h.", widths, np.random.default_rng(seed))


def zero_head(widths):
    head = make_head(widths)
    for _, t in head.params.items():
        t.data[...] = 0.0
    return head


def random_tables(graph, k, rng):
    return PotentialTables(
        rng.standard_normal((graph.num_nodes, k)),
        {n: rng.standard_normal((len(e), k, k)) for n, e in graph.edge_sets.items()},
    )


def summation_oracle(graph, tables, y):
    # coded independently from energy(): loop over every node and edge
    e = 0.0
    for p in range(graph.num_nodes):
        e += -tables.unary[p][y[p]]
    for name, edges in graph.edge_sets.items():
        for i in range(len(edges)):
            p, q = edges[i]
            e += -tables.pairwise[name][i][y[p]][y[q]]
    return e


# -- unary ------------------------------------------------------------------


def test_zero_unary_head_gives_zero_table():
    fmap = np.random.default_rng(0).standard_normal((6, 3, 4))
    out = unary_forward(fmap, zero_head((6, 5, 3)))
    assert out.shape == (12, 3)
    assert np.all(out.data == 0.0)


def test_selecting_head_copies_channels():
    d, k = 5, 3
    head = Head(ParamStore(), "h.", (d, k))
    sel = np.zeros((k, d))
    sel[[0, 1, 2], [4, 0, 2]] = 1.0
    head.params.add("h.fc1.weight", sel)
    head.params.add("h.fc1.bias", np.zeros(k))
    fmap = np.random.default_rng(1).standard_normal((d, 2, 3))
    out = unary_forward(fmap, head).data
    np.testing.assert_array_equal(out, fmap[[4, 0, 2]].reshape(k, -1).T)


def test_permuting_locations_permutes_rows():
    rng = np.random.default_rng(2)
    fmap = rng.standard_normal((4, 3, 3))
    head = make_head((4, 6, 2), seed=2)
    base = unary_forward(fmap, head).data
    swapped = fmap.copy()
    swapped[:, 0, 1], swapped[:, 2, 2] = fmap[:, 2, 2], fmap[:, 0, 1]
    out = unary_forward(swapped, head).data
    p, q = 1, 8
    np.testing.assert_array_equal(out[p], base[q])
    np.testing.assert_array_equal(out[q], base[p])


def test_unary_width_mismatch_rejected():
    with pytest.raises(ValueError, match="channels"):
        unary_forward(np.zeros((3, 2, 2)), make_head((4, 2)))


# -- pairwise -------------------------------------------------------------------


def test_zero_pairwise_head_gives_zero_tables():
    fmap = np.random.default_rng(0).standard_normal((3, 2, 2))
    out = pairwise_forward(fmap, [(0, 1), (1, 3)], zero_head((6, 4, 9)))
    assert out.shape == (2, 3, 3)
    assert np.all(out.data == 0.0)


def test_pairwise_k2_shape():
    fmap = np.random.default_rng(0).standard_normal((3, 2, 2))
    out = pairwise_forward(fmap, [(0, 2)], make_head((6, 4)))
    assert out.shape == (1, 2, 2)


def test_pairwise_is_order_sensitive():
    rng = np.random.default_rng(3)
    fmap = rng.standard_normal((4, 2, 2))
    head = make_head((8, 6, 9), seed=3)
    fwd = pairwise_forward(fmap, [(0, 3)], head).data[0]
    rev = pairwise_forward(fmap, [(3, 0)], head).data[0]
    assert np.abs(fwd - rev.T).max() > 1e-3


def test_pairwise_width_mismatch_rejected():
    with pytest.raises(ValueError, match="pairwise head expects"):
        pairwise_forward(np.zeros((3, 2, 2)), [(0, 1)], make_head((5, 9)))


def test_pairwise_non_square_output_rejected():
    with pytest.raises(ValueError, match="K\\^2"):
        pairwise_forward(np.zeros((3, 2, 2)), [(0, 1)], make_head((6, 5)))


def test_batch_edges_offsets_per_image():
    e = np.array([[0, 1], [2, 3]])
    out = batch_edges(e, 4, 3)
    np.testing.assert_array_equal(out, [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9], [10, 11]])


# -- energy -------------------------------------------------------------------


def test_zero_tables_zero_energy():
    g = build_graph(3, 3, default_relations(0.7))
    t = PotentialTables(np.zeros((9, 2)), {n: np.zeros((len(e), 2, 2)) for n, e in g.edge_sets.items()})
    for y in itertools.product(range(2), repeat=9):
        assert energy(g, t, y) == 0.0


def test_single_node_energy():
    g = build_graph(1, 1, default_relations())
    t = PotentialTables(np.array([[0.3, -1.2, 2.0]]), {n: np.zeros((0, 3, 3)) for n in g.edge_sets})
    assert energy(g, t, [2]) == -2.0


@pytest.mark.parametrize("seed", range(5))
def test_energy_matches_summation_oracle(seed):
    rng = np.random.default_rng(seed)
    g = build_graph(2, 2, default_relations(1.0))
    k = 3
    t = random_tables(g, k, rng)
    for y in itertools.product(range(k), repeat=4):
        assert energy(g, t, y) == pytest.approx(summation_oracle(g, t, y), abs=1e-12)


def test_energy_rejects_bad_labels():
    g = build_graph(2, 2, [])
    t = PotentialTables(np.zeros((4, 2)))
    with pytest.raises(ValueError, match="labels"):
        energy(g, t, [0, 1, 2, 0])
    with pytest.raises(ValueError, match="entries"):
        energy(g, t, [0, 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
def test_energy_is_linear_in_tables(seed, c):
    rng = np.random.default_rng(seed)
    g = build_graph(2, 3, default_relations(1.0))
    t = random_tables(g, 2, rng)
    scaled = PotentialTables(t.unary * c, {n: v * c for n, v in t.pairwise.items()})
    y = rng.integers(0, 2, g.num_nodes)
    assert energy(g, scaled, y) == pytest.approx(c * energy(g, t, y), rel=1e-9, abs=1e-12)


# -- the three-network model ----------------------------------------------------


def test_each_potential_owns_its_network():
    model = ContextCRF(tiny_nets_config(), seed=0)
    assert list(model.nets) == [UNARY, SURROUND, ABOVE_BELOW]
    stores = model.param_stores()
    assert len(stores) == 3
    trunks = {id(n.trunk) for n in model.nets.values()}
    assert len(trunks) == 3


def test_shared_trunk_option():
    cfg = PotentialNetsConfig(**{**tiny_nets_config().__dict__, "share_trunk": True})
    model = ContextCRF(cfg, seed=0)
    assert len(model.param_stores()) == 1
    assert len({id(n.trunk) for n in model.nets.values()}) == 1


def test_unary_parameters_independent_of_relations():
    # per-potential seeds depend on the potential's name only
    a = ContextCRF(tiny_nets_config(), seed=4)
    cfg = PotentialNetsConfig(**{**tiny_nets_config().__dict__, "relations": ()})
    b = ContextCRF(cfg, seed=4)
    sa, sb = a.nets[UNARY].params, b.nets[UNARY].params
    assert sa.names() == sb.names()
    assert all(np.array_equal(sa[n].data, sb[n].data) for n in sa.names())


def test_forward_shapes_and_finiteness():
    model = ContextCRF(tiny_nets_config(), seed=1)
    graph, tables = model.tables(np.random.default_rng(0).uniform(size=(3, 8, 8)))
    assert (graph.height, graph.width) == (4, 4)
    assert tables.unary.shape == (16, 3)
    for name, edges in graph.edge_sets.items():
        assert tables.pairwise[name].shape == (len(edges), 3, 3)
    assert tables.is_finite()


def test_batched_forward_matches_single_images():
    model = ContextCRF(tiny_nets_config(), seed=2)
    xs = np.random.default_rng(1).uniform(size=(2, 3, 8, 8))
    graph, unary, pairwise = model.forward(xs)
    n = graph.num_nodes
    for i in range(2):
        _, t = model.tables(xs[i])
        np.testing.assert_allclose(unary.data[i * n:(i + 1) * n], t.unary, atol=1e-12)
        for name, edges in graph.edge_sets.items():
            m = len(edges)
            np.testing.assert_allclose(pairwise[name].data[i * m:(i + 1) * m], t.pairwise[name], atol=1e-12)


def test_invalid_nets_config():
    with pytest.raises(ValueError, match="num_classes"):
        ContextCRF(PotentialNetsConfig(num_classes=1), seed=0)
    with pytest.raises(ValueError, match="hidden"):
        ContextCRF(PotentialNetsConfig(unary_hidden=(0,)), seed=0)


def test_scaled_pairwise_leaves_unary():
    t = PotentialTables(np.ones((2, 2)), {"r": np.ones((1, 2, 2))})
    s = t.scaled_pairwise(0.5)
    assert np.all(s.unary == 1.0) and np.all(s.pairwise["r"] == 0.5)
    assert np.all(t.pairwise["r"] == 1.0)
