import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from grand.graph import (EdgeSet, Graph, GraphError, adjointness_check, complete_graph,
                         divergence, edge_inner, gradient, grid_graph, path_graph,
                         random_graph, star_graph)

from oracles import incidence


def test_path_gradient():
    g = path_graph(2)
    assert gradient(g, [1.0, 0.0]).get(0, 1) == -1.0
    assert gradient(g, [1.0, 0.0]).get(1, 0) == 1.0


def test_triangle_gradient():
    g = complete_graph(3)
    f = gradient(g, [0.0, 1.0, 2.0])
    assert f.get(0, 1) == 1.0
    assert f.get(0, 2) == 2.0
    assert f.get(1, 2) == 1.0


def test_constant_field_has_zero_gradient():
    g = random_graph(20, 0.3, rng=1)
    assert np.all(gradient(g, np.full((20, 3), 4.2)).values == 0)


def test_path_divergence():
    g = path_graph(2)
    np.testing.assert_array_equal(divergence(g, np.array([1.0])), [1.0, -1.0])
    np.testing.assert_array_equal(divergence(g, np.zeros(1)), [0.0, 0.0])


def test_missing_edge_raises():
    with pytest.raises(KeyError):
        gradient(path_graph(3), [0.0, 1.0, 2.0]).get(0, 2)


def test_dimension_mismatch():
    g = path_graph(3)
    with pytest.raises(GraphError):
        gradient(g, np.zeros(4))
    with pytest.raises(GraphError):
        divergence(g, np.zeros(5))


def test_construction_dedups_and_rejects_loops():
    g = Graph.from_edges(3, [(0, 1), (1, 0), (0, 1), (2, 1)])
    assert g.num_edges == 2
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    with pytest.raises(GraphError):
        Graph.from_edges(3, [(0, 0)])
    with pytest.raises(GraphError):
        Graph.from_edges(2, [(0, 2)])
    assert Graph.from_edges(2, [(0, 0), (0, 1)], allow_self_loops=True).has_self_loops()


def test_csr_invariants():
    g = random_graph(30, 0.2, rng=3)
    assert np.all(np.diff(g.row_offsets) >= 0)
    for i in range(g.n):
        nb = g.neighbors(i)
        assert np.all(np.diff(nb) > 0)
        for j in nb:
            assert i in g.neighbors(j)


def test_edge_set_sorted_unique():
    es = EdgeSet(4, [3, 0, 0, 3, 1], [1, 2, 1, 1, 0])
    assert list(zip(es.src.tolist(), es.dst.tolist())) == [(0, 1), (0, 2), (1, 0), (3, 1)]
    assert es.out_degree().tolist() == [2, 1, 0, 1]


def test_divergence_matches_incidence_oracle():
    g = random_graph(10, 0.4, rng=5)
    rng = np.random.default_rng(0)
    x = rng.standard_normal(10)
    f = rng.standard_normal(g.num_edges)
    B = incidence(10, g.edges.tolist())
    np.testing.assert_allclose(gradient(g, x).values, B @ x, atol=1e-14)
    # with (grad x)_ij = x_j - x_i the alternating divergence is -B^T
    np.testing.assert_allclose(divergence(g, f), -B.T @ f, atol=1e-14)
    assert abs(edge_inner(g, gradient(g, x), f) + x @ divergence(g, f)) < 1e-12


@pytest.mark.parametrize("g", [random_graph(10, 0.3, rng=2), star_graph(5), grid_graph(4, 3),
                               complete_graph(6)])
def test_adjointness_residual(g):
    assert adjointness_check(g, trials=100) <= 1e-10


def test_adjointness_empty_graph():
    assert adjointness_check(Graph.from_edges(5, []), trials=10) == 0.0


def test_star_graph_dense_inner_products():
    g = star_graph(5)
    rng = np.random.default_rng(9)
    x, f = rng.standard_normal(5), rng.standard_normal(4)
    lhs = sum((x[j] - x[i]) * f[k] for k, (i, j) in enumerate(g.edges.tolist()))
    rhs = sum(x[i] * divergence(g, f)[i] for i in range(5))
    assert abs(lhs + rhs) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 40), p=st.floats(0.05, 0.9), seed=st.integers(0, 10_000),
       d=st.integers(1, 3))
def test_div_grad_is_negative_laplacian(n, p, seed, d):
    g = random_graph(n, p, rng=seed)
    x = np.random.default_rng(seed).standard_normal((n, d))
    L = g.laplacian().toarray()
    # div(grad x)_i = sum_j w_ij (x_j - x_i)
    np.testing.assert_allclose(divergence(g, gradient(g, x)), -L @ x, atol=1e-11)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), p=st.floats(0.0, 1.0), seed=st.integers(0, 10_000))
def test_weighted_adjointness(n, p, seed):
    rng = np.random.default_rng(seed)
    g0 = random_graph(n, p, rng=seed, connected=False)
    g = Graph.from_edges(n, g0.edges, rng.uniform(0.1, 3.0, g0.num_edges))
    assert adjointness_check(g, trials=5, d=2, seed=seed) <= 1e-10


def test_grid_graph_counts():
    g = grid_graph(2, 2)
    assert (g.n, g.num_edges) == (4, 4)
    g = grid_graph(8, 8)
    assert g.num_edges == 2 * 8 * 7
