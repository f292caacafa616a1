import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from grand.attention import (AttentionError, AttentionOperator, AttentionParams, attention,
                             bahdanau_attention, multi_head_average, random_stochastic,
                             scaled_dot_attention, segment_softmax, shift_operator,
                             uniform_attention)
from grand.graph import EdgeSet, Graph, complete_graph, path_graph, random_graph

import oracles


def dense_mask(g):
    M = np.zeros((g.n, g.n), dtype=bool)
    es = g.directed()
    M[es.src, es.dst] = True
    return M


def test_zero_weights_give_uniform_rows():
    g = random_graph(12, 0.3, rng=0)
    p = AttentionParams.constant(3, 2, value=0.0)
    A = scaled_dot_attention(p, np.random.default_rng(0).standard_normal((12, 3)), g)
    deg = g.degree()
    np.testing.assert_allclose(A.values.numpy(), 1.0 / deg[A.src.numpy()], rtol=1e-15)


def test_triangle_against_dense_softmax():
    g = complete_graph(3)
    X = np.array([[0.0], [1.0], [2.0]])
    p = AttentionParams("scaled-dot", w_key=torch.ones(1, 1, 1, dtype=torch.float64),
                        w_query=torch.ones(1, 1, 1, dtype=torch.float64))
    A = scaled_dot_attention(p, X, g).to_dense().numpy()
    # node 0 has key 0: every logit in its row is zero
    np.testing.assert_allclose(A[0], [0.0, 0.5, 0.5], atol=1e-15)
    ref = oracles.scaled_dot(np.ones((1, 1, 1)), np.ones((1, 1, 1)), X, dense_mask(g))
    np.testing.assert_allclose(A, ref, atol=1e-14)


@pytest.mark.parametrize("scale", ["dk", "sqrt-dk"])
@pytest.mark.parametrize("heads", [1, 3])
def test_scaled_dot_matches_oracle(scale, heads):
    g = random_graph(15, 0.3, rng=4)
    p = AttentionParams.random(4, 3, heads, seed=2)
    p.scale = scale
    X = np.random.default_rng(1).standard_normal((15, 4))
    A = scaled_dot_attention(p, X, g).to_dense().numpy()
    div = 3 if scale == "dk" else np.sqrt(3)
    ref = oracles.scaled_dot(p.w_key.numpy(), p.w_query.numpy(), X, dense_mask(g), div)
    np.testing.assert_allclose(A, ref, atol=1e-13)


def test_bahdanau_matches_oracle():
    g = path_graph(4)
    p = AttentionParams.random(3, 2, 2, variant="bahdanau", seed=7)
    X = np.random.default_rng(7).standard_normal((4, 3))
    A = bahdanau_attention(p, X, g).to_dense().numpy()
    ref = oracles.bahdanau(p.w.numpy(), p.a.numpy(), X, dense_mask(g))
    np.testing.assert_allclose(A, ref, atol=1e-9)


def test_bahdanau_zero_vector_uniform():
    g = random_graph(10, 0.4, rng=1)
    p = AttentionParams.random(3, 2, variant="bahdanau", seed=0)
    p.a = torch.zeros_like(p.a)
    A = bahdanau_attention(p, np.ones((10, 3)), g)
    np.testing.assert_allclose(A.values.numpy(), 1.0 / g.degree()[A.src.numpy()])


def test_isolated_node_has_zero_row():
    g = Graph.from_edges(4, [(0, 1), (1, 2)])
    A = scaled_dot_attention(AttentionParams.random(2, 2), np.ones((4, 2)), g)
    assert A.row_sums()[3] == 0
    Abar = shift_operator(A)
    assert torch.all(Abar.to_dense()[3] == 0)


def test_shift_operator_triangle():
    Abar = shift_operator(uniform_attention(complete_graph(3))).to_dense().numpy()
    np.testing.assert_allclose(np.diag(Abar), -1.0)
    np.testing.assert_allclose(Abar[~np.eye(3, dtype=bool)], 0.5)


def test_shift_operator_with_self_loops():
    es = EdgeSet(3, [0, 0, 1, 1, 2], [0, 1, 0, 1, 2])
    A = random_stochastic(es, seed=3)
    Abar = shift_operator(A)
    np.testing.assert_allclose(Abar.diagonal().numpy(), A.diagonal().numpy() - 1, atol=1e-15)
    np.testing.assert_allclose(Abar.row_sums().numpy(), 0.0, atol=1e-15)
    assert Abar.nnz == A.nnz


def test_eigenvalues_of_shift_nonpositive():
    g = random_graph(16, 0.3, rng=11)
    A = scaled_dot_attention(AttentionParams.random(3, 3, seed=5), np.random.default_rng(5)
                             .standard_normal((16, 3)), g)
    lam = np.linalg.eigvals(shift_operator(A).to_dense().numpy())
    assert lam.real.max() <= 1e-8


def test_multi_head_average():
    g = random_graph(10, 0.4, rng=2)
    heads = [random_stochastic(g, seed=s) for s in range(4)]
    avg = multi_head_average(heads)
    ref = np.mean([h.to_dense().numpy() for h in heads], axis=0)
    np.testing.assert_allclose(avg.to_dense().numpy(), ref, atol=1e-12)
    np.testing.assert_allclose(avg.row_sums().numpy(), 1.0, atol=1e-12)
    assert torch.equal(multi_head_average(heads[:1]).values, heads[0].values)


def test_multi_head_pattern_mismatch():
    with pytest.raises(AttentionError):
        multi_head_average([random_stochastic(path_graph(4)), random_stochastic(complete_graph(4))])


def test_params_validation():
    with pytest.raises(AttentionError):
        AttentionParams("scaled-dot")
    with pytest.raises(AttentionError):
        AttentionParams("cosine", w_key=torch.ones(1, 1, 1), w_query=torch.ones(1, 1, 1))
    with pytest.raises(AttentionError):
        AttentionParams("bahdanau", w=torch.ones(1, 2, 3), a=torch.ones(1, 3))


def test_segment_softmax_large_logits():
    rows = torch.tensor([0, 0, 1])
    out = segment_softmax(torch.tensor([1000.0, 999.0, -1e4], dtype=torch.float64), rows, 2)
    assert torch.isfinite(out).all()
    np.testing.assert_allclose(out[:2].sum().item(), 1.0)


def test_matvec_matches_dense():
    g = random_graph(20, 0.2, rng=8)
    A = random_stochastic(g, seed=1)
    X = torch.randn(20, 3, dtype=torch.float64)
    np.testing.assert_allclose((A @ X).numpy(), (A.to_dense() @ X).numpy(), atol=1e-14)
    np.testing.assert_allclose(A.matvec(X[:, 0]).numpy(), (A.to_dense() @ X[:, 0]).numpy(),
                               atol=1e-14)


graphs = st.builds(lambda n, p, s: random_graph(n, p, rng=s, connected=False),
                   st.integers(1, 40), st.floats(0.0, 1.0), st.integers(0, 10_000))


@settings(max_examples=50, deadline=None)
@given(g=graphs, seed=st.integers(0, 10_000), heads=st.integers(1, 3),
       std=st.floats(0.0, 20.0), variant=st.sampled_from(["scaled-dot", "bahdanau"]))
def test_rows_are_stochastic(g, seed, heads, std, variant):
    p = AttentionParams.random(3, 2, heads, variant=variant, std=std, seed=seed)
    X = np.random.default_rng(seed).standard_normal((g.n, 3)) * 5
    A = attention(p, X, g)
    has = g.degree() > 0
    sums = A.row_sums().numpy()
    assert np.abs(sums[has] - 1).max(initial=0) <= 1e-9
    assert np.all(sums[~has] == 0)
    assert torch.all(A.values >= 0)
    # pattern is exactly the edge set
    es = g.directed()
    assert np.array_equal(A.src.numpy(), es.src) and np.array_equal(A.dst.numpy(), es.dst)
    np.testing.assert_allclose(shift_operator(A).row_sums().numpy(), 0.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 10_000), c=st.floats(-50, 50))
def test_softmax_shift_invariance(n, seed, c):
    g = random_graph(n, 0.3, rng=seed)
    es = g.directed()
    src = torch.from_numpy(es.src)
    logits = torch.randn(len(es), generator=torch.Generator().manual_seed(seed),
                         dtype=torch.float64)
    a = segment_softmax(logits, src, n)
    b = segment_softmax(logits + c, src, n)
    np.testing.assert_allclose(a.numpy(), b.numpy(), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 24), seed=st.integers(0, 10_000))
def test_shift_spectrum_left_half_plane(n, seed):
    g = random_graph(n, 0.3, rng=seed)
    A = random_stochastic(g, seed=seed, concentration=3.0)
    assert np.linalg.eigvals(shift_operator(A).to_dense().numpy()).real.max() <= 1e-8


def test_operator_scipy_roundtrip():
    A = random_stochastic(random_graph(9, 0.5, rng=3), seed=4)
    np.testing.assert_allclose(A.to_scipy().toarray(), A.to_dense().numpy())
    assert isinstance(A.detach(), AttentionOperator)
