import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.stats import ortho_group

from s2fl import HyperParams, ValidationError, build_graph, inter_adjacency, intra_adjacency, joint_adjacency, laplacian
from s2fl import graph as graph_mod

from conftest import random_stack


def brute_intra(X, q, sigma):
    """Independent O(N^2) construction: sort every row, take q, symmetrize."""
    n = X.shape[1]
    W = np.zeros((n, n))
    for i in range(n):
        d = [(float(np.sum((X[:, i] - X[:, j]) ** 2)), j) for j in range(n) if j != i]
        d.sort()
        for dist, j in d[:q]:
            W[i, j] = W[j, i] = np.exp(-dist / sigma**2)
    return W


def brute_inter(labels):
    n = len(labels)
    W = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if labels[i] == labels[j]:
                W[i, j] = 1.0 / sum(1 for l in labels if l == labels[i])
    return W


def test_duplicate_columns_weight_one():
    X = np.array([[0.0, 0.0, 5.0], [1.0, 1.0, 5.0]])
    W = intra_adjacency(X, 1, 0.3).toarray()
    assert W[0, 1] == 1.0 and W[1, 0] == 1.0


def test_distance_sigma_gives_exp_minus_one():
    X = np.array([[0.0, 2.0, 10.0]])
    W = intra_adjacency(X, 1, 2.0).toarray()
    assert W[0, 1] == pytest.approx(0.367879441171442, abs=1e-12)


def test_points_on_a_line():
    X = np.array([[0.0, 1.0, 2.0, 3.0]])
    W = intra_adjacency(X, 1, 1.0).toarray()
    np.testing.assert_allclose(W, brute_intra(X, 1, 1.0), atol=0)
    nz = {tuple(p) for p in np.argwhere(W)}
    # 1 -> 0 and 2 -> 1 by the smaller-index rule; endpoints add (0,1) and (2,3)
    assert nz == {(0, 1), (1, 0), (1, 2), (2, 1), (2, 3), (3, 2)}
    assert W[0, 1] == pytest.approx(np.exp(-1))


def test_intra_errors():
    X = np.zeros((2, 4))
    with pytest.raises(ValidationError):
        intra_adjacency(X, 4, 1.0)
    with pytest.raises(ValidationError):
        intra_adjacency(X, 2, 0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), q=st.integers(1, 6), sigma=st.floats(0.3, 5.0))
def test_intra_matches_brute_force(seed, q, sigma):
    rng = np.random.default_rng(seed)
    # integer grid coordinates produce many exact distance ties
    X = rng.integers(0, 3, size=(2, 12)).astype(float)
    W = intra_adjacency(X, q, sigma).toarray()
    np.testing.assert_allclose(W, brute_intra(X, q, sigma), rtol=0, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_intra_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((4, 20))
    Q = ortho_group.rvs(4, random_state=rng)
    a = intra_adjacency(X, 4, 1.5).toarray()
    b = intra_adjacency(Q @ X, 4, 1.5).toarray()
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_inter_examples():
    np.testing.assert_array_equal(inter_adjacency([1, 1, 1, 1], 1), np.full((4, 4), 0.25))
    W = inter_adjacency([1, 2], 2)
    assert W[0, 1] == 0 and W[1, 0] == 0
    W = inter_adjacency([1, 1, 2], 2)
    np.testing.assert_array_equal(W, brute_inter([1, 1, 2]))
    assert W[0, 1] == 0.5 and W[0, 2] == 0


@settings(max_examples=30, deadline=None)
@given(labels=st.lists(st.integers(1, 4), min_size=1, max_size=25))
def test_inter_rows_sum_to_one_within_class(labels):
    W = inter_adjacency(labels, 4)
    lab = np.array(labels)
    for i in range(lab.size):
        assert W[i, lab == lab[i]].sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(W[i, lab != lab[i]] == 0)


def test_joint_layout_against_independent_assembly():
    from s2fl import ModalityBlock, build_stack
    X1 = np.array([[0.0, 1.0, 3.0]])
    X2 = np.array([[0.0, 0.0, 2.0], [1.0, 0.0, 0.0]])
    s = build_stack([ModalityBlock(1, "a", X1), ModalityBlock(2, "b", X2)], [1, 1, 2], 2)
    W = joint_adjacency(s, HyperParams(q=1, sigma=1.0))
    ref = np.zeros((6, 6))
    ref[:3, :3] = brute_intra(X1, 1, 1.0)
    ref[3:, 3:] = brute_intra(X2, 1, 1.0)
    ref[:3, 3:] = brute_inter([1, 1, 2])
    ref[3:, :3] = brute_inter([1, 1, 2])
    np.testing.assert_allclose(W, ref, atol=1e-15)
    assert np.all(np.diag(W) == 0)


def test_joint_single_modality(rng):
    s = random_stack(rng, K=1)
    W = joint_adjacency(s, HyperParams(q=3))
    np.testing.assert_array_equal(W, intra_adjacency(s.X[0], 3, 1.0).toarray())


def test_laplacian_examples():
    D, L = laplacian(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(L, [[1, -1], [-1, 1]])
    D, L = laplacian(np.zeros((3, 3)))
    np.testing.assert_array_equal(L, 0)
    with pytest.raises(ValidationError):
        laplacian(np.array([[0.0, 1.0], [0.5, 0.0]]))


def test_random_laplacian_psd(rng):
    A = rng.random((8, 8))
    W = A + A.T
    np.fill_diagonal(W, 0)
    _, L = laplacian(W)
    assert np.linalg.eigvalsh(L).min() >= -1e-10


def test_sparse_path_matches_dense(rng, monkeypatch):
    s = random_stack(rng, K=3, N=30)
    hp = HyperParams(q=4)
    dense = build_graph(s, hp)
    monkeypatch.setattr(graph_mod, "DENSE_LIMIT", 10)
    sparse = build_graph(s, hp)
    assert sparse.sparse and not dense.sparse
    assert sp.issparse(sparse.L)
    np.testing.assert_allclose(sparse.W.toarray(), dense.W, atol=0)
    np.testing.assert_allclose(sparse.L.toarray(), dense.L, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), K=st.integers(1, 3))
def test_joint_graph_properties(seed, K):
    rng = np.random.default_rng(seed)
    s = random_stack(rng, K=K)
    g = build_graph(s, HyperParams(q=int(rng.integers(1, 6)), sigma=float(rng.uniform(0.5, 3))))
    assert np.array_equal(g.W, g.W.T)
    assert np.all(np.abs(g.L.sum(axis=1)) <= 1e-10)
    for _ in range(100):
        x = rng.standard_normal(g.L.shape[0])
        assert x @ g.L @ x >= -1e-10 * (x @ x)
