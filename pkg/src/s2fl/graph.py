"""Joint adjacency graph and its Laplacian.

The joint graph over ``K*N`` nodes (every sample once per modality) has
Gaussian-weighted kNN graphs on its diagonal blocks and label-driven
blocks off the diagonal.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .core import HyperParams, TrainingStack, validate_labels
from .errors import ValidationError

# above this many joint nodes W and L are kept in CSR form
DENSE_LIMIT = 10_000


@dataclass(frozen=True)
class JointGraph:
    W: object
    D: object
    L: object
    K: int
    N: int

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.W)


def knn_indices(X: np.ndarray, q: int) -> np.ndarray:
    """Indices of the ``q`` nearest columns of each column of ``X`` (self excluded).

    Equal distances are broken by the smaller column index.
    """
    d2 = cdist(X.T, X.T, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :q], d2


def intra_adjacency(X: np.ndarray, q: int, sigma: float) -> sp.csr_matrix:
    """Symmetrized q-NN graph with weights ``exp(-||x_i - x_j||^2 / sigma^2)``."""
    X = np.asarray(X, dtype=float)
    n = X.shape[1]
    if sigma <= 0:
        raise ValidationError(f"sigma must be > 0, got {sigma}")
    if q < 1 or q >= n:
        raise ValidationError(f"neighbor count q={q} must satisfy 1 <= q < N={n}")
    nbrs, d2 = knn_indices(X, q)
    rows = np.repeat(np.arange(n), q)
    cols = nbrs.ravel()
    mask = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    mask = mask.maximum(mask.T).tocoo()
    vals = np.exp(-d2[mask.row, mask.col] / sigma**2)
    W = sp.csr_matrix((vals, (mask.row, mask.col)), shape=(n, n))
    W.sort_indices()
    return W


def inter_adjacency(labels, C: int) -> np.ndarray:
    """``1/N_c`` between every pair of samples of class ``c``, zero otherwise."""
    labels = validate_labels(labels, C)
    counts = np.bincount(labels, minlength=C + 1).astype(float)
    same = labels[:, None] == labels[None, :]
    return np.where(same, 1.0 / counts[labels][:, None], 0.0)


def joint_adjacency(stack: TrainingStack, hp: HyperParams):
    """Assemble the ``(K*N, K*N)`` adjacency, dense or CSR depending on size."""
    K, N = stack.K, stack.N
    intra = [intra_adjacency(X, hp.q, hp.sigma) for X in stack.X]
    if K > 1:
        inter = sp.csr_matrix(inter_adjacency(stack.labels, stack.C))
    grid = [[intra[k] if k == l else inter for l in range(K)] for k in range(K)]
    # kNN blocks carry no self-loops and inter blocks sit off the block
    # diagonal, so the joint diagonal is zero by construction
    W = sp.bmat(grid, format="csr")
    W.eliminate_zeros()
    if K * N <= DENSE_LIMIT:
        return W.toarray()
    return W


def laplacian(W):
    """Degree matrix and Laplacian ``L = D - W`` of a symmetric adjacency."""
    if sp.issparse(W):
        asym = abs(W - W.T).max() if W.nnz else 0.0
        if asym > 1e-12:
            raise ValidationError(f"adjacency is not symmetric (max deviation {asym:.3g})")
        W = (W - sp.diags(W.diagonal())).tocsr()
        W.eliminate_zeros()
        deg = np.asarray(W.sum(axis=1)).ravel()
        D = sp.diags(deg, format="csr")
        return D, (D - W).tocsr()
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValidationError(f"adjacency must be square, got shape {W.shape}")
    asym = np.max(np.abs(W - W.T)) if W.size else 0.0
    if asym > 1e-12:
        raise ValidationError(f"adjacency is not symmetric (max deviation {asym:.3g})")
    # degrees exclude self-loops
    off = W - np.diag(np.diag(W))
    D = np.diag(off.sum(axis=1))
    return D, D - off


def build_graph(stack: TrainingStack, hp: HyperParams) -> JointGraph:
    W = joint_adjacency(stack, hp)
    D, L = laplacian(W)
    return JointGraph(W=W, D=D, L=L, K=stack.K, N=stack.N)
