"""Domain types for multimodal data and the learning objective.

Data matrices follow the ``channels x samples`` convention throughout: a
modality with ``d_k`` bands observed at ``N`` pixels is a ``(d_k, N)`` array.

The block-diagonal stacked data matrix (all modalities on the diagonal, ``K*N``
columns) is never materialized. Products of a projection with it are evaluated
block by block, see :func:`block_product`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DimensionError, ValidationError


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModalityBlock:
    """One modality: a ``(d_k, N)`` matrix plus an index and a name."""

    id: int
    name: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 2:
            raise DimensionError(f"modality {self.name!r}: data must be 2-D, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"modality {self.name!r}: empty data of shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError(f"modality {self.name!r}: data contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TrainingStack:
    """Aligned multimodal training set.

    ``labels`` are 1-based class ids as they appear at the data boundary;
    ``codes`` holds the 0-based version used internally.
    """

    blocks: tuple
    labels: np.ndarray
    C: int
    Y: np.ndarray
    codes: np.ndarray

    @property
    def K(self) -> int:
        return len(self.blocks)

    @property
    def N(self) -> int:
        return self.blocks[0].n

    @property
    def dims(self) -> List[int]:
        return [b.d for b in self.blocks]

    @property
    def offsets(self) -> np.ndarray:
        """Column offsets of each modality inside the stacked channel axis."""
        return np.concatenate([[0], np.cumsum(self.dims)])

    @property
    def D(self) -> int:
        return int(sum(self.dims))

    @property
    def X(self) -> List[np.ndarray]:
        return [b.data for b in self.blocks]

    def Y_tilde(self) -> np.ndarray:
        """Replicated label matrix ``[Y, ..., Y]`` of shape ``(C, K*N)``."""
        return np.tile(self.Y, (1, self.K))

    def X_tilde(self) -> np.ndarray:
        """Dense block-diagonal data matrix. Only meant for tests and debugging."""
        out = np.zeros((self.D, self.K * self.N))
        off = self.offsets
        for k, X in enumerate(self.X):
            out[off[k]:off[k + 1], k * self.N:(k + 1) * self.N] = X
        return out


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels)
    Y = np.zeros((C, labels.size))
    Y[labels - 1, np.arange(labels.size)] = 1.0
    return Y


def validate_labels(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValidationError(f"labels must be a vector, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValidationError("labels must be integers")
        labels = labels.astype(np.int64)
    if C < 1:
        raise ValidationError(f"class count must be positive, got {C}")
    bad = (labels < 1) | (labels > C)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise ValidationError(f"label {labels[i]} at position {i} outside 1..{C}")
    return labels.astype(np.int64)


def build_stack(blocks: Sequence[ModalityBlock], labels, C: int) -> TrainingStack:
    """Assemble a :class:`TrainingStack` from co-registered modality blocks."""
    blocks = tuple(blocks)
    if not blocks:
        raise ValidationError("at least one modality is required")
    n = blocks[0].n
    for b in blocks[1:]:
        if b.n != n:
            raise DimensionError(
                f"modality {b.name!r} has {b.n} samples but {blocks[0].name!r} has {n}")
    labels = validate_labels(labels, C)
    if labels.size != n:
        raise DimensionError(f"{labels.size} labels for {n} samples")
    counts = np.bincount(labels, minlength=C + 1)[1:]
    if np.any(counts == 0):
        missing = [int(c) + 1 for c in np.flatnonzero(counts == 0)]
        raise ValidationError(f"classes without training samples: {missing}")
    return TrainingStack(
        blocks=blocks,
        labels=_frozen(labels, np.int64),
        C=int(C),
        Y=_frozen(one_hot(labels, C)),
        codes=_frozen(labels - 1, np.int64),
    )


@dataclass(frozen=True)
class HyperParams:
    alpha: float = 0.01
    beta: float = 0.1
    sigma: float = 1.0
    q: int = 10
    d_s: int = 30
    max_outer: int = 100
    max_admm: int = 500
    zeta: float = 1e-4
    eps: float = 1e-6
    mu0: float = 1e-3
    rho: float = 1.5
    mu_max: float = 1e6
    seed: int = 0
    # optional safeguard: keep a block update only if it does not raise the
    # objective (from the second outer iteration on)
    monotone: bool = False
    # ablation switch: replace the orthogonality projection by the
    # unconstrained minimizer of the split-variable subproblem
    orthogonal: bool = True

    def __post_init__(self):
        checks = [
            (self.alpha > 0, "alpha must be > 0"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.sigma > 0, "sigma must be > 0"),
            (self.q >= 1, "q must be >= 1"),
            (self.d_s >= 1, "d_s must be >= 1"),
            (self.max_outer >= 1, "max_outer must be >= 1"),
            (self.max_admm >= 1, "max_admm must be >= 1"),
            (self.zeta > 0, "zeta must be > 0"),
            (self.eps > 0, "eps must be > 0"),
            (self.mu0 > 0, "mu0 must be > 0"),
            (self.rho > 1, "rho must be > 1"),
            (self.mu_max > self.mu0, "mu_max must exceed mu0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)

    def replace(self, **changes) -> "HyperParams":
        from dataclasses import replace
        return replace(self, **changes)


@dataclass(frozen=True)
class ProjectionModel:
    """Learned shared projection, per-modality specific projections and regressor."""

    theta0: np.ndarray
    theta_k: tuple
    P: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta0", _frozen(self.theta0))
        object.__setattr__(self, "theta_k", tuple(_frozen(t) for t in self.theta_k))
        object.__setattr__(self, "P", _frozen(self.P))
        d_s = self.theta0.shape[0]
        if sum(t.shape[1] for t in self.theta_k) != self.theta0.shape[1]:
            raise DimensionError("shared projection width does not match the specific projections")
        for k, t in enumerate(self.theta_k):
            if t.shape[0] != d_s:
                raise DimensionError(f"specific projection {k + 1} has {t.shape[0]} rows, expected {d_s}")
        if self.P.shape[1] != d_s:
            raise DimensionError(f"regressor has {self.P.shape[1]} columns, expected {d_s}")

    @property
    def d_s(self) -> int:
        return self.theta0.shape[0]

    @property
    def K(self) -> int:
        return len(self.theta_k)

    @property
    def dims(self) -> List[int]:
        return [t.shape[1] for t in self.theta_k]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.dims)])

    def theta0_block(self, k: int) -> np.ndarray:
        """Columns of the shared projection acting on modality ``k`` (0-based)."""
        off = self.offsets
        return self.theta0[:, off[k]:off[k + 1]]

    @property
    def theta0_blocks(self) -> List[np.ndarray]:
        return [self.theta0_block(k) for k in range(self.K)]

    @property
    def theta(self) -> np.ndarray:
        """Generalized projection: shared plus the horizontally stacked specifics."""
        return self.theta0 + np.hstack(self.theta_k)

    def with_(self, theta0=None, theta_k=None, P=None) -> "ProjectionModel":
        return ProjectionModel(
            theta0=self.theta0 if theta0 is None else theta0,
            theta_k=self.theta_k if theta_k is None else theta_k,
            P=self.P if P is None else P,
        )


@dataclass
class SubproblemRecord:
    """Residual history of one ADMM solve."""

    target: str
    residuals: List[tuple] = field(default_factory=list)
    mus: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residuals)

    @property
    def final(self) -> tuple:
        return self.residuals[-1] if self.residuals else (float("nan"), float("nan"))


@dataclass
class ConvergenceTrace:
    outer_objectives: List[float] = field(default_factory=list)
    # first entry is NaN: no previous objective to compare against
    relative_deltas: List[float] = field(default_factory=list)
    admm_residuals: List[List[SubproblemRecord]] = field(default_factory=list)
    terminated_by: Optional[str] = None

    def rows(self):
        """One dict per outer iteration, in the layout of the convergence CSV."""
        out = []
        for t, (e, rel, subs) in enumerate(
                zip(self.outer_objectives, self.relative_deltas, self.admm_residuals), start=1):
            res_h = max((s.final[0] for s in subs), default=float("nan"))
            res_g = max((s.final[1] for s in subs), default=float("nan"))
            out.append(dict(iter=t, objective=e, rel_delta=rel, res_H=res_h, res_G=res_g))
        return out


# ---------------------------------------------------------------------------
# blockwise products with the block-diagonal data matrix


def block_product(theta: np.ndarray, X: Sequence[np.ndarray]) -> np.ndarray:
    """``theta @ X_tilde`` evaluated as ``[theta^(1) X_1 | ... | theta^(K) X_K]``."""
    off = np.concatenate([[0], np.cumsum([x.shape[0] for x in X])])
    if theta.shape[1] != off[-1]:
        raise DimensionError(f"projection has {theta.shape[1]} columns, data has {off[-1]} channels")
    return np.hstack([theta[:, off[k]:off[k + 1]] @ x for k, x in enumerate(X)])


def block_product_t(Z: np.ndarray, X: Sequence[np.ndarray]) -> np.ndarray:
    """``Z @ X_tilde.T`` for ``Z`` with ``K*N`` columns."""
    cols = np.concatenate([[0], np.cumsum([x.shape[1] for x in X])])
    if Z.shape[1] != cols[-1]:
        raise DimensionError(f"operand has {Z.shape[1]} columns, data has {cols[-1]} samples")
    return np.hstack([Z[:, cols[k]:cols[k + 1]] @ x.T for k, x in enumerate(X)])


def block_gram(X: Sequence[np.ndarray]) -> np.ndarray:
    """``X_tilde @ X_tilde.T`` (block diagonal with ``X_k X_k^T``)."""
    from scipy.linalg import block_diag
    return block_diag(*[x @ x.T for x in X])


def sandwich(X: Sequence[np.ndarray], L) -> np.ndarray:
    """``X_tilde @ L @ X_tilde.T`` for a dense or sparse ``(K*N, K*N)`` matrix ``L``."""
    cols = np.concatenate([[0], np.cumsum([x.shape[1] for x in X])])
    if L.shape != (cols[-1], cols[-1]):
        raise DimensionError(f"Laplacian of shape {L.shape} does not match {cols[-1]} stacked samples")
    # rows of X_tilde @ L for modality k are X_k @ L[cols_k, :]; use L symmetric
    XL = np.vstack([np.asarray((L[:, cols[k]:cols[k + 1]] @ x.T)).T for k, x in enumerate(X)])
    return block_product_t(XL, X)


# ---------------------------------------------------------------------------
# objective


def _check_model(model: ProjectionModel, stack: TrainingStack):
    if model.dims != stack.dims:
        raise DimensionError(f"model channel layout {model.dims} does not match data {stack.dims}")
    if model.P.shape[0] != stack.C:
        raise DimensionError(f"regressor has {model.P.shape[0]} rows for {stack.C} classes")


def fit_term(model: ProjectionModel, stack: TrainingStack) -> float:
    """Half squared Frobenius residual of the label regression."""
    _check_model(model, stack)
    R = stack.Y_tilde() - model.P @ block_product(model.theta, stack.X)
    return 0.5 * float(np.sum(R * R))


def ridge_term(model: ProjectionModel, alpha: float) -> float:
    return 0.5 * alpha * float(np.sum(model.P * model.P))


def alignment_term(model: ProjectionModel, stack: TrainingStack, L, beta: float) -> float:
    """Manifold-alignment trace of the shared embedding, scaled by ``beta / 2``."""
    _check_model(model, stack)
    KN = stack.K * stack.N
    if L.shape != (KN, KN):
        raise DimensionError(f"Laplacian of shape {L.shape}, expected {(KN, KN)}")
    if beta == 0:
        return 0.0
    Z = block_product(model.theta0, stack.X)
    ZL = np.asarray(L @ Z.T).T
    return 0.5 * beta * float(np.sum(ZL * Z))


def objective(model: ProjectionModel, stack: TrainingStack, L, hp: HyperParams) -> float:
    """Full learning objective: label fit + ridge on ``P`` + alignment trace."""
    return fit_term(model, stack) + ridge_term(model, hp.alpha) + alignment_term(model, stack, L, hp.beta)
