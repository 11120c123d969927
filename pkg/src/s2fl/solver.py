"""Alternating optimization of the shared/specific projection model.

The outer loop cycles through the regressor ``P`` (closed-form ridge), the
shared projection and each modality's specific projection. Both projection
updates are orthogonality-constrained and solved by the same ADMM scheme:

    min_T  1/2 ||R - P H||^2 + beta/2 tr(T X L X^T T^T)
    s.t.   H = T X,  G = T,  G G^T = I

where ``R`` is the part of the label matrix not explained by the other
projections. ``G`` is updated by projecting onto the (partial) isometries
through an SVD. The alignment term only enters the shared solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .core import (
    ConvergenceTrace,
    HyperParams,
    ModalityBlock,
    ProjectionModel,
    SubproblemRecord,
    TrainingStack,
    block_gram,
    block_product,
    block_product_t,
    fit_term,
    objective,
    ridge_term,
    sandwich,
)
from .errors import DimensionError, NumericalError, ValidationError
from .graph import build_graph, intra_adjacency, laplacian

log = logging.getLogger(__name__)

SHARED = "shared"


@dataclass(frozen=True)
class AdmmState:
    H: np.ndarray
    G: np.ndarray
    Lambda1: np.ndarray
    Lambda2: np.ndarray
    mu: float
    iteration: int = 0


@dataclass(frozen=True)
class Subproblem:
    """Data of one projection subproblem.

    ``X`` lists the diagonal blocks the projection acts on (all modalities for
    the shared projection, a single one for a specific projection). ``R`` is
    the label residual left once every other projection is held fixed.
    """

    target: str
    X: tuple
    R: np.ndarray
    P: np.ndarray
    beta: float = 0.0
    xlx: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return sum(x.shape[0] for x in self.X)

    def apply(self, theta):
        return block_product(theta, self.X)


def sign_fix(U: np.ndarray, V: Optional[np.ndarray] = None):
    """Flip columns of ``U`` so each one's largest-magnitude entry is positive.

    The paired columns of ``V`` are flipped with them.
    """
    if U.size == 0:
        return U, V
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    U = U * signs
    if V is not None:
        V = V * signs
    return U, V


# ---------------------------------------------------------------------------
# initialization


def lpp_init(block, W_intra, d_s: int) -> np.ndarray:
    """Locality preserving projection of one modality, shape ``(d_s, d_k)``.

    Rows solve ``X L X^T a = lam X D X^T a`` for the ``d_s`` smallest
    eigenvalues. Rows beyond ``d_k`` are zero.
    """
    X = block.data if isinstance(block, ModalityBlock) else np.asarray(block, dtype=float)
    d_k = X.shape[0]
    D, L = laplacian(W_intra)
    A = np.asarray((L @ X.T)).T @ X.T
    B = np.asarray((D @ X.T)).T @ X.T
    A = (A + A.T) / 2
    B = (B + B.T) / 2
    tr = np.trace(B)
    # ridge keeps the metric definite for rank-deficient data or empty graphs
    shift = 1e-10 * tr / d_k if tr > 0 else 1e-10
    B = B + shift * np.eye(d_k)
    m = min(d_s, d_k)
    _, vecs = sla.eigh(A, B, subset_by_index=[0, m - 1])
    vecs, _ = sign_fix(vecs)
    out = np.zeros((d_s, d_k))
    out[:m] = vecs.T
    return out


# ---------------------------------------------------------------------------
# closed-form updates


def _solve_right(B: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``B @ inv(M)`` for symmetric positive definite ``M``."""
    try:
        return sla.solve(M, B.T, assume_a="pos").T
    except sla.LinAlgError:
        return sla.solve(M, B.T).T


def update_P(stack: TrainingStack, theta: np.ndarray, alpha: float) -> np.ndarray:
    """Ridge regression of the replicated labels on the projected data."""
    Z = block_product(theta, stack.X)
    Y = stack.Y_tilde()
    return _solve_right(Y @ Z.T, Z @ Z.T + alpha * np.eye(Z.shape[0]))


def penalty_ratio(X: Sequence[np.ndarray]) -> float:
    """Weight of the ``H = T X`` penalty relative to the ``G = T`` one.

    Equal to ``dim / tr(X X^T)``, so that the data Gram matrix enters the
    projection update with unit mean eigenvalue. With a single shared
    penalty the step toward an orthonormal ``G`` is damped by roughly
    ``1 / (lambda(X X^T) + 1)``, which stalls the iteration once the
    sample count is in the hundreds.
    """
    tr = sum(float(np.sum(x * x)) for x in X)
    dim = sum(x.shape[0] for x in X)
    return dim / tr if tr > 0 else 1.0


def update_H(state: AdmmState, sub: Subproblem, theta: np.ndarray, mu_h: Optional[float] = None) -> np.ndarray:
    """Split-variable update; ``mu_h`` is the penalty on ``H = T X`` (default ``state.mu``)."""
    P = sub.P
    mu = state.mu if mu_h is None else mu_h
    rhs = P.T @ sub.R + mu * sub.apply(theta) - state.Lambda1
    return sla.solve(P.T @ P + mu * np.eye(P.shape[1]), rhs, assume_a="pos")


def update_theta(state: AdmmState, sub: Subproblem, gram: Optional[np.ndarray] = None,
                 mu_h: Optional[float] = None) -> np.ndarray:
    """Projection update with ``H`` and ``G`` fixed.

    ``gram`` is the block-diagonal ``X X^T``; pass it to avoid recomputing it
    at every iteration. ``mu_h`` is the penalty on ``H = T X`` (default
    ``state.mu``).
    """
    mu = state.mu
    mu_h = mu if mu_h is None else mu_h
    if gram is None:
        gram = block_gram(sub.X)
    rhs = block_product_t(mu_h * state.H + state.Lambda1, sub.X) + mu * state.G + state.Lambda2
    M = mu_h * gram + mu * np.eye(gram.shape[0])
    if sub.beta and sub.xlx is not None:
        M = M + sub.beta * sub.xlx
    return _solve_right(rhs, M)


update_theta0 = update_theta


def soc_project(theta: np.ndarray, lambda2: np.ndarray, mu: float) -> np.ndarray:
    """Nearest matrix with orthonormal rows (or columns, if tall) to ``theta - lambda2/mu``."""
    U, _, Vt = np.linalg.svd(theta - lambda2 / mu, full_matrices=False)
    U, V = sign_fix(U, Vt.T)
    return U @ V.T


def update_multipliers(state: AdmmState, theta: np.ndarray, sub: Subproblem,
                       mu_h: Optional[float] = None) -> AdmmState:
    mu = state.mu
    mu_h = mu if mu_h is None else mu_h
    return replace(
        state,
        Lambda1=state.Lambda1 + mu_h * (state.H - sub.apply(theta)),
        Lambda2=state.Lambda2 + mu * (state.G - theta),
    )


def update_mu(mu: float, rho: float, mu_max: float) -> float:
    return min(rho * mu, mu_max)


# ---------------------------------------------------------------------------
# subproblems


def shared_subproblem(model: ProjectionModel, stack: TrainingStack, xlx, beta: float) -> Subproblem:
    specific = np.hstack(model.theta_k)
    R = stack.Y_tilde() - model.P @ block_product(specific, stack.X)
    return Subproblem(SHARED, tuple(stack.X), R, model.P, beta, xlx)


def specific_subproblem(model: ProjectionModel, stack: TrainingStack, k: int) -> Subproblem:
    """Subproblem for modality ``k`` (0-based).

    Only the modality's own sample columns depend on its specific projection,
    so the residual is restricted to them; there is no alignment term.
    """
    X = stack.X[k]
    R = stack.Y - model.P @ (model.theta0_block(k) @ X)
    return Subproblem(f"specific:{k + 1}", (X,), R, model.P)


def run_admm(sub: Subproblem, theta: np.ndarray, hp: HyperParams,
             eps: Optional[float] = None):
    """Iterate H -> projection -> G -> multipliers -> mu until both residuals < eps.

    Starts from ``H = theta X``, ``G = theta`` and zero multipliers. The
    ``H = T X`` constraint is penalized with ``penalty_ratio(X) * mu``; the
    recorded ``mu`` is the penalty of ``G = T``.
    Returns ``(projection, state, record)`` where the projection is the
    orthogonalized split variable ``G`` (within ``eps`` of the unconstrained
    iterate on convergence, exactly feasible otherwise). With
    ``hp.orthogonal`` off the unconstrained iterate is returned.
    """
    eps = hp.eps if eps is None else eps
    X = sub.X
    P = sub.P
    d_s = theta.shape[0]
    gram = block_gram(X)
    ratio = penalty_ratio(X)
    eye_w = np.eye(gram.shape[0])
    eye_s = np.eye(d_s)
    PtP = P.T @ P
    PtR = P.T @ sub.R
    align = sub.beta * sub.xlx if (sub.beta and sub.xlx is not None) else None

    theta = np.array(theta, dtype=float)
    TX = block_product(theta, X)
    H, G = TX.copy(), theta.copy()
    Lam1 = np.zeros_like(TX)
    Lam2 = np.zeros_like(theta)
    mu = hp.mu0
    factors_mu = None
    record = SubproblemRecord(sub.target)
    it = 0
    for it in range(1, hp.max_admm + 1):
        # mu stays at mu_max after a few dozen iterations; reuse the factorizations
        mu_h = ratio * mu
        if mu != factors_mu:
            M = mu_h * gram + mu * eye_w
            if align is not None:
                M = M + align
            try:
                fH = sla.cho_factor(PtP + mu_h * eye_s)
                fM = sla.cho_factor(M)
            except (ValueError, sla.LinAlgError) as e:
                raise NumericalError(f"{sub.target} subproblem: factorization failed at iteration {it} ({e})",
                                     iteration=it) from e
            factors_mu = mu
        H = sla.cho_solve(fH, PtR + mu_h * TX - Lam1)
        rhs = block_product_t(mu_h * H + Lam1, X) + mu * G + Lam2
        theta = sla.cho_solve(fM, rhs.T).T
        if hp.orthogonal:
            G = soc_project(theta, Lam2, mu)
        else:
            G = theta - Lam2 / mu
        TX = block_product(theta, X)
        rH = H - TX
        rG = G - theta
        res_h = float(np.linalg.norm(rH))
        res_g = float(np.linalg.norm(rG))
        record.mus.append(mu)
        record.residuals.append((res_h, res_g))
        Lam1 = Lam1 + mu_h * rH
        Lam2 = Lam2 + mu * rG
        if not (np.isfinite(res_h) and np.isfinite(res_g) and np.all(np.isfinite(theta))
                and np.all(np.isfinite(Lam1)) and np.all(np.isfinite(Lam2))):
            raise NumericalError(f"non-finite value in {sub.target} subproblem at iteration {it}",
                                 iteration=it)
        mu = update_mu(mu, hp.rho, hp.mu_max)
        if res_h < eps and res_g < eps:
            record.converged = True
            break
    state = AdmmState(H=H, G=G, Lambda1=Lam1, Lambda2=Lam2, mu=mu, iteration=it)
    if not record.converged:
        log.debug("%s subproblem stopped at max_admm=%d with residuals %.2e, %.2e",
                  sub.target, hp.max_admm, *record.final)
    return (state.G if hp.orthogonal else theta), state, record


def solve_subproblem(target, model: ProjectionModel, stack: TrainingStack, L, hp: HyperParams,
                     xlx: Optional[np.ndarray] = None):
    """Solve for the shared projection (``target='shared'``) or a specific one.

    A specific target is given as an integer ``k`` in ``1..K``. ``L`` is the
    joint Laplacian; ``xlx`` may carry a precomputed ``X L X^T``. Returns
    ``(projection, AdmmState, SubproblemRecord)``.
    """
    if target == SHARED:
        if xlx is None and hp.beta:
            xlx = sandwich(stack.X, L)
        sub = shared_subproblem(model, stack, xlx, hp.beta)
        start = model.theta0
    else:
        k = int(target)
        if not 1 <= k <= stack.K:
            raise ValidationError(f"modality index {k} outside 1..{stack.K}")
        sub = specific_subproblem(model, stack, k - 1)
        start = model.theta_k[k - 1]
    return run_admm(sub, start, hp)


# ---------------------------------------------------------------------------
# global loop


def check_fit_inputs(stack: TrainingStack, hp: HyperParams):
    if hp.d_s > stack.D:
        raise ValidationError(
            f"subspace dimension d_s={hp.d_s} exceeds the total channel count {stack.D}",
            code="INVALID_DS")
    if hp.q >= stack.N:
        raise ValidationError(f"neighbor count q={hp.q} must be below the sample count {stack.N}")


def initial_model(stack: TrainingStack, hp: HyperParams) -> ProjectionModel:
    theta_k = [lpp_init(b, intra_adjacency(b.data, hp.q, hp.sigma), hp.d_s) for b in stack.blocks]
    return ProjectionModel(
        theta0=np.zeros((hp.d_s, stack.D)),
        theta_k=theta_k,
        P=np.zeros((stack.C, hp.d_s)),
    )


def fit(stack: TrainingStack, hp: HyperParams,
        callback: Optional[Callable[[dict], None]] = None,
        graph=None):
    """Learn the projection model by block coordinate descent.

    Parameters
    ----------
    stack : TrainingStack
    hp : HyperParams
    callback : callable, optional
        Receives one dict per outer iteration with keys ``iter``,
        ``objective``, ``rel_delta``, ``res_H``, ``res_G``.
    graph : JointGraph, optional
        Prebuilt joint graph; built from ``stack`` and ``hp`` when omitted.

    Returns
    -------
    model : ProjectionModel
    trace : ConvergenceTrace
    """
    check_fit_inputs(stack, hp)
    if graph is None:
        graph = build_graph(stack, hp)
    L = graph.L
    xlx = sandwich(stack.X, L) if hp.beta else None

    def energy(m):
        value = fit_term(m, stack) + ridge_term(m, hp.alpha)
        if xlx is not None:
            value += 0.5 * hp.beta * float(np.sum((m.theta0 @ xlx) * m.theta0))
        return value

    model = initial_model(stack, hp)
    trace = ConvergenceTrace()
    prev = None
    for t in range(1, hp.max_outer + 1):
        model = model.with_(P=update_P(stack, model.theta, hp.alpha))
        # the first pass replaces the infeasible initial projections unconditionally
        guard = hp.monotone and t > 1
        current = energy(model) if guard else None
        records: List[SubproblemRecord] = []
        for target in [SHARED] + list(range(1, stack.K + 1)):
            theta, _, rec = solve_subproblem(target, model, stack, L, hp, xlx=xlx)
            records.append(rec)
            if target == SHARED:
                candidate = model.with_(theta0=theta)
            else:
                theta_k = list(model.theta_k)
                theta_k[target - 1] = theta
                candidate = model.with_(theta_k=theta_k)
            if guard:
                value = energy(candidate)
                if value > current:
                    log.debug("outer %d: %s update rejected (%.8g > %.8g)", t, rec.target, value, current)
                    continue
                current = value
            model = candidate
        E = objective(model, stack, L, hp)
        if not np.isfinite(E):
            raise NumericalError(f"objective became non-finite at outer iteration {t}", iteration=t)
        if prev is None:
            rel = float("nan")
        elif prev == 0:
            rel = 0.0
        else:
            rel = abs(E - prev) / abs(prev)
        trace.outer_objectives.append(E)
        trace.relative_deltas.append(rel)
        trace.admm_residuals.append(records)
        row = trace.rows()[-1]
        log.info("iter %d objective %.8g rel_delta %.3g", t, E, rel)
        if callback is not None:
            callback(row)
        if prev is not None and (prev == 0 or rel < hp.zeta):
            trace.terminated_by = "tolerance"
            break
        prev = E
    else:
        trace.terminated_by = "max_iterations"
    return model, trace
