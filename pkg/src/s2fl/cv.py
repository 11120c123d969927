"""Stratified k-fold grid search over the model hyperparameters."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .classify import EmbeddingConfig, evaluate, nn_classify, transform
from .core import HyperParams, ModalityBlock, TrainingStack, build_stack
from .errors import S2FLError, ValidationError
from .solver import fit

log = logging.getLogger(__name__)

GRID_KEYS = ("q", "sigma", "alpha", "beta", "d_s")

DEFAULT_GRIDS: Dict[str, tuple] = {
    "q": tuple(range(5, 51, 5)),
    "sigma": (1e-2, 1e-1, 1e0, 1e1, 1e2),
    "alpha": (1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2),
    "beta": (1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2),
    "d_s": tuple(range(5, 51, 5)),
}


def stratified_folds(labels, folds: int, seed: int) -> np.ndarray:
    """Fold id in ``0..folds-1`` for every sample.

    Each class is shuffled and dealt to the folds in turn; the dealing
    position carries over from one class to the next so that leftover
    samples spread round-robin across folds.
    """
    labels = np.asarray(labels)
    if folds < 2:
        raise ValidationError(f"folds must be >= 2, got {folds}")
    classes, counts = np.unique(labels, return_counts=True)
    small = counts < folds
    if np.any(small):
        c = int(classes[small][0])
        n = int(counts[small][0])
        raise ValidationError(
            f"class {c} has {n} training samples, fewer than folds={folds}; use --folds {max(2, int(counts.min()))} or fewer")
    rng = np.random.default_rng(seed)
    out = np.empty(labels.size, dtype=np.int64)
    pos = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        out[idx] = (pos + np.arange(idx.size)) % folds
        pos = (pos + idx.size) % folds
    return out


@dataclass
class GridResult:
    params: Dict[str, float]
    fold_oa: List[float]
    error: Optional[str] = None

    @property
    def mean_oa(self) -> float:
        return float(np.mean(self.fold_oa)) if self.fold_oa and self.error is None else float("nan")

    def sort_key(self):
        m = self.mean_oa
        p = self.params
        return (-(m if np.isfinite(m) else -np.inf), p["d_s"], p["alpha"], p["beta"], p["sigma"], p["q"])


def subset_stack(stack: TrainingStack, idx: np.ndarray) -> TrainingStack:
    blocks = [ModalityBlock(b.id, b.name, b.data[:, idx]) for b in stack.blocks]
    return build_stack(blocks, stack.labels[idx], stack.C)


def score_point(stack: TrainingStack, fold_ids: np.ndarray, hp: HyperParams,
                config: EmbeddingConfig = EmbeddingConfig()) -> List[float]:
    """Validation OA on every fold for one hyperparameter setting."""
    scores = []
    for f in range(int(fold_ids.max()) + 1):
        tr = np.flatnonzero(fold_ids != f)
        va = np.flatnonzero(fold_ids == f)
        sub = subset_stack(stack, tr)
        model, _ = fit(sub, hp)
        ftr = transform(model, sub.X, config)
        fva = transform(model, [x[:, va] for x in stack.X], config)
        pred = nn_classify(ftr, sub.labels, fva)
        scores.append(evaluate(pred, stack.labels[va], stack.C).oa)
    return scores


def _run_point(args):
    stack, fold_ids, hp, config, params = args
    try:
        return GridResult(params, score_point(stack, fold_ids, hp, config))
    except S2FLError as e:
        return GridResult(params, [], f"{e.code}: {e}")


def grid_points(grids: Dict[str, Sequence]) -> List[Dict[str, float]]:
    for key in GRID_KEYS:
        if not grids.get(key):
            raise ValidationError(f"grid for {key} is empty")
    values = [grids[k] for k in GRID_KEYS]
    return [dict(zip(GRID_KEYS, combo)) for combo in itertools.product(*values)]


def cross_validate(stack: TrainingStack, grids: Optional[Dict[str, Sequence]] = None,
                   folds: int = 10, base: HyperParams = HyperParams(),
                   config: EmbeddingConfig = EmbeddingConfig(), jobs: int = 1):
    """Grid search maximizing mean validation OA.

    Ties go to the smaller ``d_s``, then smaller ``alpha``, ``beta``,
    ``sigma`` and ``q``. Folds come from ``base.seed`` and are shared by all
    grid points. Returns ``(best HyperParams, list of GridResult, fold ids)``.
    """
    grids = {**DEFAULT_GRIDS, **(grids or {})}
    fold_ids = stratified_folds(stack.labels, folds, base.seed)
    points = grid_points(grids)
    tasks = []
    for p in points:
        try:
            hp = base.replace(q=int(p["q"]), sigma=float(p["sigma"]), alpha=float(p["alpha"]),
                              beta=float(p["beta"]), d_s=int(p["d_s"]))
        except ValidationError as e:
            tasks.append((None, p, str(e)))
            continue
        tasks.append((hp, p, None))
    runnable = [(stack, fold_ids, hp, config, p) for hp, p, err in tasks if hp is not None]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            done = list(ex.map(_run_point, runnable))
    else:
        done = [_run_point(a) for a in runnable]
    done_iter = iter(done)
    results = []
    for hp, p, err in tasks:
        results.append(next(done_iter) if hp is not None else GridResult(p, [], f"VALIDATION: {err}"))
    for r in results:
        log.info("cv %s mean_oa=%.6f%s", r.params, r.mean_oa, f" ({r.error})" if r.error else "")
    valid = [r for r in results if r.error is None]
    if not valid:
        raise ValidationError("no grid point could be evaluated: " + (results[0].error or ""))
    best = min(valid, key=GridResult.sort_key)
    p = best.params
    best_hp = base.replace(q=int(p["q"]), sigma=float(p["sigma"]), alpha=float(p["alpha"]),
                           beta=float(p["beta"]), d_s=int(p["d_s"]))
    return best_hp, results, fold_ids


def report_csv(results: Sequence[GridResult]) -> str:
    n_folds = max((len(r.fold_oa) for r in results), default=0)
    head = list(GRID_KEYS) + ["mean_oa"] + [f"fold_{i + 1}" for i in range(n_folds)] + ["error"]
    lines = [",".join(head)]
    for r in results:
        cells = [repr(r.params[k]) for k in GRID_KEYS] + [f"{r.mean_oa:.6f}"]
        cells += [f"{v:.6f}" for v in r.fold_oa] + [""] * (n_folds - len(r.fold_oa))
        cells.append((r.error or "").replace(",", ";").replace("\n", " "))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
