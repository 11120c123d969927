"""Feature extraction from a fitted model, 1-NN classification and accuracy metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .core import ModalityBlock, ProjectionModel, TrainingStack, validate_labels
from .errors import DimensionError, ValidationError

MODES = ("shared_only", "specific_only", "both")
FUSIONS = ("concatenate", "sum", "mean")


@dataclass(frozen=True)
class EmbeddingConfig:
    mode: str = "both"
    fusion: str = "concatenate"
    # 1-based modality ids; None means all
    modalities: Optional[tuple] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.modalities is not None:
            mods = tuple(int(k) for k in self.modalities)
            if not mods:
                raise ValidationError("modality selection must not be empty")
            object.__setattr__(self, "modalities", mods)

    def selected(self, K: int) -> tuple:
        mods = self.modalities if self.modalities is not None else tuple(range(1, K + 1))
        bad = [k for k in mods if not 1 <= k <= K]
        if bad:
            raise ValidationError(f"modalities {bad} outside 1..{K}")
        return mods


@dataclass
class EvalReport:
    confusion: np.ndarray
    oa: float
    aa: float
    kappa: float
    per_class_accuracy: np.ndarray
    # classes absent from the reference, left out of AA
    excluded_classes: List[int] = field(default_factory=list)
    kappa_degenerate: bool = False

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_text(self) -> str:
        lines = [
            f"samples={self.total}",
            f"classes={self.confusion.shape[0]}",
            f"oa={self.oa:.6f}",
            f"aa={self.aa:.6f}",
            f"kappa={self.kappa:.6f}",
        ]
        for c, acc in enumerate(self.per_class_accuracy, start=1):
            lines.append(f"class_{c}_accuracy={acc:.6f}")
        lines.append("aa_excluded=" + ",".join(str(c) for c in self.excluded_classes))
        lines.append(f"kappa_degenerate={int(self.kappa_degenerate)}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        C = self.confusion.shape[0]
        head = "reference\\prediction," + ",".join(str(c) for c in range(1, C + 1))
        rows = [f"{r}," + ",".join(str(int(v)) for v in self.confusion[r - 1]) for r in range(1, C + 1)]
        return "\n".join([head] + rows) + "\n"


def embed_modality(model: ProjectionModel, X_k: np.ndarray, k: int, mode: str = "both") -> np.ndarray:
    """Project a ``(d_k, M)`` matrix of modality ``k`` (1-based) into the subspace."""
    if not 1 <= k <= model.K:
        raise ValidationError(f"modality index {k} outside 1..{model.K}")
    X_k = np.asarray(X_k, dtype=float)
    d_k = model.dims[k - 1]
    if X_k.ndim != 2 or X_k.shape[0] != d_k:
        raise DimensionError(f"modality {k} expects {d_k} channels, got array of shape {X_k.shape}")
    if mode == "shared_only":
        T = model.theta0_block(k - 1)
    elif mode == "specific_only":
        T = model.theta_k[k - 1]
    elif mode == "both":
        T = model.theta0_block(k - 1) + model.theta_k[k - 1]
    else:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    return T @ X_k


def fuse(embeddings: Sequence[np.ndarray], fusion: str = "concatenate") -> np.ndarray:
    if not embeddings:
        raise ValidationError("nothing to fuse")
    m = embeddings[0].shape[1]
    for e in embeddings[1:]:
        if e.shape[1] != m:
            raise DimensionError(f"cannot fuse embeddings with {e.shape[1]} and {m} samples")
    if fusion == "concatenate":
        return np.vstack(embeddings)
    if fusion in ("sum", "mean"):
        first = embeddings[0].shape
        if any(e.shape != first for e in embeddings):
            raise DimensionError("sum/mean fusion needs embeddings of equal shape")
        total = np.sum(embeddings, axis=0)
        return total / len(embeddings) if fusion == "mean" else total
    raise ValidationError(f"fusion must be one of {FUSIONS}, got {fusion!r}")


def transform(model: ProjectionModel, X: Sequence[np.ndarray],
              config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Embed and fuse the selected modalities; ``X`` lists all K modality matrices."""
    if len(X) != model.K:
        raise DimensionError(f"model has {model.K} modalities, got {len(X)} matrices")
    mods = config.selected(model.K)
    return fuse([embed_modality(model, X[k - 1], k, config.mode) for k in mods], config.fusion)


def nn_classify(train_features, train_labels, test_features, chunk: int = 2048) -> np.ndarray:
    """1-nearest-neighbor labels under squared Euclidean distance.

    Exact ties go to the training sample with the smallest index.
    """
    A = np.asarray(train_features, dtype=float)
    B = np.asarray(test_features, dtype=float)
    y = np.asarray(train_labels)
    if A.ndim != 2 or A.shape[1] == 0:
        raise ValidationError("training set is empty")
    if y.shape != (A.shape[1],):
        raise DimensionError(f"{y.size} training labels for {A.shape[1]} training samples")
    if B.ndim != 2 or B.shape[0] != A.shape[0]:
        raise DimensionError(f"test features of shape {B.shape} do not match training dimension {A.shape[0]}")
    out = np.empty(B.shape[1], dtype=y.dtype)
    for s in range(0, B.shape[1], chunk):
        d2 = cdist(B[:, s:s + chunk].T, A.T, "sqeuclidean")
        # argmin returns the first minimum
        out[s:s + chunk] = y[np.argmin(d2, axis=1)]
    return out


def confusion_matrix(predictions, reference, C: int) -> np.ndarray:
    p = validate_labels(predictions, C)
    r = validate_labels(reference, C)
    if p.size != r.size:
        raise ValidationError(f"{p.size} predictions for {r.size} reference labels")
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (r - 1, p - 1), 1)
    return cm


def report_from_confusion(cm: np.ndarray) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValidationError("no samples to evaluate")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    oa = np.trace(cm) / total
    present = rows > 0
    per_class = np.zeros(cm.shape[0])
    per_class[present] = np.diag(cm)[present] / rows[present]
    aa = float(per_class[present].mean())
    pe = float(np.dot(rows, cols)) / float(total) ** 2
    degenerate = pe >= 1.0
    kappa = 0.0 if degenerate else (oa - pe) / (1.0 - pe)
    excluded = [int(c) + 1 for c in np.flatnonzero(~present)]
    return EvalReport(cm, float(oa), aa, float(kappa), per_class, excluded, bool(degenerate))


def evaluate(predictions, reference, C: int) -> EvalReport:
    """Confusion matrix (rows reference, columns prediction), OA, AA and Cohen's kappa."""
    return report_from_confusion(confusion_matrix(predictions, reference, C))


def cml_predict(model: ProjectionModel, train_stack: TrainingStack, test_block, k: int,
                config: EmbeddingConfig = EmbeddingConfig()) -> np.ndarray:
    """Classify samples for which only modality ``k`` is available.

    Training features come from the configured training modalities. With
    several training modalities, their embeddings are averaged (whatever the
    configured fusion) so that they live in the same ``d_s``-dimensional
    space, at the same scale, as the single-modality test features.
    """
    X_test = test_block.data if isinstance(test_block, ModalityBlock) else np.asarray(test_block, dtype=float)
    if not 1 <= k <= model.K:
        raise ValidationError(f"modality index {k} outside 1..{model.K}")
    mods = config.selected(model.K)
    embs = [embed_modality(model, train_stack.X[j - 1], j, config.mode) for j in mods]
    # a summed training feature would be K times the scale of a test feature
    train_feat = fuse(embs, "mean" if len(embs) > 1 else config.fusion)
    test_feat = embed_modality(model, X_test, k, config.mode)
    return nn_classify(train_feat, train_stack.labels, test_feat)
