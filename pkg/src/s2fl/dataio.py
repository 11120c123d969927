"""Dataset container, CSV import, standardization, synthetic data and map output.

Container layout (a directory)::

    manifest.txt        key=value lines, first line ``magic=S2FLv1``
    modality_<k>.f64    little-endian float64, row-major (d_k, H*W)
    train_mask.u32      little-endian uint32, H*W entries, 0 = unlabeled
    test_mask.u32       same layout as train_mask.u32

Models use the same family: a manifest plus one ``.f64`` file per matrix.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import HyperParams, ModalityBlock, ProjectionModel
from .errors import DimensionError, FormatError, StorageError, ValidationError

log = logging.getLogger(__name__)

MAGIC = "S2FLv1"
F64 = np.dtype("<f8")
U32 = np.dtype("<u4")


@dataclass(frozen=True)
class DatasetBundle:
    modalities: tuple
    train_mask: np.ndarray
    test_mask: np.ndarray
    class_names: tuple
    grid: Tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        h, w = (int(v) for v in self.grid)
        object.__setattr__(self, "grid", (h, w))
        n_all = h * w
        if h < 1 or w < 1:
            raise DimensionError(f"grid {self.grid} must be positive")
        if not self.modalities:
            raise ValidationError("bundle needs at least one modality")
        for m in self.modalities:
            if m.n != n_all:
                raise DimensionError(f"modality {m.name!r} has {m.n} pixels, grid has {n_all}")
        for name in ("train_mask", "test_mask"):
            mask = np.asarray(getattr(self, name))
            if mask.shape != (n_all,):
                raise DimensionError(f"{name} has shape {mask.shape}, expected ({n_all},)")
            if np.any(mask < 0):
                raise ValidationError(f"{name} holds negative class ids")
            mask = mask.astype(np.int64)
            mask.setflags(write=False)
            object.__setattr__(self, name, mask)
        both = np.flatnonzero((self.train_mask > 0) & (self.test_mask > 0))
        if both.size:
            raise ValidationError(f"train and test masks overlap at pixel {int(both[0])}")
        top = max(int(self.train_mask.max()), int(self.test_mask.max()))
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(default_class_names(top)))
        C = self.C
        if top > C:
            raise ValidationError(f"mask uses class id {top} but only {C} classes are named")

    @property
    def C(self) -> int:
        return len(self.class_names)

    @property
    def K(self) -> int:
        return len(self.modalities)

    @property
    def n_all(self) -> int:
        return self.grid[0] * self.grid[1]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.train_mask > 0)

    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(self.test_mask > 0)

    def train_blocks(self) -> List[ModalityBlock]:
        idx = self.train_indices()
        return [ModalityBlock(m.id, m.name, m.data[:, idx]) for m in self.modalities]

    def train_labels(self) -> np.ndarray:
        return self.train_mask[self.train_indices()]

    def test_labels(self) -> np.ndarray:
        return self.test_mask[self.test_indices()]

    def with_modalities(self, modalities) -> "DatasetBundle":
        return DatasetBundle(modalities, self.train_mask, self.test_mask, self.class_names, self.grid)


def default_class_names(C: int) -> List[str]:
    return [f"class_{c}" for c in range(1, C + 1)]


# ---------------------------------------------------------------------------
# manifest helpers


def _check_value(key, value):
    value = str(value)
    if "\n" in value or "\r" in value:
        raise ValidationError(f"manifest value for {key!r} must not contain line breaks")
    return value


def write_manifest(path: Path, entries: Sequence[Tuple[str, object]]):
    lines = [f"{k}={_check_value(k, v)}" for k, v in entries]
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e


def read_manifest(path: Path) -> Dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"{path} line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value
        if lineno == 1 and (key.strip() != "magic" or value.strip() != MAGIC):
            raise FormatError(f"{path} line 1: bad magic {line!r}, expected 'magic={MAGIC}'")
    if "magic" not in out:
        raise FormatError(f"{path}: empty manifest, expected 'magic={MAGIC}'")
    return out


def _int_field(manifest, key, path):
    try:
        return int(manifest[key])
    except KeyError:
        raise FormatError(f"{path}: missing key {key!r}") from None
    except ValueError:
        raise FormatError(f"{path}: key {key!r} is not an integer: {manifest[key]!r}") from None


def write_matrix(path: Path, a: np.ndarray, dtype=F64):
    try:
        np.ascontiguousarray(a, dtype=dtype).tofile(path)
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e


def read_matrix(path: Path, shape, dtype=F64, what=None) -> np.ndarray:
    what = what or path.name
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    expected = int(np.prod(shape))
    if len(raw) != expected * dtype.itemsize:
        raise DimensionError(
            f"{path}: {what} declares shape {tuple(shape)} = {expected} values "
            f"({expected * dtype.itemsize} bytes) but the payload holds {len(raw)} bytes")
    a = np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="))
    if dtype.kind == "f":
        bad = np.flatnonzero(~np.isfinite(a))
        if bad.size:
            off = int(bad[0]) * dtype.itemsize
            raise ValidationError(f"{path}: non-finite value at byte offset {off} (element {int(bad[0])})")
    return a.reshape(shape)


# ---------------------------------------------------------------------------
# bundles


def save_bundle(bundle: DatasetBundle, path):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    names = list(bundle.class_names)
    if not names:
        top = max(int(bundle.train_mask.max()), int(bundle.test_mask.max()))
        names = default_class_names(top)
    h, w = bundle.grid
    entries = [("magic", MAGIC), ("kind", "bundle"), ("height", h), ("width", w), ("K", bundle.K)]
    for k, m in enumerate(bundle.modalities, start=1):
        entries += [(f"modality_{k}_name", m.name), (f"modality_{k}_channels", m.d)]
    entries.append(("C", len(names)))
    entries += [(f"class_{c}", n) for c, n in enumerate(names, start=1)]
    write_manifest(path / "manifest.txt", entries)
    for k, m in enumerate(bundle.modalities, start=1):
        write_matrix(path / f"modality_{k}.f64", m.data)
    write_matrix(path / "train_mask.u32", bundle.train_mask, U32)
    write_matrix(path / "test_mask.u32", bundle.test_mask, U32)


def load_bundle(path) -> DatasetBundle:
    path = Path(path)
    mpath = path / "manifest.txt"
    man = read_manifest(mpath)
    if man.get("kind", "bundle") != "bundle":
        raise FormatError(f"{mpath}: kind={man['kind']!r} is not a dataset bundle")
    h, w = _int_field(man, "height", mpath), _int_field(man, "width", mpath)
    K = _int_field(man, "K", mpath)
    C = _int_field(man, "C", mpath)
    n_all = h * w
    modalities = []
    for k in range(1, K + 1):
        name = man.get(f"modality_{k}_name", f"modality_{k}")
        d = _int_field(man, f"modality_{k}_channels", mpath)
        data = read_matrix(path / f"modality_{k}.f64", (d, n_all), what=f"modality {k} ({name!r})")
        modalities.append(ModalityBlock(k, name, data))
    train = read_matrix(path / "train_mask.u32", (n_all,), U32)
    test = read_matrix(path / "test_mask.u32", (n_all,), U32)
    names = [man.get(f"class_{c}", f"class_{c}") for c in range(1, C + 1)]
    try:
        return DatasetBundle(modalities, train, test, names, (h, w))
    except ValidationError as e:
        raise ValidationError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# CSV import


def _parse_rows(path: Path, kind=float):
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    rows = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        parsed = []
        bad = None
        for col, cell in enumerate(cells, start=1):
            try:
                v = kind(cell)
                if kind is float and not np.isfinite(v):
                    raise ValueError
                parsed.append(v)
            except ValueError:
                bad = col
                break
        if bad is not None:
            if not rows and width is None and all(not _numeric(c) for c in cells):
                # header row
                width = len(cells)
                continue
            raise FormatError(f"{path} row {lineno} column {bad}: cannot parse {cells[bad - 1]!r}")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise FormatError(f"{path} row {lineno}: {len(cells)} columns, expected {width}")
        rows.append(parsed)
    return rows


def _numeric(cell):
    try:
        float(cell)
        return True
    except ValueError:
        return False


def import_csv(modality_paths: Sequence, labels_path, grid: Tuple[int, int],
               names: Optional[Sequence[str]] = None,
               class_names: Optional[Sequence[str]] = None) -> DatasetBundle:
    """Build a bundle from per-modality CSVs (one row per pixel) and a label CSV.

    The label CSV has one row per pixel with ``train,test`` class ids
    (0 = unlabeled). A single header row is detected and skipped.
    """
    h, w = grid
    n_all = h * w
    modalities = []
    for k, p in enumerate(modality_paths, start=1):
        rows = _parse_rows(Path(p))
        if len(rows) != n_all:
            raise DimensionError(f"{p}: {len(rows)} data rows, grid {h}x{w} needs {n_all}")
        name = names[k - 1] if names else Path(p).stem
        modalities.append(ModalityBlock(k, name, np.array(rows, dtype=float).T))
    lab = _parse_rows(Path(labels_path), int)
    if len(lab) != n_all:
        raise DimensionError(f"{labels_path}: {len(lab)} data rows, grid {h}x{w} needs {n_all}")
    if lab and len(lab[0]) != 2:
        raise FormatError(f"{labels_path}: expected 2 columns (train,test), found {len(lab[0])}")
    lab = np.array(lab, dtype=np.int64).reshape(n_all, 2)
    if class_names is None:
        class_names = default_class_names(int(lab.max()) if lab.size else 0)
    return DatasetBundle(modalities, lab[:, 0], lab[:, 1], class_names, (h, w))


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Standardization:
    mode: str
    means: tuple = ()
    stds: tuple = ()
    # per modality: indices of bands whose training stdev fell below 1e-12
    constant_bands: tuple = ()

    def apply(self, k: int, X: np.ndarray) -> np.ndarray:
        """Standardize a ``(d_k, M)`` matrix of modality ``k`` (0-based)."""
        if self.mode == "none":
            return X
        mean, std = self.means[k], self.stds[k]
        if X.shape[0] != mean.size:
            raise DimensionError(f"modality {k + 1}: {X.shape[0]} channels, statistics for {mean.size}")
        return (X - mean[:, None]) / std[:, None]

    @property
    def flagged(self) -> bool:
        return any(len(c) for c in self.constant_bands)


def fit_standardization(bundle: DatasetBundle, mode: str = "per_band_zscore") -> Standardization:
    if mode in ("none", None):
        return Standardization("none")
    if mode not in ("per_band_zscore", "zscore"):
        raise ValidationError(f"unknown standardization mode {mode!r}")
    idx = bundle.train_indices()
    if idx.size == 0:
        raise ValidationError("standardization needs training pixels")
    means, stds, const = [], [], []
    for m in bundle.modalities:
        X = m.data[:, idx]
        mean = X.mean(axis=1)
        std = X.std(axis=1)
        flat = np.flatnonzero(std < 1e-12)
        std = np.where(std < 1e-12, 1.0, std)
        means.append(mean)
        stds.append(std)
        const.append(tuple(int(i) for i in flat))
    return Standardization("per_band_zscore", tuple(means), tuple(stds), tuple(const))


def standardize(bundle: DatasetBundle, mode: str = "per_band_zscore"):
    """Standardize every band with statistics fitted on training pixels only.

    Returns ``(bundle, statistics)``. Bands that are constant over the training
    pixels are centered but not scaled, and recorded in the statistics.
    """
    stats = fit_standardization(bundle, mode)
    if stats.mode == "none":
        return bundle, stats
    if stats.flagged:
        log.warning("constant bands left unscaled: %s", stats.constant_bands)
    mods = [ModalityBlock(m.id, m.name, stats.apply(k, m.data)) for k, m in enumerate(bundle.modalities)]
    return bundle.with_modalities(mods), stats


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    n_classes: int = 5
    dims: tuple = (12, 6)
    train_per_class: int = 60
    test_per_class: int = 100
    unlabeled_per_class: int = 0
    separation: float = 2.0
    noise: float = 0.5
    shared_fraction: float = 0.5
    latent_dim: int = 3
    seed: int = 0


def make_synthetic(config: Optional[SyntheticConfig] = None, **kw) -> DatasetBundle:
    """Draw a multimodal dataset from a shared/private latent model.

    Every class has a code ``u_c``. A sample of class ``c`` has shared latent
    ``s = separation * u_c + z`` (``z`` standard normal) common to all
    modalities, and each modality adds its own standard normal private latent
    ``p_k``, independent of the class. Modality ``k`` observes

        x_k = sqrt(f) A_k s + sqrt(1 - f) B_k p_k + noise * e

    with random Gaussian maps ``A_k``, ``B_k`` and ``f`` the shared fraction.
    Pixels of class ``c`` fill row ``c`` of the grid; train and test pixels
    are drawn at random within each row.
    """
    cfg = config if config is not None else SyntheticConfig()
    if kw:
        from dataclasses import replace
        cfg = replace(cfg, **kw)
    if cfg.n_classes < 1:
        raise ValidationError("synthetic data needs at least one class")
    per = cfg.train_per_class + cfg.test_per_class + cfg.unlabeled_per_class
    if per < 1 or cfg.train_per_class < 0 or cfg.test_per_class < 0 or cfg.unlabeled_per_class < 0:
        raise ValidationError("synthetic data needs a positive number of samples per class")
    if not cfg.dims or any(d < 1 for d in cfg.dims):
        raise ValidationError(f"invalid modality dimensions {cfg.dims}")
    if not 0 <= cfg.shared_fraction <= 1:
        raise ValidationError("shared_fraction must lie in [0, 1]")
    if cfg.latent_dim < 1 or cfg.noise < 0:
        raise ValidationError("latent_dim must be >= 1 and noise >= 0")

    rng = np.random.default_rng(cfg.seed)
    C, r = cfg.n_classes, cfg.latent_dim
    n_all = C * per
    labels = np.repeat(np.arange(1, C + 1), per)
    codes = rng.standard_normal((C, r))
    shared = cfg.separation * codes[labels - 1].T + rng.standard_normal((r, n_all))
    f = cfg.shared_fraction
    modalities = []
    for k, d in enumerate(cfg.dims, start=1):
        A = rng.standard_normal((d, r)) / np.sqrt(r)
        B = rng.standard_normal((d, r)) / np.sqrt(r)
        private = rng.standard_normal((r, n_all))
        X = np.sqrt(f) * A @ shared + np.sqrt(1 - f) * B @ private
        X = X + cfg.noise * rng.standard_normal((d, n_all))
        modalities.append(ModalityBlock(k, f"modality_{k}", X))

    train = np.zeros(n_all, dtype=np.int64)
    test = np.zeros(n_all, dtype=np.int64)
    for c in range(C):
        pick = c * per + rng.permutation(per)
        train[pick[:cfg.train_per_class]] = c + 1
        test[pick[cfg.train_per_class:cfg.train_per_class + cfg.test_per_class]] = c + 1
    return DatasetBundle(modalities, train, test, default_class_names(C), (C, per))


# ---------------------------------------------------------------------------
# classification maps


def write_class_map(predictions, grid: Tuple[int, int], path, class_names: Optional[Sequence[str]] = None):
    """Write a binary PGM (P5) whose pixel values are class ids, plus a legend.

    The legend goes next to the image as ``<stem>.legend.txt``, one
    ``id<TAB>name`` line per class, id 0 being ``unlabeled``.
    """
    h, w = grid
    pred = np.asarray(predictions).ravel()
    if pred.size != h * w:
        raise DimensionError(f"{pred.size} predictions for a {h}x{w} grid")
    if pred.size and (pred.min() < 0 or pred.max() > 255):
        raise FormatError(f"class ids must lie in 0..255 for an 8-bit map, got max {pred.max()}",
                          code="UNSUPPORTED")
    path = Path(path)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        path.write_bytes(header + pred.astype(np.uint8).tobytes())
        top = int(pred.max()) if pred.size else 0
        names = list(class_names) if class_names else default_class_names(top)
        legend = ["0\tunlabeled"] + [f"{c}\t{n}" for c, n in enumerate(names, start=1)]
        path.with_suffix(".legend.txt").write_text("\n".join(legend) + "\n", encoding="utf-8")
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e


def read_pgm(path) -> np.ndarray:
    """Minimal P5 reader (8-bit), returns an ``(H, W)`` uint8 array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported", code="UNSUPPORTED")
    data = raw[pos + 1:pos + 1 + w * h]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# models


def save_model(model: ProjectionModel, path, hp: Optional[HyperParams] = None,
               standardization: Optional[Standardization] = None,
               modality_names: Optional[Sequence[str]] = None,
               class_names: Optional[Sequence[str]] = None):
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    entries = [("magic", MAGIC), ("kind", "model"), ("K", model.K), ("d_s", model.d_s),
               ("C", model.P.shape[0])]
    for k, d in enumerate(model.dims, start=1):
        entries.append((f"modality_{k}_channels", d))
        if modality_names:
            entries.append((f"modality_{k}_name", modality_names[k - 1]))
    for c, n in enumerate(class_names or [], start=1):
        entries.append((f"class_{c}", n))
    if hp is not None:
        for key in ("alpha", "beta", "sigma", "q", "d_s", "max_outer", "max_admm", "zeta", "eps",
                    "mu0", "rho", "mu_max", "seed", "orthogonal"):
            entries.append((f"hp_{key}", repr(getattr(hp, key))))
    std = standardization or Standardization("none")
    entries.append(("standardize", std.mode))
    write_manifest(path / "manifest.txt", entries)
    write_matrix(path / "theta0.f64", model.theta0)
    for k, t in enumerate(model.theta_k, start=1):
        write_matrix(path / f"theta_{k}.f64", t)
    write_matrix(path / "P.f64", model.P)
    if std.mode != "none":
        for k in range(model.K):
            write_matrix(path / f"mean_{k + 1}.f64", std.means[k])
            write_matrix(path / f"std_{k + 1}.f64", std.stds[k])


@dataclass
class LoadedModel:
    model: ProjectionModel
    standardization: Standardization
    hyperparams: Optional[HyperParams]
    class_names: List[str] = field(default_factory=list)
    modality_names: List[str] = field(default_factory=list)


def load_model(path) -> LoadedModel:
    path = Path(path)
    mpath = path / "manifest.txt"
    man = read_manifest(mpath)
    if man.get("kind") != "model":
        raise FormatError(f"{mpath}: kind={man.get('kind')!r} is not a model")
    K, d_s, C = (_int_field(man, key, mpath) for key in ("K", "d_s", "C"))
    dims = [_int_field(man, f"modality_{k}_channels", mpath) for k in range(1, K + 1)]
    theta0 = read_matrix(path / "theta0.f64", (d_s, sum(dims)))
    theta_k = [read_matrix(path / f"theta_{k}.f64", (d_s, d)) for k, d in enumerate(dims, start=1)]
    P = read_matrix(path / "P.f64", (C, d_s))
    mode = man.get("standardize", "none")
    if mode == "none":
        std = Standardization("none")
    else:
        means = tuple(read_matrix(path / f"mean_{k}.f64", (d,)) for k, d in enumerate(dims, start=1))
        stds = tuple(read_matrix(path / f"std_{k}.f64", (d,)) for k, d in enumerate(dims, start=1))
        std = Standardization(mode, means, stds, tuple(() for _ in dims))
    hp = None
    if "hp_alpha" in man:
        import ast
        kw = {key[3:]: ast.literal_eval(v) for key, v in man.items() if key.startswith("hp_")}
        hp = HyperParams(**kw)
    names = [man[f"class_{c}"] for c in range(1, C + 1) if f"class_{c}" in man]
    mods = [man.get(f"modality_{k}_name", f"modality_{k}") for k in range(1, K + 1)]
    return LoadedModel(ProjectionModel(theta0, theta_k, P), std, hp, names, mods)
