"""Command-line interface.

    s2fl synth     --out DIR            write a synthetic bundle
    s2fl fit       --bundle DIR --out DIR
    s2fl transform --bundle DIR --model DIR --out DIR
    s2fl classify  --bundle DIR --model DIR --out DIR [--map]
    s2fl evaluate  --predictions CSV (--reference CSV | --bundle DIR) --out DIR
    s2fl cv        --bundle DIR --out DIR [--grid-q 5,10 ...]

Failures exit with status 2 and print one ``S2FL-ERR:<code>:<message>`` line
on stderr. ``S2FL_LOG`` selects the log level (quiet, info, debug).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dataio
from .classify import EmbeddingConfig, cml_predict, evaluate, nn_classify, transform
from .core import HyperParams, ModalityBlock, build_stack
from .cv import DEFAULT_GRIDS, GRID_KEYS, cross_validate, report_csv
from .errors import FormatError, S2FLError, StorageError, ValidationError
from .solver import fit

log = logging.getLogger("s2fl")

MODE_NAMES = {"shared": "shared_only", "specific": "specific_only", "both": "both"}
FUSION_NAMES = {"concat": "concatenate", "sum": "sum", "mean": "mean"}
STD_NAMES = {"none": "none", "zscore": "per_band_zscore"}


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _write_text(path: Path, text: str):
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e


def _outdir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    return path


def _hyperparams(args) -> HyperParams:
    return HyperParams(alpha=args.alpha, beta=args.beta, sigma=args.sigma, q=args.q, d_s=args.ds,
                       max_outer=args.max_outer, max_admm=args.max_admm, zeta=args.zeta,
                       eps=args.eps, seed=args.seed, monotone=args.guard,
                       orthogonal=not args.no_orthogonality)


def _embedding(args) -> EmbeddingConfig:
    return EmbeddingConfig(mode=MODE_NAMES[args.mode], fusion=FUSION_NAMES[args.fusion])


def _training_stack(bundle):
    return build_stack(bundle.train_blocks(), bundle.train_labels(), bundle.C)


def _load_for_model(args):
    """Load the bundle and model, standardizing the bundle with the model's statistics."""
    bundle = dataio.load_bundle(args.bundle)
    loaded = dataio.load_model(args.model)
    if bundle.K != loaded.model.K:
        raise ValidationError(f"model has {loaded.model.K} modalities, bundle has {bundle.K}")
    std = loaded.standardization
    mods = [ModalityBlock(m.id, m.name, std.apply(k, m.data)) for k, m in enumerate(bundle.modalities)]
    return bundle.with_modalities(mods), loaded


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = dataio.SyntheticConfig(
        n_classes=args.classes, dims=tuple(args.dims), train_per_class=args.train_per_class,
        test_per_class=args.test_per_class, unlabeled_per_class=args.unlabeled_per_class,
        separation=args.separation, noise=args.noise, shared_fraction=args.shared_fraction,
        latent_dim=args.latent_dim, seed=args.seed)
    bundle = dataio.make_synthetic(cfg)
    dataio.save_bundle(bundle, args.out)
    log.info("wrote synthetic bundle with %d pixels to %s", bundle.n_all, args.out)


def cmd_fit(args):
    out = _outdir(args.out)
    bundle = dataio.load_bundle(args.bundle)
    bundle, std = dataio.standardize(bundle, STD_NAMES[args.standardize])
    hp = _hyperparams(args)
    stack = _training_stack(bundle)
    model, trace = fit(stack, hp)
    dataio.save_model(model, out, hp, std, [m.name for m in bundle.modalities], bundle.class_names)
    lines = ["iter,objective,rel_delta,res_H,res_G"]
    for row in trace.rows():
        lines.append("{iter},{objective!r},{rel_delta!r},{res_H!r},{res_G!r}".format(**row))
    _write_text(out / "convergence.csv", "\n".join(lines) + "\n")
    log.info("fit finished after %d outer iterations (%s)", len(trace.outer_objectives), trace.terminated_by)


def cmd_transform(args):
    out = _outdir(args.out)
    bundle, loaded = _load_for_model(args)
    F = transform(loaded.model, [m.data for m in bundle.modalities], _embedding(args))
    dataio.write_matrix(out / "features.f64", F)
    dataio.write_manifest(out / "manifest.txt", [
        ("magic", dataio.MAGIC), ("kind", "features"), ("rows", F.shape[0]), ("cols", F.shape[1]),
        ("height", bundle.grid[0]), ("width", bundle.grid[1]), ("mode", args.mode), ("fusion", args.fusion)])


def cmd_classify(args):
    out = _outdir(args.out)
    bundle, loaded = _load_for_model(args)
    model = loaded.model
    config = _embedding(args)
    tri = bundle.train_indices()
    stack = _training_stack(bundle)
    X = [m.data for m in bundle.modalities]
    if args.cml_modality is not None:
        k = args.cml_modality
        if not 1 <= k <= bundle.K:
            raise ValidationError(f"--cml-modality {k} outside 1..{bundle.K}")
        pred = cml_predict(model, stack, X[k - 1], k, config)
    else:
        F = transform(model, X, config)
        pred = nn_classify(F[:, tri], stack.labels, F)
    lines = ["pixel,prediction"] + [f"{i},{int(p)}" for i, p in enumerate(pred)]
    _write_text(out / "predictions.csv", "\n".join(lines) + "\n")
    ref = ["pixel,label"] + [f"{i},{int(bundle.test_mask[i])}" for i in bundle.test_indices()]
    _write_text(out / "reference.csv", "\n".join(ref) + "\n")
    if args.map:
        dataio.write_class_map(pred, bundle.grid, out / "classmap.pgm", bundle.class_names)


def read_label_csv(path) -> dict:
    """``pixel -> label`` from a two-column CSV with an optional header."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise StorageError(f"{path}: {e.strerror or e}") from e
    out = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 2:
            raise FormatError(f"{path} row {lineno}: expected 2 columns, found {len(cells)}")
        try:
            pixel, label = int(cells[0]), int(cells[1])
        except ValueError:
            if lineno == 1 or not out and all(not c.lstrip("-").isdigit() for c in cells):
                continue
            raise FormatError(f"{path} row {lineno}: cannot parse {line!r}") from None
        out[pixel] = label
    return out


def cmd_evaluate(args):
    out = _outdir(args.out)
    pred = read_label_csv(args.predictions)
    if args.reference:
        ref = read_label_csv(args.reference)
        C = args.classes
        names = None
    elif args.bundle:
        bundle = dataio.load_bundle(args.bundle)
        ref = {int(i): int(bundle.test_mask[i]) for i in bundle.test_indices()}
        C = args.classes or bundle.C
    else:
        raise ValidationError("evaluate needs --reference or --bundle")
    pixels = sorted(p for p, lab in ref.items() if lab > 0)
    missing = [p for p in pixels if p not in pred]
    if missing:
        raise ValidationError(f"no prediction for reference pixel {missing[0]}")
    if not pixels:
        raise ValidationError("reference holds no labeled pixels")
    y_ref = np.array([ref[p] for p in pixels])
    y_pred = np.array([pred[p] for p in pixels])
    if C is None:
        C = int(max(y_ref.max(), y_pred.max()))
    report = evaluate(y_pred, y_ref, C)
    _write_text(out / "report.txt", report.to_text())
    _write_text(out / "confusion.csv", report.confusion_csv())
    sys.stdout.write(report.to_text())


def cmd_cv(args):
    out = _outdir(args.out)
    bundle = dataio.load_bundle(args.bundle)
    bundle, _ = dataio.standardize(bundle, STD_NAMES[args.standardize])
    stack = _training_stack(bundle)
    grids = {}
    for key in GRID_KEYS:
        val = getattr(args, f"grid_{key}")
        if val is not None:
            grids[key] = val
    best, results, _ = cross_validate(stack, grids, args.folds, _hyperparams(args), _embedding(args), args.jobs)
    _write_text(out / "cv_report.csv", report_csv(results))
    lines = [f"{k}={getattr(best, k)!r}" for k in ("alpha", "beta", "sigma", "q", "d_s")]
    _write_text(out / "best.txt", "\n".join(lines) + "\n")
    sys.stdout.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# parser


def _add_hp(p):
    d = HyperParams()
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--sigma", type=float, default=d.sigma)
    p.add_argument("--q", type=int, default=d.q)
    p.add_argument("--ds", type=int, default=d.d_s, help="subspace dimension")
    p.add_argument("--max-outer", type=int, default=d.max_outer)
    p.add_argument("--max-admm", type=int, default=d.max_admm)
    p.add_argument("--zeta", type=float, default=d.zeta)
    p.add_argument("--eps", type=float, default=d.eps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--standardize", choices=sorted(STD_NAMES), default="zscore")
    p.add_argument("--guard", action="store_true",
                   help="reject block updates that increase the objective")
    p.add_argument("--no-orthogonality", action="store_true",
                   help="ablation: drop the orthogonality constraints")


def _add_embedding(p):
    p.add_argument("--mode", choices=sorted(MODE_NAMES), default="both")
    p.add_argument("--fusion", choices=sorted(FUSION_NAMES), default="concat")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2fl", description="Shared and specific subspace learning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic multimodal bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--dims", type=_ints, default=[12, 6])
    p.add_argument("--train-per-class", type=int, default=60)
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--unlabeled-per-class", type=int, default=0)
    p.add_argument("--separation", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--shared-fraction", type=float, default=0.5)
    p.add_argument("--latent-dim", type=int, default=3)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="learn projections from the training pixels of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="model directory")
    _add_hp(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("transform", help="write fused features for every pixel")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_embedding(p)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("classify", help="1-NN classification of every pixel")
    p.add_argument("--bundle", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cml-modality", type=int, default=None,
                   help="classify from this modality alone (cross-modality setting)")
    p.add_argument("--map", action="store_true", help="also write a PGM class map")
    _add_embedding(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("evaluate", help="OA/AA/kappa of predictions against a reference")
    p.add_argument("--predictions", required=True)
    p.add_argument("--reference")
    p.add_argument("--bundle")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cv", help="k-fold grid search on the training pixels")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    _add_hp(p)
    _add_embedding(p)
    for key in GRID_KEYS:
        kind = _ints if key in ("q", "d_s") else _floats
        flag = "--grid-ds" if key == "d_s" else f"--grid-{key}"
        p.add_argument(flag, dest=f"grid_{key}", type=kind, default=None,
                       help=f"candidate values (default {','.join(map(str, DEFAULT_GRIDS[key]))})")
    p.set_defaults(func=cmd_cv)
    return parser


def _configure_logging():
    level = os.environ.get("S2FL_LOG", "info").strip().lower()
    levels = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except S2FLError as e:
        msg = str(e).replace("\n", " ")
        sys.stderr.write(f"S2FL-ERR:{e.code}:{msg}\n")
        return 2
    except OSError as e:
        sys.stderr.write(f"S2FL-ERR:IO:{e}\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
