"""Command-line entry point: ``mbunmix {synth,run,stats,maps,convert}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as D
from . import experiment as X

log = logging.getLogger("mbunmix")


def _csv_list(text: str, convert=str) -> list:
    return [convert(t) for t in text.split(",") if t.strip()]


def _snr(text: str):
    return None if text.strip().lower() in ("clean", "none", "inf") else float(text)


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    settings = _load_json(args.config) if args.config else {}
    for f in fields(D.SynthConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            settings[f.name] = value
    cfg = D.SynthConfig(**settings)
    bundle = D.synth_bundle(cfg)
    path = D.save_bundle(args.out, bundle)
    sums = bundle.abundances.sum(axis=-1)
    print(f"wrote {path}: {bundle.height}x{bundle.width} pixels, {bundle.bands} bands, "
          f"{bundle.n_endmembers} endmembers, snr={cfg.snr_db}, "
          f"abundance sums in [{sums.min():.6f}, {sums.max():.6f}]")
    return 0


# ---------------------------------------------------------------- run


def experiment_config(args) -> X.ExperimentConfig:
    settings = _load_json(args.config) if args.config else {}
    if args.bundle is not None:
        settings["bundle"] = args.bundle
        settings.pop("synth", None)
    overrides = {
        "variants": args.variants and _csv_list(args.variants),
        "folds": args.folds,
        "fractions": args.fractions and _csv_list(args.fractions, float),
        "patch_sizes": args.patch and _csv_list(args.patch, int),
        "snrs": args.snr and _csv_list(args.snr, _snr),
        "seed": args.seed,
        "out": args.out,
        "test_size": args.test_size,
        "pool_size": args.pool_size,
        "workers": args.workers,
    }
    settings.update({k: v for k, v in overrides.items() if v is not None})
    if args.timing:
        settings["timing"] = True
    if args.epochs is not None or args.patience is not None:
        train = dict(settings.get("train", {}))
        if args.epochs is not None:
            train["max_epochs"] = args.epochs
        if args.patience is not None:
            train["patience"] = args.patience
        settings["train"] = train
    return X.ExperimentConfig.from_dict(settings)


def cmd_run(args) -> int:
    cfg = experiment_config(args)
    rows, ok = X.run_experiment(cfg)
    failed = sum(1 for r in rows if "error" in r)
    print(f"{len(rows)} cells written to {Path(cfg.out) / 'results.csv'}; {failed} failed")
    return 0 if ok else 1


# ---------------------------------------------------------------- stats


def cmd_stats(args) -> int:
    rows = X.read_results(args.results)
    variants = _csv_list(args.variants) if args.variants else None
    out = Path(args.out) if args.out else Path(args.results).parent
    comparisons, ranks = [], []
    for metric in _csv_list(args.metric):
        comparisons += X.compare_to_baseline(rows, args.baseline, metric=metric,
                                             variants=variants, alpha=args.alpha)
        ranks += X.rank_table(rows, metric=metric)
    summary = X.summarize_comparisons(comparisons)
    X.write_stats(out, comparisons, ranks, summary)
    same = sum(s["same"] for s in summary)
    total = sum(s["total"] for s in summary)
    print(f"{same}/{total} comparisons statistically the same as {args.baseline}; tables in {out}")
    return 0


# ---------------------------------------------------------------- maps


def cmd_maps(args) -> int:
    bundle = D.load_bundle(args.bundle)
    names = bundle.endmember_names
    if args.truth:
        paths = X.write_maps(args.out, bundle.abundances, names, prefix="truth")
    else:
        if not args.model:
            raise X.ExperimentError("--model is required unless --truth is given")
        model = X.load_model(args.model)
        paths = X.write_maps(args.out, X.abundance_maps(model, bundle), names)
    for p in paths:
        print(p)
    return 0


# ---------------------------------------------------------------- convert


def _read_matrix(path: str, key: str | None) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".npy":
        return np.load(path)
    if suffix == ".mat":
        from scipy.io import loadmat

        mat = {k: v for k, v in loadmat(path).items() if not k.startswith("__")}
        if key is None:
            arrays = [k for k, v in mat.items() if isinstance(v, np.ndarray) and v.ndim == 2 and v.size > 1]
            if len(arrays) != 1:
                raise D.BundleError(f"{path}: pick a variable with a key option, found {sorted(mat)}")
            key = arrays[0]
        return np.asarray(mat[key], dtype=np.float64)
    delimiter = "," if suffix == ".csv" else None
    return np.loadtxt(path, delimiter=delimiter, ndmin=2)


def _pixels_first(matrix: np.ndarray, n_pixels: int, what: str) -> np.ndarray:
    if matrix.ndim == 3:
        return matrix.reshape(-1, matrix.shape[-1])
    if matrix.shape[0] == n_pixels:
        return matrix
    if matrix.shape[1] == n_pixels:
        return matrix.T
    raise D.BundleError(f"{what} matrix {matrix.shape} has no axis of length {n_pixels}")


def cmd_convert(args) -> int:
    h, w = args.height, args.width
    n = h * w
    cube = _pixels_first(_read_matrix(args.cube, args.cube_key), n, "cube")
    ab = _pixels_first(_read_matrix(args.abundances, args.abundance_key), n, "abundance")
    order = args.order or ("F" if Path(args.cube).suffix.lower() == ".mat" else "C")
    if order == "F":
        # column-major pixel numbering, as produced by MATLAB reshapes
        cube = cube.reshape(w, h, -1).transpose(1, 0, 2)
        ab = ab.reshape(w, h, -1).transpose(1, 0, 2)
    else:
        cube = cube.reshape(h, w, -1)
        ab = ab.reshape(h, w, -1)
    if args.scale == "max":
        cube = cube / np.abs(cube).max()
    endmembers = None
    if args.endmembers:
        E = _read_matrix(args.endmembers, args.endmember_key)
        endmembers = E if E.shape == (ab.shape[-1], cube.shape[-1]) else E.T
    names = _csv_list(args.names) if args.names else [f"e{i}" for i in range(ab.shape[-1])]
    bundle = D.Bundle(name=args.name, cube=cube.astype(np.float32), abundances=ab.astype(np.float32),
                      endmember_names=names,
                      endmembers=None if endmembers is None else endmembers.astype(np.float32))
    path = D.save_bundle(args.out, bundle)
    print(f"wrote {path}: {h}x{w} pixels, {cube.shape[-1]} bands, {ab.shape[-1]} endmembers")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbunmix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic bundle")
    s.add_argument("--config", help="JSON file with synthesis settings")
    s.add_argument("--out", required=True)
    for f in fields(D.SynthConfig):
        kind = {"int": int, "float": float, "str": str}.get(str(f.type).split(" ")[0], float)
        s.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind)

    r = sub.add_parser("run", help="run the experiment matrix")
    r.add_argument("--config", help="JSON experiment config")
    r.add_argument("--bundle")
    r.add_argument("--variants", help="comma list, e.g. MB,MB-DR,1D+2D,LMM")
    r.add_argument("--folds", type=int)
    r.add_argument("--fractions", help="comma list of training fractions")
    r.add_argument("--patch", help="comma list of odd patch sizes")
    r.add_argument("--snr", help="comma list of test SNRs in dB; 'clean' for none")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--test-size", type=int)
    r.add_argument("--pool-size", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--patience", type=int)
    r.add_argument("--workers", type=int)
    r.add_argument("--timing", action="store_true", help="fill the wall-clock columns")

    t = sub.add_parser("stats", help="Wilcoxon comparisons and rank tables")
    t.add_argument("results")
    t.add_argument("--baseline", default="MB")
    t.add_argument("--variants", help="comma list; default all but the baseline")
    t.add_argument("--metric", default="rmse", help="rmse, rmsaad or both comma separated")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--out")

    m = sub.add_parser("maps", help="write per-endmember PGM abundance maps")
    m.add_argument("--bundle", required=True)
    m.add_argument("--model")
    m.add_argument("--truth", action="store_true", help="render the ground truth instead")
    m.add_argument("--out", required=True)

    c = sub.add_parser("convert", help="import matrix files into a bundle")
    c.add_argument("--cube", required=True, help=".mat, .npy, .csv or whitespace text")
    c.add_argument("--abundances", required=True)
    c.add_argument("--endmembers")
    c.add_argument("--height", type=int, required=True)
    c.add_argument("--width", type=int, required=True)
    c.add_argument("--name", default="dataset")
    c.add_argument("--names", help="comma list of endmember names")
    c.add_argument("--order", choices=("C", "F"), help="pixel numbering; default F for .mat, else C")
    c.add_argument("--scale", choices=("none", "max"), default="none")
    c.add_argument("--cube-key")
    c.add_argument("--abundance-key")
    c.add_argument("--endmember-key")
    c.add_argument("--out", required=True)
    return parser


COMMANDS = {"synth": cmd_synth, "run": cmd_run, "stats": cmd_stats, "maps": cmd_maps, "convert": cmd_convert}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
