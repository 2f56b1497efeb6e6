"""Experiment matrix: variants x folds x training fractions x patch sizes x test noise.

Every (variant, fold, fraction, patch) unit trains one model, which is then
scored on the fold's fixed test set once per requested test SNR. Each
scored combination is a *cell* and becomes one row of ``results.csv``.

Seeds derive from the global seed and the unit key, so adding a variant or
a fold never changes the numbers of other cells. Completed units are
appended to ``progress.jsonl`` as they finish; rerunning with the same
output directory skips them.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import data as D
from .arch import MBConfig, Network, build_model
from .lmm import LinearMixingModel
from .metrics import evaluate
from .stats import average_rank, wilcoxon_signed_rank
from .train import TrainConfig, train, train_sequential

log = logging.getLogger(__name__)

_ALL = ("1D", "2D", "3D")

# name -> (branches, architecture variant, training strategy)
VARIANTS: dict[str, tuple[tuple[str, ...], str, str] | None] = {
    "MB": (_ALL, "MB", "joint"),
    "MB-DR": (_ALL, "MB-DR", "joint"),
    "MB-Res": (_ALL, "MB-Res", "joint"),
    "MB-PT": (_ALL, "MB-Res", "pretrain_finetune"),
    "MB-TL": (_ALL, "MB-Res", "pretrain_freeze"),
    "MB(1D)": (("1D",), "MB", "joint"),
    "MB(2D)": (("2D",), "MB", "joint"),
    "MB(3D)": (("3D",), "MB", "joint"),
    "MB(1D+2D)": (("1D", "2D"), "MB", "joint"),
    "MB(1D+3D)": (("1D", "3D"), "MB", "joint"),
    "MB(2D+3D)": (("2D", "3D"), "MB", "joint"),
    "LMM": None,
}

BASE_COLUMNS = ["dataset", "variant", "fold", "fraction", "patch", "snr_db", "rmse", "rmsaad",
                "train_seconds", "infer_seconds"]


class ExperimentError(ValueError):
    pass


def canonical_variant(name: str) -> str:
    name = name.strip()
    if name in VARIANTS:
        return name
    alias = f"MB({name})"
    if alias in VARIANTS:
        return alias
    raise ExperimentError(f"unknown variant {name!r}; choose from {list(VARIANTS)}")


@dataclass
class ExperimentConfig:
    bundle: str | None = None
    synth: dict | None = None
    variants: list[str] = field(default_factory=lambda: ["MB"])
    folds: int = 30
    fractions: list[float] = field(default_factory=lambda: list(D.SUPPORTED_FRACTIONS))
    patch_sizes: list[int] = field(default_factory=lambda: [3])
    snrs: list[float | None] = field(default_factory=lambda: [None])
    test_size: int | None = None
    pool_size: int | None = None
    seed: int = 0
    out: str = "results"
    train: dict = field(default_factory=dict)
    arch: dict = field(default_factory=dict)
    timing: bool = False
    workers: int = 1
    use_true_endmembers: bool = False

    def __post_init__(self):
        self.variants = [canonical_variant(v) for v in self.variants]
        if not self.variants:
            raise ExperimentError("no variants requested")
        if len(set(self.variants)) != len(self.variants):
            raise ExperimentError("duplicate variants")
        self.fractions = [float(f) for f in self.fractions]
        for f in self.fractions:
            if not any(math.isclose(f, s) for s in D.SUPPORTED_FRACTIONS):
                raise ExperimentError(f"training fraction {f} not in {D.SUPPORTED_FRACTIONS}")
        self.patch_sizes = [int(p) for p in self.patch_sizes]
        if any(p < 1 or p % 2 == 0 for p in self.patch_sizes):
            raise ExperimentError(f"patch sizes must be odd, got {self.patch_sizes}")
        self.snrs = [None if s is None else float(s) for s in self.snrs] or [None]
        if self.folds < 1:
            raise ExperimentError("folds must be >= 1")
        if (self.bundle is None) == (self.synth is None):
            raise ExperimentError("give exactly one of a bundle path or a synth config")
        # seed and strategy are owned by the harness
        bad = (set(self.train) - {f.name for f in fields(TrainConfig)}) | ({"seed", "strategy"} & set(self.train))
        if bad:
            raise ExperimentError(f"unsupported train settings {sorted(bad)}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Unit:
    variant: str
    fold: int
    fraction: float
    patch: int

    @property
    def key(self) -> list:
        return [self.variant, self.fold, self.fraction, self.patch]

    @property
    def slug(self) -> str:
        return f"{self.variant.replace('(', '_').replace(')', '').replace('+', '-')}" \
               f"__fold{self.fold:02d}__frac{self.fraction:g}__p{self.patch}"


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps(parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2 ** 63)


def plan_units(cfg: ExperimentConfig) -> list[Unit]:
    """Training units in canonical (config) order."""
    return [Unit(v, k, f, p) for v in cfg.variants for k in range(cfg.folds)
            for f in cfg.fractions for p in cfg.patch_sizes]


def plan_cells(cfg: ExperimentConfig) -> list[tuple]:
    return [(u.variant, u.fold, u.fraction, u.patch, s) for u in plan_units(cfg) for s in cfg.snrs]


# ----------------------------------------------------------------------------
# Running units
# ----------------------------------------------------------------------------

_BUNDLE_CACHE: dict[str, D.Bundle] = {}


def load_experiment_bundle(cfg: ExperimentConfig) -> D.Bundle:
    key = json.dumps([cfg.bundle, cfg.synth], sort_keys=True)
    if key not in _BUNDLE_CACHE:
        if cfg.bundle is not None:
            _BUNDLE_CACHE[key] = D.load_bundle(cfg.bundle)
        else:
            _BUNDLE_CACHE[key] = D.synth_bundle(D.SynthConfig(**cfg.synth))
    return _BUNDLE_CACHE[key]


def make_split(cfg: ExperimentConfig, bundle: D.Bundle) -> D.SplitSpec:
    n = bundle.n_pixels
    test_size = cfg.test_size if cfg.test_size is not None else n // 3
    return D.monte_carlo_split(n, test_size, cfg.folds, seed=cfg.seed, pool_size=cfg.pool_size)


def noisy_cube(cfg: ExperimentConfig, bundle: D.Bundle, fold: int, snr: float | None) -> np.ndarray:
    """The scene as seen at test time: clean, or with white noise at ``snr`` dB.

    The noise realisation depends on (seed, fold, snr) only, so every variant
    is scored on the same contaminated test set.
    """
    if snr is None:
        return bundle.cube
    return D.add_awgn(bundle.cube, snr, seed=derive_seed(cfg.seed, "noise", fold, snr))


def _fit(cfg: ExperimentConfig, bundle: D.Bundle, unit: Unit, train_idx: np.ndarray):
    seed = derive_seed(cfg.seed, unit.variant, unit.fold, unit.fraction, unit.patch)
    spec = VARIANTS[unit.variant]
    flat_ab = bundle.abundances.reshape(-1, bundle.n_endmembers)
    if spec is None:
        E = bundle.endmembers if cfg.use_true_endmembers else None
        if cfg.use_true_endmembers and E is None:
            raise ExperimentError("bundle carries no endmember spectra")
        model = LinearMixingModel(endmembers=None if E is None else np.asarray(E, dtype=np.float64))
        return model.fit(bundle.cube.reshape(-1, bundle.bands)[train_idx], flat_ab[train_idx])
    branches, variant, strategy = spec
    mb = MBConfig(p=unit.patch, bands=bundle.bands, endmembers=bundle.n_endmembers,
                  branches=branches, variant=variant, **cfg.arch)
    tcfg = TrainConfig(**{**cfg.train, "seed": seed, "strategy": strategy})
    X = D.extract_patches(bundle.cube, train_idx, unit.patch)
    Y = flat_ab[train_idx]
    if strategy == "joint":
        net, _ = train(build_model(mb, seed=seed), X, Y, tcfg)
    else:
        net, _ = train_sequential(mb, tcfg, X, Y, seed=seed)
    return net


def predict(model, cube: np.ndarray, indices: np.ndarray, patch: int) -> np.ndarray:
    if isinstance(model, LinearMixingModel):
        return model.predict(cube.reshape(-1, cube.shape[-1])[indices])
    return model.predict(D.extract_patches(cube, indices, patch))


def load_model(path):
    with np.load(path) as z:
        is_lmm = "endmembers" in z.files
    return LinearMixingModel.load(path) if is_lmm else Network.load(path)


def run_unit(cfg: ExperimentConfig, unit: Unit) -> list[dict]:
    """Train one unit, persist its model and score it at every test SNR."""
    bundle = load_experiment_bundle(cfg)
    split = make_split(cfg, bundle)
    flat_ab = bundle.abundances.reshape(-1, bundle.n_endmembers)
    try:
        train_idx = D.subsample_training(split, unit.fold, unit.fraction, seed=cfg.seed)
        t0 = time.perf_counter()
        model = _fit(cfg, bundle, unit, train_idx)
        train_seconds = time.perf_counter() - t0
        model_dir = Path(cfg.out) / "models"
        model_dir.mkdir(parents=True, exist_ok=True)
        model.save(model_dir / f"{unit.slug}.npz")
    except Exception as exc:  # recorded as error rows; the run carries on
        log.error("unit %s failed: %s", unit.key, exc, exc_info=log.isEnabledFor(logging.DEBUG))
        return [_error_row(bundle, unit, s, exc) for s in cfg.snrs]

    rows = []
    test_idx = split.folds[unit.fold].test
    for snr in cfg.snrs:
        try:
            t0 = time.perf_counter()
            pred = predict(model, noisy_cube(cfg, bundle, unit.fold, snr), test_idx, unit.patch)
            infer_seconds = time.perf_counter() - t0
            report = evaluate(pred, flat_ab[test_idx], dataset=bundle.name, variant=unit.variant,
                              fold=unit.fold, fraction=unit.fraction, patch=unit.patch, snr_db=snr,
                              train_seconds=train_seconds if cfg.timing else None,
                              infer_seconds=infer_seconds if cfg.timing else None)
            rows.append(report.to_dict())
        except Exception as exc:
            log.error("scoring %s at snr %s failed: %s", unit.key, snr, exc,
                      exc_info=log.isEnabledFor(logging.DEBUG))
            rows.append(_error_row(bundle, unit, snr, exc))
    return rows


def audit_row(cfg: ExperimentConfig, row: dict) -> dict:
    """Recompute one result row from its persisted model and the bundle."""
    unit = Unit(row["variant"], int(row["fold"]), float(row["fraction"]), int(row["patch"]))
    bundle = load_experiment_bundle(cfg)
    split = make_split(cfg, bundle)
    model = load_model(Path(cfg.out) / "models" / f"{unit.slug}.npz")
    test_idx = split.folds[unit.fold].test
    pred = predict(model, noisy_cube(cfg, bundle, unit.fold, row["snr_db"]), test_idx, unit.patch)
    flat_ab = bundle.abundances.reshape(-1, bundle.n_endmembers)
    return evaluate(pred, flat_ab[test_idx], dataset=bundle.name, variant=unit.variant, fold=unit.fold,
                    fraction=unit.fraction, patch=unit.patch, snr_db=row["snr_db"]).to_dict()


def _error_row(bundle, unit: Unit, snr, exc) -> dict:
    return {"dataset": bundle.name, "variant": unit.variant, "fold": unit.fold,
            "fraction": unit.fraction, "patch": unit.patch, "snr_db": snr,
            "rmse": None, "rmsaad": None, "per_endmember": [], "train_seconds": None,
            "infer_seconds": None, "error": f"{type(exc).__name__}: {exc}"}


# ----------------------------------------------------------------------------
# Output files
# ----------------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def row_sort_key(cfg: ExperimentConfig):
    def key(row):
        return (cfg.variants.index(row["variant"]), row["fold"],
                cfg.fractions.index(row["fraction"]), cfg.patch_sizes.index(row["patch"]),
                cfg.snrs.index(row["snr_db"]))
    return key


def write_results(cfg: ExperimentConfig, rows: list[dict], n_endmembers: int) -> None:
    out = Path(cfg.out)
    rows = sorted(rows, key=row_sort_key(cfg))
    columns = BASE_COLUMNS + [f"rmse_e{i}" for i in range(n_endmembers)]
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            per = list(row.get("per_endmember") or []) + [None] * n_endmembers
            writer.writerow([_fmt(row[c]) for c in BASE_COLUMNS] + [_fmt(v) for v in per[:n_endmembers]])
    with open(out / "results.json", "w", encoding="utf-8") as fh:
        json.dump({"config": cfg.to_dict(), "rows": rows}, fh, indent=1)
        fh.write("\n")


def _read_progress(path: Path) -> dict[tuple, list[dict]]:
    done: dict[tuple, list[dict]] = {}
    if not path.exists():
        return done
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                # a kill mid-write leaves a truncated last line
                continue
            done[tuple(entry["key"])] = entry["rows"]
    return done


def run_experiment(cfg: ExperimentConfig) -> tuple[list[dict], bool]:
    """Run (or resume) the whole matrix; returns (rows, all_cells_succeeded)."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = load_experiment_bundle(cfg)
    make_split(cfg, bundle)  # fail early on infeasible sizes
    progress_path = out / "progress.jsonl"
    done = _read_progress(progress_path)
    units = plan_units(cfg)
    pending = [u for u in units if tuple(u.key) not in done]
    log.info("%d units planned, %d already complete", len(units), len(units) - len(pending))
    rows: list[dict] = [r for u in units if tuple(u.key) in done for r in done[tuple(u.key)]]

    def _record(unit: Unit, unit_rows: list[dict], fh) -> None:
        rows.extend(unit_rows)
        if all("error" not in r for r in unit_rows):
            fh.write(json.dumps({"key": unit.key, "rows": unit_rows}) + "\n")
            fh.flush()

    with open(progress_path, "a", encoding="utf-8") as fh:
        if cfg.workers > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                futures = [(u, pool.submit(run_unit, cfg, u)) for u in pending]
                for unit, fut in futures:
                    _record(unit, fut.result(), fh)
        else:
            for unit in pending:
                log.info("running %s", unit.key)
                _record(unit, run_unit(cfg, unit), fh)

    write_results(cfg, rows, bundle.n_endmembers)
    ok = all("error" not in r for r in rows)
    return rows, ok


# ----------------------------------------------------------------------------
# Statistics over results.csv
# ----------------------------------------------------------------------------


class StatsError(ValueError):
    pass


def read_results(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            if raw["rmse"] == "":
                continue
            rows.append({
                "dataset": raw["dataset"], "variant": raw["variant"], "fold": int(raw["fold"]),
                "fraction": float(raw["fraction"]), "patch": int(raw["patch"]),
                "snr_db": float(raw["snr_db"]) if raw["snr_db"] else None,
                "rmse": float(raw["rmse"]), "rmsaad": float(raw["rmsaad"]),
            })
    return rows


def _groups(rows: Iterable[dict], keys: Sequence[str]) -> dict[tuple, list[dict]]:
    out: dict[tuple, list[dict]] = {}
    for r in rows:
        out.setdefault(tuple(r[k] for k in keys), []).append(r)
    return out


def _snr_sort(s):
    return -math.inf if s is None else s


def compare_to_baseline(rows: list[dict], baseline: str, metric: str = "rmse",
                        variants: Sequence[str] | None = None, alpha: float = 0.05) -> list[dict]:
    """Wilcoxon test of each variant against ``baseline`` per (dataset, patch, snr, fraction)."""
    if variants is None:
        variants = [v for v in dict.fromkeys(r["variant"] for r in rows) if v != baseline]
    out = []
    groups = _groups(rows, ("dataset", "patch", "snr_db", "fraction"))
    for (dataset, patch, snr, fraction) in sorted(groups, key=lambda k: (k[0], k[1], _snr_sort(k[2]), -k[3])):
        by_variant = _groups(groups[(dataset, patch, snr, fraction)], ("variant",))
        if (baseline,) not in by_variant:
            raise StatsError(f"baseline {baseline} missing for {dataset} fraction {fraction}")
        base = {r["fold"]: r[metric] for r in by_variant[(baseline,)]}
        for v in variants:
            if (v,) not in by_variant:
                raise StatsError(f"variant {v} missing for {dataset} fraction {fraction}")
            other = {r["fold"]: r[metric] for r in by_variant[(v,)]}
            folds = sorted(set(base) & set(other))
            if len(folds) < 2:
                raise StatsError(f"{v} vs {baseline} on {dataset} fraction {fraction}: "
                                 f"only {len(folds)} paired folds")
            res = wilcoxon_signed_rank([other[k] for k in folds], [base[k] for k in folds],
                                       alpha=alpha, names=(v, baseline))
            out.append({"dataset": dataset, "patch": patch, "snr_db": snr, "fraction": fraction,
                        "metric": metric, "variant": v, "baseline": baseline, "n": res.n,
                        "W": res.statistic, "p_value": res.p_value, "significant": res.significant,
                        "verdict": res.verdict})
    return out


def rank_table(rows: list[dict], metric: str = "rmse") -> list[dict]:
    """Mean rank of each variant over datasets, per fraction, plus the mean over fractions.

    Within a dataset a variant is scored by its metric averaged over folds.
    """
    table = []
    for (patch, snr), group in sorted(_groups(rows, ("patch", "snr_db")).items(),
                                      key=lambda kv: (kv[0][0], _snr_sort(kv[0][1]))):
        variants = list(dict.fromkeys(r["variant"] for r in group))
        fractions = sorted({r["fraction"] for r in group}, reverse=True)
        datasets = sorted({r["dataset"] for r in group})
        means = {k: float(np.mean([r[metric] for r in rs]))
                 for k, rs in _groups(group, ("variant", "dataset", "fraction")).items()}
        per_fraction = {}
        for f in fractions:
            scores = {}
            for v in variants:
                missing = [d for d in datasets if (v, d, f) not in means]
                if missing:
                    raise StatsError(f"{v} has no {metric} for fraction {f} on {missing}")
                scores[v] = [means[(v, d, f)] for d in datasets]
            per_fraction[f] = average_rank(scores)
        for v in variants:
            ranks = [per_fraction[f][v] for f in fractions]
            table.append({"metric": metric, "patch": patch, "snr_db": snr, "variant": v,
                          "ranks": dict(zip(fractions, ranks)), "mean": float(np.mean(ranks))})
    return table


def summarize_comparisons(comparisons: list[dict]) -> list[dict]:
    """Count 'statistically the same as the baseline' cells per variant and fraction."""
    summary = []
    for (metric, patch, snr, v, f), group in _groups(
            comparisons, ("metric", "patch", "snr_db", "variant", "fraction")).items():
        same = sum(1 for c in group if not c["significant"])
        summary.append({"metric": metric, "patch": patch, "snr_db": snr, "variant": v,
                        "fraction": f, "same": same, "total": len(group)})
    return summary


def write_stats(out_dir, comparisons: list[dict], ranks: list[dict], summary: list[dict]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cols = ["dataset", "patch", "snr_db", "fraction", "metric", "variant", "baseline", "n", "W",
            "p_value", "significant", "verdict"]
    with open(out_dir / "comparisons.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for c in comparisons:
            w.writerow([_fmt(c[k]) for k in cols])
    fractions = sorted({f for r in ranks for f in r["ranks"]}, reverse=True)
    with open(out_dir / "ranks.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "patch", "snr_db", "variant"] + [f"{f:g}" for f in fractions] + ["mean"])
        for r in ranks:
            w.writerow([r["metric"], r["patch"], _fmt(r["snr_db"]), r["variant"]]
                       + [_fmt(r["ranks"].get(f)) for f in fractions] + [_fmt(r["mean"])])
    with open(out_dir / "wilcoxon_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "patch", "snr_db", "variant", "fraction", "same", "total"])
        for s in summary:
            w.writerow([s["metric"], s["patch"], _fmt(s["snr_db"]), s["variant"], _fmt(s["fraction"]),
                        s["same"], s["total"]])
        for (metric, patch, snr), group in _groups(summary, ("metric", "patch", "snr_db")).items():
            w.writerow([metric, patch, _fmt(snr), "TOTAL", "", sum(s["same"] for s in group),
                        sum(s["total"] for s in group)])


# ----------------------------------------------------------------------------
# Abundance maps
# ----------------------------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> Path:
    """8-bit binary PGM of an (H, W) map clamped to [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"expected an (H, W) map, got {values.shape}")
    h, w = values.shape
    pixels = np.rint(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][:w * h] if len(parts) > 4 else b"", dtype=np.uint8).reshape(h, w)


def abundance_maps(model, bundle: D.Bundle, patch: int | None = None) -> np.ndarray:
    """Predicted (H, W, c) abundances for every pixel of ``bundle``."""
    if isinstance(model, Network):
        if model.cfg.bands != bundle.bands or model.cfg.endmembers != bundle.n_endmembers:
            raise ExperimentError(
                f"model expects {model.cfg.bands} bands / {model.cfg.endmembers} endmembers, "
                f"bundle has {bundle.bands} / {bundle.n_endmembers}")
        patch = model.cfg.p
    else:
        E = model.endmembers
        if E.shape != (bundle.n_endmembers, bundle.bands):
            raise ExperimentError(f"endmember matrix {E.shape} does not match bundle "
                                  f"({bundle.n_endmembers}, {bundle.bands})")
        patch = 1
    pred = predict(model, bundle.cube, np.arange(bundle.n_pixels), patch)
    return pred.reshape(bundle.height, bundle.width, -1)


def write_maps(out_dir, maps: np.ndarray, names: Sequence[str] | None = None, prefix="abundance") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    c = maps.shape[-1]
    names = list(names) if names else [f"e{i}" for i in range(c)]
    return [write_pgm(out_dir / f"{prefix}_{i:02d}_{names[i]}.pgm", maps[..., i]) for i in range(c)]
