"""Scene bundles, patches, Monte Carlo splits, synthetic scenes and noise.

A bundle on disk is a directory holding::

    metadata.json     {"name", "height", "width", "bands", "endmembers", ["endmember_names"]}
    cube.f32          H*W*bands little-endian float32, row-major (row, col, band)
    abundances.f32    H*W*endmembers little-endian float32, row-major (row, col, endmember)

Cubes are plain ``(H, W, bands)`` arrays and abundance maps ``(H, W, c)``
arrays; :class:`Bundle` keeps them together with the scene name.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

log = logging.getLogger(__name__)

SUPPORTED_FRACTIONS = (0.01, 0.06, 0.13, 0.33, 0.66, 1.0)

_F32 = np.dtype("<f4")


class BundleError(ValueError):
    """A bundle directory that is missing files or internally inconsistent."""


@dataclass
class Bundle:
    name: str
    cube: np.ndarray
    abundances: np.ndarray
    endmember_names: list[str] | None = None
    endmembers: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.cube.shape[0]

    @property
    def width(self) -> int:
        return self.cube.shape[1]

    @property
    def bands(self) -> int:
        return self.cube.shape[2]

    @property
    def n_endmembers(self) -> int:
        return self.abundances.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


def save_bundle(path, bundle: Bundle) -> Path:
    path = Path(path)
    cube = np.asarray(bundle.cube)
    ab = np.asarray(bundle.abundances)
    if cube.ndim != 3 or ab.ndim != 3 or cube.shape[:2] != ab.shape[:2]:
        raise BundleError(f"cube {cube.shape} and abundances {ab.shape} disagree")
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "name": bundle.name,
        "height": int(cube.shape[0]),
        "width": int(cube.shape[1]),
        "bands": int(cube.shape[2]),
        "endmembers": int(ab.shape[2]),
    }
    if bundle.endmember_names:
        meta["endmember_names"] = list(bundle.endmember_names)
    (path / "metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    cube.astype(_F32).tofile(path / "cube.f32")
    ab.astype(_F32).tofile(path / "abundances.f32")
    if bundle.endmembers is not None:
        np.asarray(bundle.endmembers).astype(_F32).tofile(path / "endmembers.f32")
    return path


def _read_payload(path: Path, count: int, what: str) -> np.ndarray:
    if not path.exists():
        raise BundleError(f"missing {path.name} in bundle {path.parent}")
    size = path.stat().st_size
    if size != count * 4:
        raise BundleError(f"{path.name}: expected {count * 4} bytes for {what}, found {size}")
    arr = np.fromfile(path, dtype=_F32)
    if not np.isfinite(arr).all():
        raise BundleError(f"{path.name} contains non-finite values")
    return arr.astype(np.float32)


def load_bundle(path) -> Bundle:
    path = Path(path)
    meta_path = path / "metadata.json"
    if not meta_path.exists():
        raise BundleError(f"missing metadata.json in {path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    try:
        h, w, bands, c = (int(meta[k]) for k in ("height", "width", "bands", "endmembers"))
    except KeyError as exc:
        raise BundleError(f"metadata.json lacks field {exc}") from None
    if min(h, w, bands, c) < 1:
        raise BundleError(f"non-positive extent in metadata: {meta}")
    cube = _read_payload(path / "cube.f32", h * w * bands, f"{h}x{w}x{bands} cube").reshape(h, w, bands)
    ab = _read_payload(path / "abundances.f32", h * w * c, f"{h}x{w}x{c} abundances").reshape(h, w, c)
    names = meta.get("endmember_names")
    if names is not None and len(names) != c:
        raise BundleError(f"{len(names)} endmember names for {c} endmembers")
    endmembers = None
    if (path / "endmembers.f32").exists():
        endmembers = _read_payload(path / "endmembers.f32", c * bands, "endmember spectra").reshape(c, bands)
    sums = ab.sum(axis=-1, dtype=np.float64)
    off = np.abs(sums - 1.0) > 1e-3
    if off.any() or (ab < 0).any() or (ab > 1).any():
        log.warning("bundle %s: %d pixels violate the abundance simplex", path, int(off.sum()))
    return Bundle(str(meta.get("name", path.name)), cube, ab, names, endmembers)


# ----------------------------------------------------------------------------
# Patches
# ----------------------------------------------------------------------------


def extract_patch(cube: np.ndarray, row: int, col: int, p: int) -> np.ndarray:
    """p x p x bands window centred on (row, col); borders replicate the edge pixels."""
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be odd, got {p}")
    h, w = cube.shape[:2]
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside {h}x{w} image")
    r = p // 2
    rows = np.clip(np.arange(row - r, row + r + 1), 0, h - 1)
    cols = np.clip(np.arange(col - r, col + r + 1), 0, w - 1)
    return cube[np.ix_(rows, cols)]


def extract_patches(cube: np.ndarray, indices: Sequence[int], p: int) -> np.ndarray:
    """Patches for flat pixel indices (row-major), shape (N, p, p, bands)."""
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be odd, got {p}")
    indices = np.asarray(indices, dtype=np.int64)
    h, w, _ = cube.shape
    r = p // 2
    padded = np.pad(cube, ((r, r), (r, r), (0, 0)), mode="edge")
    windows = sliding_window_view(padded, (p, p), axis=(0, 1))  # (h, w, bands, p, p)
    rows, cols = np.divmod(indices, w)
    return np.ascontiguousarray(windows[rows, cols].transpose(0, 2, 3, 1))


# ----------------------------------------------------------------------------
# Monte Carlo cross-validation
# ----------------------------------------------------------------------------


@dataclass
class Fold:
    test: np.ndarray
    pool: np.ndarray


@dataclass
class SplitSpec:
    n_pixels: int
    test_size: int
    seed: int
    folds: list[Fold] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.folds)


def fold_seed(seed: int, fold: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, fold])


def monte_carlo_split(n_pixels: int, test_size: int, folds: int = 30, seed: int = 0,
                      pool_size: int | None = None) -> SplitSpec:
    """Draw ``folds`` independent uniform test sets of ``test_size`` pixels.

    The pixels left over form each fold's training pool (optionally capped at
    ``pool_size`` by uniform sampling). Test sets do not depend on any later
    choice of training fraction.
    """
    if folds < 1:
        raise ValueError("need at least one fold")
    if test_size < 1 or test_size >= n_pixels:
        raise ValueError(f"test size {test_size} infeasible for {n_pixels} pixels")
    remaining = n_pixels - test_size
    if pool_size is None:
        pool_size = remaining
    if pool_size < 1 or pool_size > remaining:
        raise ValueError(f"training pool {pool_size} infeasible: only {remaining} pixels left after the test set")
    spec = SplitSpec(n_pixels=n_pixels, test_size=test_size, seed=seed)
    for k in range(folds):
        rng = np.random.default_rng(fold_seed(seed, k))
        perm = rng.permutation(n_pixels)
        spec.folds.append(Fold(test=np.sort(perm[:test_size]),
                               pool=np.sort(perm[test_size:test_size + pool_size])))
    return spec


def training_size(pool: int, fraction: float) -> int:
    return int(math.floor(fraction * pool + 0.5))


def subsample_training(split: SplitSpec, fold: int, fraction: float, seed: int = 0) -> np.ndarray:
    """Training pixels for ``fraction`` of a fold's pool.

    One seeded permutation of the pool is drawn per (seed, fold) and the
    subset is its prefix, so smaller fractions are always contained in
    larger ones.
    """
    if not any(math.isclose(fraction, f) for f in SUPPORTED_FRACTIONS):
        raise ValueError(f"training fraction {fraction} not in {SUPPORTED_FRACTIONS}")
    pool = split.folds[fold].pool
    n = training_size(len(pool), fraction)
    if n < 1:
        raise ValueError(f"fraction {fraction} of a {len(pool)}-pixel pool is empty")
    rng = np.random.default_rng(np.random.SeedSequence([seed, fold, 0x5EED]))
    order = rng.permutation(len(pool))
    return np.sort(pool[order[:n]])


# ----------------------------------------------------------------------------
# Noise and synthetic scenes
# ----------------------------------------------------------------------------


def noise_variance(cube: np.ndarray, snr_db: float) -> float:
    power = float(np.mean(np.square(cube, dtype=np.float64)))
    if power == 0.0:
        raise ValueError("SNR is undefined for an all-zero cube")
    return power / 10.0 ** (snr_db / 10.0)


def add_awgn(cube: np.ndarray, snr_db: float, seed=0) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` relative to the mean squared value of the cube."""
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise ValueError(f"invalid SNR {snr_db}")
    sigma2 = noise_variance(cube, snr_db)
    if snr_db == math.inf:
        return np.array(cube, copy=True)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(cube.shape) * math.sqrt(sigma2)
    return (cube + noise).astype(cube.dtype)


@dataclass
class SynthConfig:
    height: int = 48
    width: int = 48
    bands: int = 50
    endmembers: int = 3
    bumps: int = 4
    # bump width as a fraction of the band count; larger is smoother
    smoothness: float = 0.08
    concentration: float = 1.0
    # block size of independent Dirichlet draws; the Gaussian smoothing sigma is half of it
    smoothing_radius: float = 4.0
    snr_db: float | None = None
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        if min(self.height, self.width, self.bands, self.endmembers) < 1:
            raise ValueError("synthetic scene extents must be positive")
        if self.endmembers > self.bands:
            raise ValueError(f"{self.endmembers} endmembers cannot be resolved with {self.bands} bands")
        if self.concentration <= 0:
            raise ValueError("Dirichlet concentration must be positive")


def synth_endmembers(rng: np.random.Generator, c: int, bands: int, bumps: int = 4,
                     smoothness: float = 0.08) -> np.ndarray:
    """Smooth spectra in [0, 1] built from sums of Gaussian bumps, shape (c, bands)."""
    grid = np.linspace(0.0, 1.0, bands)
    spectra = np.empty((c, bands))
    for i in range(c):
        centers = rng.uniform(0.0, 1.0, bumps)
        widths = smoothness * rng.uniform(0.5, 1.5, bumps)
        heights = rng.uniform(0.2, 1.0, bumps)
        s = 0.05 + (heights[:, None] * np.exp(-0.5 * ((grid[None] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
        spectra[i] = s / s.max() * rng.uniform(0.6, 1.0)
    return spectra


def synth_generate(cfg: SynthConfig):
    """Linear-mixture scene: returns (cube, abundances, endmembers).

    Abundances are Dirichlet draws (one per block of ``smoothing_radius``
    pixels) smoothed spatially and renormalised, so every pixel sits on the
    simplex; the cube is ``abundances @ endmembers``
    plus optional white noise.
    """
    rng = np.random.default_rng(cfg.seed)
    E = synth_endmembers(rng, cfg.endmembers, cfg.bands, cfg.bumps, cfg.smoothness)
    alpha = np.full(cfg.endmembers, cfg.concentration)
    r = cfg.smoothing_radius
    if r > 0:
        # one Dirichlet draw per r x r block, then Gaussian smoothing across blocks
        block = max(1, int(round(r)))
        gh, gw = -(-cfg.height // block), -(-cfg.width // block)
        coarse = rng.dirichlet(alpha, size=(gh, gw))
        A = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:cfg.height, :cfg.width]
        A = ndimage.gaussian_filter(A, sigma=(r / 2, r / 2, 0), mode="reflect")
        A = np.clip(A, 0.0, None)
        A /= A.sum(axis=-1, keepdims=True)
    else:
        A = rng.dirichlet(alpha, size=(cfg.height, cfg.width))
    A = A.astype(np.float32)
    E = E.astype(np.float32)
    cube = (A.astype(np.float64) @ E.astype(np.float64)).astype(np.float32)
    if cfg.snr_db is not None:
        cube = add_awgn(cube, cfg.snr_db, seed=np.random.SeedSequence([cfg.seed, 0xAC]))
    return cube, A, E


def synth_bundle(cfg: SynthConfig) -> Bundle:
    cube, A, E = synth_generate(cfg)
    names = [f"em{i}" for i in range(cfg.endmembers)]
    return Bundle(cfg.name, cube, A, names, E)
