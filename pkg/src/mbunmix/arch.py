"""Multi-branch CNN builders for abundance regression.

A network maps a batch of patches (B, p, p, bands) to (B, endmembers)
abundance estimates. Up to three feature branches run in parallel on the
same patch:

* ``1D``: the p*p pixels become input channels of a spectral 1D conv stack
  (kernels 9, 7, 5, each followed by ReLU and max pooling by 2; both are
  clipped to the remaining length on short spectra).
* ``2D``: bands become input channels of five stacked 2x2 spatial convs.
* ``3D``: one-channel volume through three blocks of 2x2x9 / 2x2x5 convs,
  optionally followed by strided reduction convs (MB-DR) and a skip
  connection carrying the raw patch (MB-Res).

Branch outputs are flattened, concatenated and fed to a dense regression head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor, conv_output_length

BRANCHES = ("1D", "2D", "3D")
VARIANTS = ("MB", "MB-DR", "MB-Res")

SPECTRAL_KERNELS_1D = (9, 7, 5)
POOL_WINDOW = 2
SPATIAL_KERNEL_2D = (2, 2)
KERNELS_3D = ((2, 2, 9), (2, 2, 5))


class ConfigError(ShapeError):
    """An architecture configuration that cannot be realised."""


@dataclass(frozen=True)
class MBConfig:
    p: int = 3
    bands: int = 162
    endmembers: int = 3
    branches: tuple[str, ...] = BRANCHES
    variant: str = "MB"
    filters_1d: tuple[int, int, int] = (16, 32, 32)
    filters_2d: tuple[int, ...] = (16, 16, 16, 16, 22)
    filters_3d: tuple[int, ...] = (32, 32, 32, 32, 32, 32)
    reduction_filters: tuple[int, int] = (8, 8)
    reduction_stride: int = 4
    head_units: tuple[int, ...] = (512, 64)

    def __post_init__(self):
        # normalise list inputs (e.g. from JSON) to tuples
        for name in ("branches", "filters_1d", "filters_2d", "filters_3d",
                     "reduction_filters", "head_units"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        branches = tuple(b for b in BRANCHES if b in self.branches)
        if not branches or len(branches) != len(set(self.branches)):
            raise ConfigError(f"branches must be a non-empty subset of {BRANCHES}, got {self.branches}")
        object.__setattr__(self, "branches", branches)
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.p < 1 or self.p % 2 == 0:
            raise ConfigError(f"patch size must be a positive odd integer, got {self.p}")
        if self.endmembers < 1:
            raise ConfigError("at least one endmember is required")
        if self.bands < 1:
            raise ConfigError("at least one band is required")
        if ("1D" in branches or "3D" in branches) and self.bands < max(SPECTRAL_KERNELS_1D):
            raise ConfigError(f"{self.bands} bands is fewer than the largest spectral kernel (9)")
        if self.reduction_stride < 1:
            raise ConfigError("reduction_stride must be >= 1")
        if self.variant != "MB" and "3D" not in branches:
            raise ConfigError(f"{self.variant} modifies the 3D branch, which is not enabled")
        if len(self.filters_1d) != 3 or len(self.filters_3d) != 6 or len(self.reduction_filters) != 2:
            raise ConfigError("filters_1d needs 3 counts, filters_3d 6, reduction_filters 2")
        if not self.filters_2d:
            raise ConfigError("filters_2d needs at least one layer")

    @property
    def reduced(self) -> bool:
        return self.variant in ("MB-DR", "MB-Res")

    @property
    def residual(self) -> bool:
        return self.variant == "MB-Res"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MBConfig":
        return cls(**d)


# ----------------------------------------------------------------------------
# Shape arithmetic (no weights)
# ----------------------------------------------------------------------------


def _plan_1d(cfg: MBConfig) -> tuple[list[tuple[int, int]], int]:
    """(kernel, pool window) per 1D stage and the final spectral length.

    Kernels and windows longer than the remaining extent are clipped to it,
    so short spectra still yield at least one feature per filter.
    """
    length, stages = cfg.bands, []
    for k in SPECTRAL_KERNELS_1D:
        k = min(k, length)
        length = conv_output_length(length, k)
        window = min(POOL_WINDOW, length)
        length //= window
        stages.append((k, window))
    return stages, length


def _dims_1d(cfg: MBConfig) -> int:
    return _plan_1d(cfg)[1] * cfg.filters_1d[-1]


def _dims_2d(cfg: MBConfig) -> int:
    return cfg.p * cfg.p * cfg.filters_2d[-1]


def _plan_reduction(cfg: MBConfig) -> tuple[list[tuple[int, int, int]], tuple[int, int, int]]:
    """Clipped kernels of the strided reduction convs and the extent they leave."""
    extent = (cfg.p, cfg.p, cfg.bands)
    strides = (1, 1, cfg.reduction_stride)
    kernels = []
    for kernel in KERNELS_3D:
        kernel = tuple(min(k, L) for k, L in zip(kernel, extent))
        extent = tuple(conv_output_length(L, k, s) for L, k, s in zip(extent, kernel, strides))
        kernels.append(kernel)
    return kernels, extent


def _dims_3d(cfg: MBConfig) -> int:
    if not cfg.reduced:
        return cfg.p * cfg.p * cfg.bands * cfg.filters_3d[-1]
    d1, d2, d3 = _plan_reduction(cfg)[1]
    reduced = d1 * d2 * d3 * cfg.reduction_filters[-1]
    if cfg.residual:
        reduced += cfg.p * cfg.p * cfg.bands
    return reduced


def feature_dims(cfg: MBConfig) -> tuple[int, int, int]:
    """Feature counts produced by the 1D, 2D and 3D branches (0 when disabled)."""
    return (
        _dims_1d(cfg) if "1D" in cfg.branches else 0,
        _dims_2d(cfg) if "2D" in cfg.branches else 0,
        _dims_3d(cfg) if "3D" in cfg.branches else 0,
    )


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------


class Conv:
    def __init__(self, rng, c_in, c_out, kernel, padding="valid", stride=1, name="conv"):
        kernel = tuple(kernel)
        fan_in = c_in * int(np.prod(kernel))
        self.weight = Parameter(T.he_uniform(rng, (c_out, c_in) + kernel, fan_in), name=f"{name}.w")
        self.bias = Parameter(np.zeros(c_out), name=f"{name}.b")
        self.padding = padding
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_cl(x, self.weight, self.bias, self.padding, self.stride)

    def parameters(self):
        return [self.weight, self.bias]


class Dense:
    def __init__(self, rng, n_in, n_out, name="dense"):
        self.weight = Parameter(T.he_uniform(rng, (n_out, n_in), n_in), name=f"{name}.w")
        self.bias = Parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ReLU:
    def __call__(self, x):
        return T.relu(x)

    def parameters(self):
        return []


class MaxPool1d:
    def __init__(self, window, axis=1):
        self.window = window
        self.axis = axis

    def __call__(self, x):
        return T.maxpool1d(x, self.window, axis=self.axis)

    def parameters(self):
        return []


class Sequential:
    def __init__(self, layers: Sequence):
        self.layers = list(layers)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def regression_head(rng, n_in: int, units: Sequence[int], n_out: int, name="head") -> Sequential:
    layers = []
    for i, n in enumerate(units):
        layers += [Dense(rng, n_in, n, name=f"{name}.{i}"), ReLU()]
        n_in = n
    layers.append(Dense(rng, n_in, n_out, name=f"{name}.out"))
    return Sequential(layers)


# ----------------------------------------------------------------------------
# Branches
# ----------------------------------------------------------------------------


class Branch:
    """A feature extractor from a (B, p, p, bands) patch batch to (B, out_dim)."""

    kind = ""

    def __init__(self, cfg: MBConfig, out_dim: int):
        self.cfg = cfg
        self.out_dim = out_dim

    def __call__(self, patches: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Parameter]:
        raise NotImplementedError


class SpectralBranch(Branch):
    kind = "1D"

    def __init__(self, cfg, rng):
        super().__init__(cfg, _dims_1d(cfg))
        layers, c_in = [], cfg.p * cfg.p
        stages, _ = _plan_1d(cfg)
        for i, ((k, window), c_out) in enumerate(zip(stages, cfg.filters_1d)):
            layers += [Conv(rng, c_in, c_out, (k,), name=f"1d.{i}"), ReLU(), MaxPool1d(window)]
            c_in = c_out
        self.body = Sequential(layers)

    def __call__(self, patches):
        b, p, _, bands = patches.shape
        # pixels become channels: (B, p*p, bands), held channels-last as (B, bands, p*p)
        x = T.transpose(T.reshape(patches, (b, p * p, bands)), (0, 2, 1))
        return T.flatten(self.body(x))

    def parameters(self):
        return self.body.parameters()


class SpatialBranch(Branch):
    kind = "2D"

    def __init__(self, cfg, rng):
        super().__init__(cfg, _dims_2d(cfg))
        layers, c_in = [], cfg.bands
        for i, c_out in enumerate(cfg.filters_2d):
            layers += [Conv(rng, c_in, c_out, SPATIAL_KERNEL_2D, padding="same", name=f"2d.{i}"), ReLU()]
            c_in = c_out
        self.body = Sequential(layers)

    def __call__(self, patches):
        # bands are the input channels of the spatial convs
        return T.flatten(self.body(patches))

    def parameters(self):
        return self.body.parameters()


class SpectralSpatialBranch(Branch):
    kind = "3D"

    def __init__(self, cfg, rng):
        super().__init__(cfg, _dims_3d(cfg))
        layers, c_in = [], 1
        for i, c_out in enumerate(cfg.filters_3d):
            kernel = KERNELS_3D[i % 2]
            layers += [Conv(rng, c_in, c_out, kernel, padding="same", name=f"3d.{i}"), ReLU()]
            c_in = c_out
        self.body = Sequential(layers)
        self.reduction = None
        if cfg.reduced:
            kernels, _ = _plan_reduction(cfg)
            red, stride = [], (1, 1, cfg.reduction_stride)
            for i, (kernel, c_out) in enumerate(zip(kernels, cfg.reduction_filters)):
                red += [Conv(rng, c_in, c_out, kernel, padding="valid", stride=stride, name=f"3d.red{i}"),
                        ReLU()]
                c_in = c_out
            self.reduction = Sequential(red)

    def __call__(self, patches):
        b, p, _, bands = patches.shape
        x = T.reshape(patches, (b, p, p, bands, 1))
        y = self.body(x)
        if self.reduction is not None:
            y = self.reduction(y)
        features = T.flatten(y)
        if self.cfg.residual:
            return T.concat([T.flatten(patches), features])
        return features

    def parameters(self):
        params = self.body.parameters()
        if self.reduction is not None:
            params += self.reduction.parameters()
        return params


def build_1d_branch(cfg: MBConfig, rng=None) -> SpectralBranch:
    if "1D" not in cfg.branches:
        raise ConfigError("1D branch not enabled in config")
    return SpectralBranch(cfg, np.random.default_rng(rng))


def build_2d_branch(cfg: MBConfig, rng=None) -> SpatialBranch:
    if "2D" not in cfg.branches:
        raise ConfigError("2D branch not enabled in config")
    return SpatialBranch(cfg, np.random.default_rng(rng))


def build_3d_branch(cfg: MBConfig, rng=None) -> SpectralSpatialBranch:
    """3D branch for ``cfg.variant``.

    MB-DR appends the strided reduction convs; MB-Res additionally prepends
    the flattened raw patch to the reduced features.
    """
    if "3D" not in cfg.branches:
        raise ConfigError("3D branch not enabled in config")
    return SpectralSpatialBranch(cfg, np.random.default_rng(rng))


def apply_dimensionality_reduction(cfg: MBConfig) -> MBConfig:
    """Config for the same network with the 3D-branch reduction layers switched on."""
    return replace(cfg, variant="MB-DR" if cfg.variant == "MB" else cfg.variant)


def apply_residual(cfg: MBConfig) -> MBConfig:
    """Config for the same network with reduction plus the raw-patch skip connection."""
    return replace(cfg, variant="MB-Res")


_BUILDERS = {"1D": SpectralBranch, "2D": SpatialBranch, "3D": SpectralSpatialBranch}


# ----------------------------------------------------------------------------
# Network
# ----------------------------------------------------------------------------


class Network:
    """Parallel branches, concatenated, then a dense head."""

    def __init__(self, cfg: MBConfig, branches: Sequence[Branch], head: Sequential):
        self.cfg = cfg
        self.branches = list(branches)
        self.head = head

    def features(self, patches) -> list[Tensor]:
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        if x.ndim != 4 or x.shape[1:] != (self.cfg.p, self.cfg.p, self.cfg.bands):
            raise ShapeError(
                f"expected patches (B, {self.cfg.p}, {self.cfg.p}, {self.cfg.bands}), got {x.shape}")
        return [branch(x) for branch in self.branches]

    def __call__(self, patches) -> Tensor:
        return self.head(T.concat(self.features(patches)))

    forward = __call__

    def predict(self, patches: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Inference in batches without recording a tape."""
        outs = []
        with T.no_grad():
            for start in range(0, len(patches), batch_size):
                outs.append(self(patches[start:start + batch_size]).data)
        if not outs:
            return np.zeros((0, self.cfg.endmembers), dtype=T.get_default_dtype())
        return np.concatenate(outs, axis=0)

    def parameters(self) -> list[Parameter]:
        params = [p for b in self.branches for p in b.parameters()]
        return params + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays: Sequence[np.ndarray]) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"state has {len(arrays)} arrays, network has {len(params)} parameters")
        for p, a in zip(params, arrays):
            if p.data.shape != np.shape(a):
                raise ShapeError(f"parameter {p.name}: shape {p.data.shape} vs stored {np.shape(a)}")
            p.data[...] = a

    def save(self, path) -> None:
        arrays = {f"p{i:04d}": a for i, a in enumerate(self.state())}
        np.savez(path, config=np.array(json.dumps(self.cfg.to_dict())), **arrays)

    @classmethod
    def load(cls, path) -> "Network":
        with np.load(path) as z:
            cfg = MBConfig.from_dict(json.loads(str(z["config"])))
            net = build_model(cfg, seed=0)
            keys = sorted(k for k in z.files if k.startswith("p"))
            net.load_state([z[k] for k in keys])
        return net


def build_model(cfg: MBConfig, seed=0) -> Network:
    """Realise ``cfg`` with He-uniform weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    branches = [_BUILDERS[name](cfg, rng) for name in cfg.branches]
    n_in = sum(b.out_dim for b in branches)
    head = regression_head(rng, n_in, cfg.head_units, cfg.endmembers)
    return Network(cfg, branches, head)
