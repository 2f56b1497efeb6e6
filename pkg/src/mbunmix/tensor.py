"""Minimal reverse-mode autodiff over numpy arrays.

Only the layers the multi-branch unmixing networks need are provided:
N-d convolution (1D/2D/3D), non-overlapping 1D max pooling, dense, ReLU,
reshape/transpose/flatten/concat and an MSE loss. Every op works on a
leading batch axis; the public conv/pool/dense wrappers also accept a single
unbatched sample.

Data is float32 by default. Loss values are accumulated in float64.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NumericError",
    "Tensor",
    "Parameter",
    "Tape",
    "no_grad",
    "default_dtype",
    "get_default_dtype",
    "conv1d",
    "conv2d",
    "conv3d",
    "convnd",
    "conv_cl",
    "maxpool1d",
    "dense",
    "relu",
    "reshape",
    "transpose",
    "flatten",
    "concat",
    "mse_loss",
    "backward",
    "adam_step",
    "he_uniform",
    "conv_output_length",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


class NumericError(ArithmeticError):
    """Raised when a NaN or Inf shows up where finite values are required."""


_STATE = {"grad_enabled": True, "dtype": np.dtype(np.float32)}

# im2col buffers are built per batch chunk of at most this many elements;
# cache-sized chunks are markedly faster than one large buffer.
_IM2COL_BUDGET = 1 << 18


def get_default_dtype() -> np.dtype:
    return _STATE["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors and parameters are created in."""
    previous = _STATE["dtype"]
    _STATE["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = previous


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording anything for backward."""
    previous = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = previous


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _STATE["dtype"])
        self.data = arr
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.data.dtype})"

    def backward(self) -> "Tape":
        return backward(self)

    # elementwise helpers, used for small losses in tests and tooling
    def __add__(self, other):
        return _add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, _scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        other = _as_tensor(other)
        return _mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _scale(self, -1.0)

    def sum(self) -> "Tensor":
        return _sum(self)


class Parameter(Tensor):
    """A trainable tensor carrying its gradient and ADAM moments."""

    __slots__ = ("grad", "adam_m", "adam_v", "step_count", "name")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype if dtype is not None else _STATE["dtype"]),
                         requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        # frozen parameters drop out of the graph entirely
        self.requires_grad = bool(flag)

    def zero_grad(self) -> None:
        self.grad.fill(0)

    def reset_optimizer(self) -> None:
        self.adam_m.fill(0)
        self.adam_v.fill(0)
        self.step_count = 0


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _STATE["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


# ----------------------------------------------------------------------------
# Tape and backward
# ----------------------------------------------------------------------------


class Tape:
    """Topologically ordered record of the graph reachable from a root node.

    ``nodes`` lists every node (inputs before users); backward walks it in
    reverse, visiting each node once.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def parameters(self) -> list[Parameter]:
        return [n for n in self.nodes if isinstance(n, Parameter)]


def backward(loss: Tensor) -> Tape:
    """Populate ``grad`` on every Parameter reachable from ``loss``.

    Reachable parameter gradients are overwritten (not accumulated across
    calls). Parameters outside the graph are untouched; zero them explicitly.
    """
    if not loss.requires_grad:
        raise RuntimeError("backward called on a value with no recorded forward pass")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if isinstance(node, Parameter):
            if g is None:
                node.grad.fill(0)
            else:
                node.grad[...] = g
            continue
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ----------------------------------------------------------------------------
# Elementwise and structural ops
# ----------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def _scale(a: Tensor, k: float) -> Tensor:
    return _node(a.data * a.data.dtype.type(k), (a,), lambda g: (g * k,))


def _sum(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum(dtype=np.float64)), (a,),
                 lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the gradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,),
                 lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inverse),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Flatten each batched part to (B, -1) and join them along the feature axis.

    A list of 1-D tensors is treated as a single unbatched sample.
    """
    if not parts:
        raise ShapeError("concat needs at least one part")
    if all(p.ndim == 1 for p in parts):
        joined = concat([reshape(p, (1, p.shape[0])) for p in parts])
        return reshape(joined, (joined.shape[1],))
    flat = [p if p.ndim == 2 else flatten(p) for p in parts]
    batch = flat[0].shape[0]
    if any(p.shape[0] != batch for p in flat):
        raise ShapeError("concat parts disagree on batch size")
    if len(flat) == 1:
        return flat[0]
    sizes = [p.shape[1] for p in flat]
    bounds = np.cumsum([0] + sizes)

    def _back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(flat)))

    return _node(np.concatenate([p.data for p in flat], axis=1), flat, _back)


# ----------------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------------


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: str = "valid") -> int:
    """Output extent of one convolved axis."""
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if padding == "valid":
        if kernel > length:
            raise ShapeError(f"kernel {kernel} larger than input extent {length}")
        return (length - kernel) // stride + 1
    if padding == "same":
        return -(-length // stride)
    raise ValueError(f"unknown padding {padding!r}")


def _same_pads(length: int, kernel: int, stride: int) -> tuple[int, int]:
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    # odd leftovers go to the leading side
    return total - total // 2, total // 2


def _cols(xp: np.ndarray, kernel, strides, outs) -> np.ndarray:
    """im2col for a channels-last padded batch (b, *padded, c).

    The innermost spatial axis is fused with the channel axis so each copied
    run is ``kernel[-1] * c`` contiguous values. Columns are ordered
    (k_1, ..., k_n, c).
    """
    n = len(kernel)
    b, c = xp.shape[0], xp.shape[-1]
    fused = xp.reshape(xp.shape[:n] + (xp.shape[n] * c,))
    window = tuple(kernel[:-1]) + (kernel[-1] * c,)
    win = sliding_window_view(fused, window, axis=tuple(range(1, n + 1)))
    steps = tuple(strides[:-1]) + (strides[-1] * c,)
    win = win[(slice(None),) + tuple(slice(0, s * (o - 1) + 1, s) for s, o in zip(steps, outs))]
    return win.reshape(b * math.prod(outs), -1)


def _correlate(xp: np.ndarray, w_mat: np.ndarray, kernel, strides, outs) -> np.ndarray:
    """Valid correlation of a padded channels-last batch; returns (b, *outs, c_out)."""
    batch = xp.shape[0]
    n_pos = math.prod(outs)
    chunk = max(1, _IM2COL_BUDGET // max(1, n_pos * w_mat.shape[1]))
    out = np.empty((batch,) + tuple(outs) + (w_mat.shape[0],), dtype=np.result_type(xp, w_mat))
    for start in range(0, batch, chunk):
        stop = min(batch, start + chunk)
        cols = _cols(xp[start:stop], kernel, strides, outs)
        out[start:stop] = (cols @ w_mat.T).reshape((stop - start,) + tuple(outs) + (w_mat.shape[0],))
    return out


def conv_cl(x: Tensor, weight: Tensor, bias: Tensor | None = None,
            padding: str = "valid", stride: int | Sequence[int] = 1) -> Tensor:
    """Batched N-d cross-correlation on channels-last data.

    ``x`` is (B, *spatial, C_in), ``weight`` is (C_out, C_in, *kernel) and
    ``bias`` is (C_out,). Output is (B, *out_spatial, C_out).
    """
    n = weight.ndim - 2
    if x.ndim != n + 2:
        raise ShapeError(f"expected input with {n + 2} dims (batch, {n} spatial, channels), got {x.shape}")
    batch, c_in = x.shape[0], x.shape[-1]
    c_out, w_in = weight.shape[:2]
    if w_in != c_in:
        raise ShapeError(f"kernel expects {w_in} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    kernel = tuple(weight.shape[2:])
    strides = (stride,) * n if isinstance(stride, int) else tuple(stride)
    if len(strides) != n:
        raise ShapeError(f"need {n} strides, got {strides}")
    spatial = x.shape[1:-1]
    outs = tuple(conv_output_length(L, k, s, padding) for L, k, s in zip(spatial, kernel, strides))
    if padding == "same":
        pads = [_same_pads(L, k, s) for L, k, s in zip(spatial, kernel, strides)]
    else:
        pads = [(0, 0)] * n
    _check_finite(x.data, "convolution input")

    has_pad = any(a or b for a, b in pads)
    xp = np.pad(x.data, [(0, 0)] + pads + [(0, 0)]) if has_pad else x.data
    # (c_out, k_1..k_n, c_in) to match the column order of _cols
    w_mat = np.moveaxis(weight.data, 1, -1).reshape(c_out, -1)
    out = _correlate(xp, w_mat, kernel, strides, outs)
    if bias is not None:
        out += bias.data

    def _back(g):
        dx = dw = None
        if x.requires_grad:
            # transposed correlation: dilate by the stride, pad, flip the kernel;
            # only positions inside the unpadded input are evaluated
            ext = tuple(L + k - 1 for L, k in zip(spatial, kernel))
            gd = np.zeros((batch,) + ext + (c_out,), dtype=g.dtype)
            place = tuple(slice(k - 1 - a, k - 1 - a + s * (o - 1) + 1, s)
                          for k, (a, _), s, o in zip(kernel, pads, strides, outs))
            gd[(slice(None),) + place] = g
            flipped = weight.data[(slice(None), slice(None)) + (slice(None, None, -1),) * n]
            # (c_in, k_1..k_n, c_out)
            wf = np.moveaxis(np.swapaxes(flipped, 0, 1), 1, -1).reshape(c_in, -1)
            dx = _correlate(gd, wf, kernel, (1,) * n, spatial)
        if weight.requires_grad:
            gm_all = g.reshape(-1, c_out)
            n_pos = math.prod(outs)
            chunk = max(1, _IM2COL_BUDGET // max(1, n_pos * w_mat.shape[1]))
            dw = np.zeros(w_mat.shape, dtype=np.result_type(g, xp))
            for start in range(0, batch, chunk):
                stop = min(batch, start + chunk)
                gm = gm_all[start * n_pos:stop * n_pos]
                dw += gm.T @ _cols(xp[start:stop], kernel, strides, outs)
            dw = np.moveaxis(dw.reshape((c_out,) + kernel + (c_in,)), -1, 1)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, _back)


def convnd(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "valid", stride: int | Sequence[int] = 1) -> Tensor:
    """Channels-first wrapper: (B, C_in, *spatial) -> (B, C_out, *out_spatial)."""
    n = weight.ndim - 2
    if x.ndim != n + 2:
        raise ShapeError(f"expected input with {n + 2} dims (batch, channels, {n} spatial), got {x.shape}")
    to_last = (0,) + tuple(range(2, n + 2)) + (1,)
    to_first = (0, n + 1) + tuple(range(1, n + 1))
    y = conv_cl(transpose(x, to_last), weight, bias, padding, stride)
    return transpose(y, to_first)


def _batched(x: Tensor, unbatched_ndim: int):
    if x.ndim == unbatched_ndim:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == unbatched_ndim + 1:
        return x, False
    raise ShapeError(f"expected {unbatched_ndim}-d sample or {unbatched_ndim + 1}-d batch, got {x.shape}")


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "valid", stride: int = 1) -> Tensor:
    """Cross-correlation of (C_in, L) or (B, C_in, L) with (C_out, C_in, k) kernels."""
    xb, squeezed = _batched(x, 2)
    return _unbatch(convnd(xb, weight, bias, padding, stride), squeezed)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "valid", stride: int | Sequence[int] = 1) -> Tensor:
    xb, squeezed = _batched(x, 3)
    return _unbatch(convnd(xb, weight, bias, padding, stride), squeezed)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: str = "valid", stride: int | Sequence[int] = 1) -> Tensor:
    xb, squeezed = _batched(x, 4)
    return _unbatch(convnd(xb, weight, bias, padding, stride), squeezed)


def maxpool1d(x: Tensor, window: int, axis: int = -1) -> Tensor:
    """Non-overlapping max pooling along ``axis`` (default: last, i.e. (C, L) layout).

    Trailing elements that do not fill a window are dropped. Ties route the
    gradient to the first maximal position.
    """
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if x.ndim < 1:
        raise ShapeError("maxpool1d needs at least one axis")
    axis = axis % x.ndim
    length = x.shape[axis]
    if window > length:
        raise ShapeError(f"pool window {window} larger than input length {length}")
    n_out = length // window
    kept = x.data[(slice(None),) * axis + (slice(0, n_out * window),)]
    blocks = kept.reshape(x.shape[:axis] + (n_out, window) + x.shape[axis + 1:])
    idx = np.expand_dims(blocks.argmax(axis=axis + 1), axis + 1)
    out = np.take_along_axis(blocks, idx, axis=axis + 1).squeeze(axis + 1)

    def _back(g):
        dx = np.zeros_like(x.data)
        view = dx[(slice(None),) * axis + (slice(0, n_out * window),)].reshape(blocks.shape)
        np.put_along_axis(view, idx, np.expand_dims(g, axis + 1), axis=axis + 1)
        if not np.shares_memory(view, dx):
            dx[(slice(None),) * axis + (slice(0, n_out * window),)] = view.reshape(kept.shape)
        return (dx,)

    return _node(out, (x,), _back)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ W.T + b`` for x of shape (n,) or (B, n) and W of shape (m, n)."""
    xb, squeezed = _batched(x, 1)
    if weight.ndim != 2 or weight.shape[1] != xb.shape[1]:
        raise ShapeError(f"dense weight {weight.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense bias {bias.shape} incompatible with weight {weight.shape}")
    out = xb.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _back(g):
        grads = [g @ weight.data if xb.requires_grad else None,
                 g.T @ xb.data if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (xb, weight) if bias is None else (xb, weight, bias)
    return _unbatch(_node(out, parents, _back), squeezed)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every entry, accumulated in float64."""
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target_arr.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target_arr.shape}")
    diff = pred.data.astype(np.float64) - target_arr.astype(np.float64)
    count = diff.size
    value = np.asarray(np.mean(diff * diff))

    def _back(g):
        return ((2.0 * float(g) / count * diff).astype(pred.data.dtype),)

    return _node(value, (pred,), _back)


# ----------------------------------------------------------------------------
# Optimisation and initialisation
# ----------------------------------------------------------------------------


def adam_step(params: Iterable[Parameter], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected ADAM update of every trainable parameter."""
    params = [p for p in params if p.trainable]
    for p in params:
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient in parameter {p.name or p.shape}")
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - beta1 ** t)
        v_hat = p.adam_v / (1.0 - beta2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype, copy=False)


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape)).astype(_STATE["dtype"])
