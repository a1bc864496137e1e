"""Dense tensors with reverse-mode automatic differentiation.

The engine is a flat tape: every differentiable op appends one entry
(output, backward closure) while grad recording is enabled.  backward()
replays the tape in reverse, which is a valid topological order because
entries are appended in execution order.  Tensors are numpy-backed and
value-semantic; there is no broadcasting except channel-wise scale/bias,
so shape mismatches fail loudly at the op that caused them.

Two precision modes exist: float64 for gradient checks and oracle suites,
float32 for training runs.  The mode is a process-global setting.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "set_precision",
    "get_precision",
    "precision",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "sgd_momentum_step",
    "SGD",
]


class ShapeError(ValueError):
    """Input shapes do not conform to an op's contract."""


_DTYPES = {"f32": np.float32, "f64": np.float64}

_precision = "f64"
_grad_enabled = True
_nan_checks = True
_tape: list[tuple["Tensor", Callable[[np.ndarray], None]]] = []


def set_precision(mode: str) -> None:
    """Select the process-global value dtype: 'f32' or 'f64'.

    Existing tensors keep their dtype; only newly created ones are affected.
    """
    global _precision
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision mode {mode!r}, expected 'f32' or 'f64'")
    _precision = mode


def get_precision() -> str:
    return _precision


def active_dtype() -> np.dtype:
    return np.dtype(_DTYPES[_precision])


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the global precision mode."""
    prev = _precision
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracle passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def set_nan_checks(enabled: bool) -> None:
    global _nan_checks
    _nan_checks = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _nan_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense n-dimensional value array, optionally on the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=active_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Put `out` on the tape if recording is active and any input needs grad.

    `backward_fn` receives d(loss)/d(out) and must accumulate into the
    inputs via `accumulate_grad`.  Exposed so that ops living outside this
    module (e.g. ROI pooling) can participate in the same tape.
    """
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tape.append((out, backward_fn))
    return out


# Alias for ops defined in other modules.
accumulate_grad = _accumulate


def backward(loss: Tensor) -> None:
    """Reverse-sweep the tape from a scalar loss; the tape is consumed."""
    if loss.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    global _tape
    tape, _tape = _tape, []
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for out, fn in reversed(tape):
        if out.grad is None:
            continue  # not an ancestor of the loss
        fn(out.grad)


def tape_size() -> int:
    return len(_tape)


def clear_tape() -> None:
    _tape.clear()


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    _check_finite(out.data, "add")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    _check_finite(out.data, "sub")

    def bwd(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    _check_finite(out.data, "mul")

    def bwd(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return record(out, (a, b), bwd)


def square(x: Tensor) -> Tensor:
    out = Tensor(x.data * x.data)
    _check_finite(out.data, "square")

    def bwd(g):
        _accumulate(x, g * 2.0 * x.data)

    return record(out, (x,), bwd)


def mul_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    _check_finite(out.data, "mul_scalar")

    def bwd(g):
        _accumulate(x, g * c)

    return record(out, (x,), bwd)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + c)
    _check_finite(out.data, "add_scalar")

    def bwd(g):
        _accumulate(x, g)

    return record(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log: non-positive input")
    out = Tensor(np.log(x.data))
    _check_finite(out.data, "log")

    def bwd(g):
        _accumulate(x, g / x.data)

    return record(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def bwd(g):
        _accumulate(x, g * (x.data > 0.0))

    return record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    # Numerically symmetric form; stable for large |x|.
    y = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-x.data)),
                 np.exp(x.data) / (1.0 + np.exp(x.data)))
    out = Tensor(y)
    _check_finite(out.data, "sigmoid")

    def bwd(g):
        _accumulate(x, g * out.data * (1.0 - out.data))

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g):
        _accumulate(x, np.full(x.shape, g, dtype=x.data.dtype))

    return record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())

    def bwd(g):
        _accumulate(x, np.full(x.shape, g / n, dtype=x.data.dtype))

    return record(out, (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g):
        _accumulate(x, g.reshape(x.shape))

    return record(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inv = np.argsort(axes)

    def bwd(g):
        _accumulate(x, np.transpose(g, inv))

    return record(out, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return record(out, tuple(tensors), bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Select rows along axis 0; used to pull sampled anchors/proposals."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        np.add.at(gx, idx, g)
        _accumulate(x, gx)

    return record(out, (x,), bwd)


def gather_pairs(x: Tensor, rows, cols) -> Tensor:
    """x[rows[i], cols[i]] for a 2-D tensor; returns a 1-D tensor."""
    if x.ndim != 2:
        raise ShapeError(f"gather_pairs: expected 2-D input, got {x.shape}")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = Tensor(x.data[r, c])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        np.add.at(gx, (r, c), g)
        _accumulate(x, gx)

    return record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")

    def bwd(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fully-connected layer: x (N,Din) @ w (Dout,Din)^T + b (Dout)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        y = y + b.data
    out = Tensor(y)
    _check_finite(out.data, "linear")

    def bwd(g):
        _accumulate(x, g @ w.data)
        _accumulate(w, g.T @ x.data)
        if b is not None:
            _accumulate(b, g.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    _check_finite(out.data, "softmax")

    def bwd(g):
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - dot) * out.data)

    return record(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    _check_finite(out.data, "log_softmax")

    def bwd(g):
        _accumulate(x, g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return record(out, (x,), bwd)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer `targets` under row softmax."""
    t = np.asarray(targets, dtype=np.intp)
    if logits.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    lsm = log_softmax(logits, axis=-1)
    picked = gather_pairs(lsm, np.arange(t.shape[0]), t)
    return mul_scalar(mean_all(picked), -1.0)


# ---------------------------------------------------------------------------
# convolution / pooling / normalization
# ---------------------------------------------------------------------------


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, h, w = xp.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW layout.

    x: (N, C, H, W); w: (F, C, KH, KW); b: (F,) or None.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    win = _conv_windows(xp, kh, kw, stride)
    y = np.einsum("fckl,ncklhw->nfhw", w.data, win, optimize=True)
    if b is not None:
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match weight {w.shape}")
        y = y + b.data[None, :, None, None]
    out = Tensor(y)
    _check_finite(out.data, "conv2d")
    oh, ow = y.shape[2], y.shape[3]

    def bwd(g):
        _accumulate(w, np.einsum("nfhw,ncklhw->fckl", g, win, optimize=True))
        if b is not None:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = np.einsum("nfhw,fc->nchw", g, w.data[:, :, i, j],
                                      optimize=True)
                    gxp[:, :, i:i + stride * oh:stride,
                        j:j + stride * ow:stride] += patch
            if padding:
                gxp = gxp[:, :, padding:padding + h, padding:padding + wd]
            _accumulate(x, gxp)

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bwd)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling, NCHW; gradient routes to the first argmax per window."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected 4-D input, got {x.shape}")
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ShapeError(f"max_pool2d: kernel {kernel} larger than input {x.shape}")
    win = _conv_windows(x.data, kernel, kernel, stride)  # (n,c,k,k,oh,ow)
    oh, ow = win.shape[4], win.shape[5]
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0])

    def bwd(g):
        gx = np.zeros(x.shape, dtype=x.data.dtype)
        ki, kj = np.unravel_index(arg, (kernel, kernel))
        ni, ci, oi, oj = np.indices(arg.shape, sparse=False)
        np.add.at(gx, (ni, ci, oi * stride + ki, oj * stride + kj), g)
        _accumulate(x, gx)

    return record(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C), the squeeze of squeeze-and-excitation."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3)))

    def bwd(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy())

    return record(out, (x,), bwd)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every (H, W) plane of channel c by s[c] (the excite step)."""
    if x.ndim != 4 or s.ndim != 1 or s.shape[0] != x.shape[1]:
        raise ShapeError(f"scale_channels: input {x.shape} does not match scale {s.shape}")
    out = Tensor(x.data * s.data[None, :, None, None])
    _check_finite(out.data, "scale_channels")

    def bwd(g):
        _accumulate(x, g * s.data[None, :, None, None])
        _accumulate(s, (g * x.data).sum(axis=(0, 2, 3)))

    return record(out, (x, s), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over all axes except the channel axis 1.

    Works for (N, C, H, W) and (N, C).  In training mode the batch statistics
    normalize, and the running buffers are updated in place -- but only while
    grad recording is enabled, so oracle forward passes stay pure.  Inference
    mode uses the frozen running statistics.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} "
                         f"do not match channel count {ch}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    expand = (None, slice(None)) if x.ndim == 2 else (None, slice(None), None, None)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if is_grad_enabled():
            n = x.size // ch
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running_mean *= (1.0 - momentum)
            running_mean += momentum * mean
            running_var *= (1.0 - momentum)
            running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[expand]) * inv_std[expand]
    out = Tensor(gamma.data[expand] * xhat + beta.data[expand])
    _check_finite(out.data, "batch_norm")

    def bwd(g):
        _accumulate(beta, g.sum(axis=axes))
        _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad:
            gi = g * gamma.data[expand]
            if training:
                m = x.size // ch
                gmean = gi.mean(axis=axes)
                gdot = (gi * xhat).mean(axis=axes)
                gx = (gi - gmean[expand] - xhat * gdot[expand]) * inv_std[expand]
                del m
            else:
                gx = gi * inv_std[expand]
            _accumulate(x, gx)

    return record(out, (x, gamma, beta), bwd)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of (N, D) to unit L2 norm."""
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected 2-D input, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = x.data / norms
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accumulate(x, (g - y * dot) / norms)

    return record(out, (x,), bwd)


def smooth_l1(pred: Tensor, target: np.ndarray) -> Tensor:
    """Elementwise smooth-L1 against a constant target.

    0.5 d^2 for |d| < 1, |d| - 0.5 otherwise; the box-regression loss shape.
    """
    t = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != t.shape:
        raise ShapeError(f"smooth_l1: shapes {pred.shape} and {t.shape} do not match")
    d = pred.data - t
    ad = np.abs(d)
    quad = ad < 1.0
    out = Tensor(np.where(quad, 0.5 * d * d, ad - 0.5))

    def bwd(g):
        _accumulate(pred, g * np.where(quad, d, np.sign(d)))

    return record(out, (pred,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_momentum_step(params: Iterable[Tensor], lr: float, momentum: float,
                      velocities: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
    """One SGD-with-momentum update; gradients are cleared afterwards.

    velocity <- momentum * velocity + grad; param <- param - lr * velocity.
    Velocities are keyed by tensor identity and returned for the next call.
    """
    vel = velocities if velocities is not None else {}
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ValueError("sgd_momentum_step: parameter has no gradient")
    for p in params:
        v = vel.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        p.data -= lr * v
        vel[id(p)] = v
        p.grad = None
    return vel


class SGD:
    """Stateful wrapper around sgd_momentum_step for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocities: dict[int, np.ndarray] = {}

    def step(self) -> None:
        sgd_momentum_step(self.params, self.lr, self.momentum, self.velocities)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
