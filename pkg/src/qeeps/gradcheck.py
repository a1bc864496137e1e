"""Central finite-difference gradient checking.

Used by the test suite and by the `gradcheck` CLI command.  Checks are only
meaningful in f64 precision; the helpers refuse to run in f32.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T


def numeric_gradient(f: Callable[[], T.Tensor], t: T.Tensor, step: float = 1e-5) -> np.ndarray:
    """d f / d t by central differences, evaluated entry by entry.

    `f` must re-run the forward pass reading the current value of `t`.
    Forward evaluations run with grad recording off so no tape is built
    and no running statistics move.
    """
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f().item()
            flat[i] = orig - step
            lo = f().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, scaled by the larger gradient magnitude."""
    scale = max(1.0, float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)))
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_gradients(f: Callable[[], T.Tensor], tensors: Sequence[T.Tensor],
                    rtol: float = 1e-4, step: float = 1e-5) -> float:
    """Compare analytic and finite-difference gradients of scalar f().

    Returns the worst relative error across `tensors`; raises AssertionError
    when it exceeds `rtol`.
    """
    if T.get_precision() != "f64":
        raise RuntimeError("gradient checks require f64 precision")
    for t in tensors:
        t.grad = None
    loss = f()
    T.backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(f, t, step=step)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > rtol:
            raise AssertionError(
                f"gradient mismatch: relative error {err:.3e} > {rtol:.0e} "
                f"on tensor of shape {t.shape}")
    return worst
