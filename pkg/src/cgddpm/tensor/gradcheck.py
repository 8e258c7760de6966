"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import Tensor, backward


def numerical_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of ``fn`` at ``point``, in ``point``'s dtype.

    Only the flat indices in ``coords`` are perturbed (all when None); the
    rest of the returned array is left at zero.
    """
    x = np.array(point, copy=True)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(Tensor(x)).data.sum())
        flat[i] = orig - step
        fm = float(fn(Tensor(x)).data.sum())
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function not finite near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def analytic_gradient(fn: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    x = Tensor(np.array(point, copy=True), requires_grad=True)
    out = fn(x)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("function value is not finite")
    (g,) = backward(out, [x])
    return np.asarray(g, dtype=np.float64)


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-3,
               reference_dtype=None, coords: np.ndarray | None = None) -> float:
    """Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor and must
    compute in its argument's dtype. The analytic gradient is taken at
    ``point`` as given; with ``reference_dtype`` set (e.g. float64 when
    checking a 32-bit gradient) the central differences are evaluated at
    that precision instead, which keeps round-off out of the reference.
    """
    point = np.asarray(point)
    a = analytic_gradient(fn, point)
    ref_point = point if reference_dtype is None else point.astype(reference_dtype)
    n = numerical_gradient(fn, ref_point, step, coords)
    if coords is not None:
        a = a.reshape(-1)[coords]
        n = n.reshape(-1)[coords]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))
