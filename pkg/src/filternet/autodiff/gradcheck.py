"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric, floor: float = 1e-5) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps parameters whose true gradient is exactly zero (a conv
    bias feeding a train-mode batch norm) from reporting noise / noise.
    """
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Optional[Sequence] = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``x`` (mutated in place).

    With ``indices`` only those flat positions are probed; the result then has
    one entry per index.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(len(positions), dtype=np.float64)
    for n, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * h)
    return out if indices is not None else out.reshape(x.shape)


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5,
                    max_entries: Optional[int] = None, rng=None) -> list:
    """Compare autodiff and finite-difference gradients of ``loss_fn()``.

    Returns one relative error per tensor.  ``max_entries`` samples that many
    positions per tensor instead of probing all of them.  The denominator
    floor is 1e-5 of the largest analytic gradient norm among ``tensors``, so
    a tensor whose exact gradient is zero is judged against the scale of the
    whole check rather than against its own rounding noise.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def f():
        return float(loss_fn().data)

    floor = max(1e-5, 1e-5 * max(float(np.linalg.norm(a)) for a in analytic))
    errors = []
    rng = rng or np.random.default_rng(0)
    for t, a in zip(tensors, analytic):
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
            num = numerical_gradient(f, t.data, h, idx)
            errors.append(relative_error(a.reshape(-1)[idx], num, floor))
        else:
            num = numerical_gradient(f, t.data, h)
            errors.append(relative_error(a, num, floor))
    return errors
