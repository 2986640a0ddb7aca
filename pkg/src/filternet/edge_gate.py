"""
Kernel-based edge gate applied to probability maps.

The response of a map is ``G(sigma) * rho(L * map)`` where ``L`` is the fixed
3x3 Laplacian, ``rho`` clamps to [0, 1] and ``G(sigma)`` is a 5x5 Gaussian
normalized to unit sum.  Both kernels act on x-y slices.  With a trainable
sigma the gradient reaches sigma through the analytic derivative of the
normalized kernel entries.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, conv2d_slicewise, make_result
from .errors import ConfigurationError, DomainError

LAPLACIAN = np.array([[0.0, -1.0, 0.0],
                      [-1.0, 4.0, -1.0],
                      [0.0, -1.0, 0.0]])

GAUSSIAN_SIZE = 5
SIGMA_FLOOR = 0.05
GATE_MODES = ("laplacian_only", "fixed_sigma", "trainable_sigma")

# squared distance of each 5x5 entry from the centre (3, 3) in 1-based indices
_idx = np.arange(1, GAUSSIAN_SIZE + 1) - 3
_R2 = (_idx[:, None] ** 2 + _idx[None, :] ** 2).astype(np.float64)


def rho(x):
    """Clamp to [0, 1].  Works on arrays and on Tensors (differentiable)."""
    if not isinstance(x, Tensor):
        return np.clip(x, 0.0, 1.0)
    inside = (x.data > 0.0) & (x.data < 1.0)
    return make_result(np.clip(x.data, 0.0, 1.0), (x,), lambda g: (g * inside,), "rho")


def rho_grad(x):
    """Subgradient of rho: 1 strictly inside (0, 1), 0 elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    return ((x > 0.0) & (x < 1.0)).astype(np.float64)


def gaussian_kernel(sigma: float):
    """Normalized 5x5 Gaussian, its normalizer and d(kernel)/d(sigma).

    Returns ``(kappa, tau, dkappa)`` with ``kappa = tau * a`` where ``a`` holds
    the unnormalized Gaussian values (including the 1/(2 pi sigma^2) factor).
    """
    sigma = float(sigma)
    if not sigma > 0.0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    a = np.exp(-_R2 / (2.0 * sigma ** 2)) / (2.0 * np.pi * sigma ** 2)
    tau = 1.0 / a.sum()
    kappa = a * tau
    # quotient rule on e / sum(e); the prefactor cancels
    r2_mean = float((kappa * _R2).sum())
    dkappa = kappa * (_R2 - r2_mean) / sigma ** 3
    return kappa, tau, dkappa


def gaussian_kernel_tensor(sigma: Tensor, dtype=np.float64) -> Tensor:
    kappa, _, dkappa = gaussian_kernel(float(sigma.data))

    def backward(g):
        return (np.asarray((g * dkappa).sum(), dtype=sigma.dtype),)

    return make_result(kappa.astype(dtype), (sigma,), backward, "gaussian_kernel")


@dataclass
class EdgeGate:
    """Edge-gate state: the fixed Laplacian, sigma and the operating mode."""

    sigma: Tensor
    mode: str = "trainable_sigma"
    kappa_L: np.ndarray = None

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigurationError(f"unknown gate mode {self.mode!r}; expected one of {GATE_MODES}")
        if self.kappa_L is None:
            self.kappa_L = LAPLACIAN.copy()
        self.sigma.requires_grad = self.mode == "trainable_sigma"
        if not float(self.sigma.data) > 0.0:
            raise DomainError("sigma must be positive")

    @classmethod
    def create(cls, mode: str = "trainable_sigma", sigma0: float = 1.0) -> "EdgeGate":
        return cls(Tensor(np.asarray(float(sigma0))), mode)

    @property
    def trainable(self) -> bool:
        return self.mode == "trainable_sigma"

    @property
    def sigma_value(self) -> float:
        return float(self.sigma.data)

    def kernels(self):
        """(kappa_G, tau, dkappa_dsigma) at the current sigma."""
        return gaussian_kernel(self.sigma_value)

    def parameters(self) -> list:
        return [self.sigma] if self.trainable else []


def edge_response(x, gate: EdgeGate) -> Tensor:
    """Per-slice edge map of ``x`` (..., X, Y, Z); non-negative everywhere."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    lap = rho(conv2d_slicewise(x, Tensor(gate.kappa_L.astype(x.dtype)), padding=1))
    if gate.mode == "laplacian_only":
        return lap
    kernel = gaussian_kernel_tensor(gate.sigma, dtype=x.dtype)
    return conv2d_slicewise(lap, kernel, padding=GAUSSIAN_SIZE // 2)


def _weighted_l1(diff: Tensor, weights: np.ndarray, class_axis: int) -> Tensor:
    """sum_n w_n * mean(|diff_n|) over every axis except ``class_axis``."""
    d = np.moveaxis(diff.data, class_axis, 0)
    count = d[0].size
    per_class = np.abs(d).reshape(d.shape[0], -1).mean(axis=1)
    value = np.asarray(np.dot(weights, per_class), dtype=diff.dtype)

    def backward(g):
        shape = [1] * diff.ndim
        shape[class_axis] = len(weights)
        scale = (weights / count).reshape(shape).astype(diff.dtype)
        return (g * scale * np.sign(diff.data),)

    return make_result(value, (diff,), backward, "weighted_l1")


def edge_loss(Y, Yhat: Tensor, gate: EdgeGate, weights: Sequence[float],
              class_axis: int = None) -> Tensor:
    """Weighted L1 distance between the edge maps of labels and predictions.

    ``Y`` and ``Yhat`` are (N, X, Y, Z) or (B, N, X, Y, Z); the voxel mean is
    taken per class (over batch and space) before weighting.  Classes with
    zero weight are skipped entirely.
    """
    if not isinstance(Yhat, Tensor):
        Yhat = Tensor(np.asarray(Yhat, dtype=np.float64))
    Ydata = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=Yhat.dtype)
    if Ydata.shape != Yhat.shape:
        raise ConfigurationError(f"edge_loss: label shape {Ydata.shape} != prediction shape {Yhat.shape}")
    if class_axis is None:
        class_axis = 0 if Yhat.ndim == 4 else 1
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (Yhat.shape[class_axis],):
        raise ConfigurationError(f"edge_loss: {len(w)} weights for {Yhat.shape[class_axis]} classes")
    active = np.flatnonzero(w)
    if active.size == 0:
        return Tensor(np.asarray(0.0, dtype=Yhat.dtype))
    if active.size < w.size:
        Ysel = np.take(Ydata, active, axis=class_axis)
        Yhat_sel = _take(Yhat, active, class_axis)
    else:
        Ysel, Yhat_sel = Ydata, Yhat
    f_true = edge_response(Tensor(Ysel.astype(Yhat.dtype, copy=False)), gate)
    f_pred = edge_response(Yhat_sel, gate)
    return _weighted_l1(f_true - f_pred, w[active], class_axis)


def _take(x: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = idx
        full[tuple(sl)] = g
        return (full,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), backward, "take")


def edge_loss_and_grads(Y, Yhat, gate: EdgeGate, weights):
    """Convenience wrapper: (L_e, dL_e/dYhat, dL_e/dsigma) as plain numbers/arrays.

    The sigma derivative is reported for every gate mode that uses the
    Gaussian (0.0 for laplacian_only).
    """
    yhat = Tensor(np.array(Yhat, dtype=np.float64), requires_grad=True)
    was_trainable = gate.sigma.requires_grad
    gate.sigma.requires_grad = gate.mode != "laplacian_only"
    gate.sigma.grad = None
    try:
        loss = edge_loss(Y, yhat, gate, weights)
        if loss.requires_grad:
            loss.backward()
        dsigma = 0.0 if gate.sigma.grad is None else float(gate.sigma.grad)
        dyhat = np.zeros_like(yhat.data) if yhat.grad is None else yhat.grad
    finally:
        gate.sigma.requires_grad = was_trainable
        gate.sigma.grad = None
    return float(loss.data), dyhat, dsigma


def sigma_gradient_step(gate: EdgeGate, dLe_dsigma: float, lr: float, lam: float) -> EdgeGate:
    """sigma <- max(sigma - lr * lam * dL_e/dsigma, SIGMA_FLOOR); only in trainable mode."""
    if not gate.trainable:
        return gate
    new = float(gate.sigma.data) - lr * lam * float(dLe_dsigma)
    gate.sigma.data = np.asarray(max(new, SIGMA_FLOOR), dtype=gate.sigma.dtype)
    return gate
