"""
Finite-difference verification runs shared by the CLI and the test suite.

Every check works in float64 and returns the relative errors it measured.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (BlockA, BlockB, Tensor, batch_norm, check_gradients, concat,
                       conv2d_slicewise, conv3d, maxpool3d, relative_error, relu,
                       softmax_channels, upsample_nn)
from .edge_gate import LAPLACIAN, EdgeGate, edge_loss
from .models import NetworkSpec, build, one_hot
from .training import CLASS_WEIGHTS, LossConfig, total_loss

EDGE_TOL = 1e-4
LAYER_TOL = 1e-4
NETWORK_TOL = 1e-3


def _random_maps(rng, shape=(6, 16, 16, 4)):
    labels = rng.integers(0, shape[0], size=shape[1:])
    Y = one_hot(labels, shape[0], np.float64)
    z = rng.standard_normal(shape) * 2.0
    P = np.exp(z - z.max(axis=0))
    return Y, P / P.sum(axis=0)


def sigma_gradient_error(Y, P, sigma: float, h: float = 1e-6) -> float:
    """Analytic vs central-difference dL_e/dsigma for one map pair."""
    gate = EdgeGate.create("trainable_sigma", sigma)
    edge_loss(Y, Tensor(P), gate, CLASS_WEIGHTS).backward()
    analytic = float(gate.sigma.grad)

    def at(s):
        return float(edge_loss(Y, Tensor(P), EdgeGate.create("fixed_sigma", s), CLASS_WEIGHTS).data)

    numeric = (at(sigma + h) - at(sigma - h)) / (2 * h)
    return relative_error(analytic, numeric)


def gradcheck_edge_gate(n_pairs: int = 20, seed: int = 0) -> list:
    """sigma-gradient relative errors on ``n_pairs`` random 6x16x16x4 map pairs."""
    rng = np.random.default_rng(seed)
    errors = []
    for _ in range(n_pairs):
        Y, P = _random_maps(rng)
        errors.append(sigma_gradient_error(Y, P, float(rng.uniform(0.5, 3.0))))
    return errors


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return (out * Tensor(w)).sum()


def gradcheck_layers(seed: int = 0) -> dict:
    """Max relative error per differentiable layer."""
    rng = np.random.default_rng(seed)
    res = {}

    def run(name, fn, tensors, **kw):
        out = fn()
        w = rng.standard_normal(out.shape)
        res[name] = max(check_gradients(lambda: _weighted(fn(), w), tensors, **kw))

    x = Tensor(rng.standard_normal((2, 2, 4, 4, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    run("conv3d", lambda: conv3d(x, k, b, padding=1), [x, k, b])

    s = Tensor(rng.standard_normal((2, 3, 6, 6, 2)), requires_grad=True)
    kern = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    run("conv2d_slicewise", lambda: conv2d_slicewise(s, kern, 1), [s, kern])

    xb = Tensor(rng.standard_normal((2, 3, 3, 3, 2)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    be = Tensor(rng.standard_normal(3), requires_grad=True)
    rm, rv = np.zeros(3), np.ones(3)
    run("batchnorm_train",
        lambda: batch_norm(xb, g, be, rm.copy(), rv.copy(), True), [xb, g, be])
    em, ev = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    run("batchnorm_eval", lambda: batch_norm(xb, g, be, em, ev, False), [xb, g, be])

    z = Tensor(rng.standard_normal((2, 6, 3, 3, 2)), requires_grad=True)
    run("softmax", lambda: softmax_channels(z), [z])

    # distinct values keep the argmax away from ties
    p = Tensor(rng.permutation(128).reshape(1, 2, 4, 4, 4) * 0.1, requires_grad=True)
    run("maxpool3d", lambda: maxpool3d(p, 2), [p])

    u = Tensor(rng.standard_normal((1, 2, 2, 3, 2)), requires_grad=True)
    run("upsample_nn", lambda: upsample_nn(u, (2, 2, 2)), [u])

    r = Tensor(rng.standard_normal((2, 3, 3, 3, 2)) + 0.05, requires_grad=True)
    run("relu", lambda: relu(r), [r])

    c1 = Tensor(rng.standard_normal((1, 2, 2, 2, 2)), requires_grad=True)
    c2 = Tensor(rng.standard_normal((1, 3, 2, 2, 2)), requires_grad=True)
    run("concat", lambda: concat([c1, c2]), [c1, c2])

    xa = Tensor(rng.standard_normal((2, 2, 4, 4, 4)), requires_grad=True)
    block_a = BlockA(2, 3, rng, np.float64)
    run("block_A", lambda: block_a(xa), [xa] + block_a.parameters(), max_entries=20, rng=rng)
    block_b = BlockB(2, 3, 5, rng, np.float64)
    run("block_B", lambda: block_b(xa), [xa] + block_b.parameters(), max_entries=20, rng=rng)
    block_bp = BlockB(2, 3, 3, rng, np.float64, mid=2)
    # a zero projection bias puts relu(body + skip) exactly on its kink wherever
    # the lead branch is all zero; move it off
    block_bp.proj.bias.data = rng.uniform(0.1, 0.5, 3)
    run("block_B_projection", lambda: block_bp(xa), [xa] + block_bp.parameters(),
        max_entries=20, rng=rng)
    return res


def gradcheck_network(variant: str = "FilterNet", n_params: int = 100, seed: int = 0,
                      base_channels: int = 4, patch=(24, 24, 8), lam: float = 0.5,
                      h: float = 1e-5) -> float:
    """Total-loss gradient vs finite differences on ``n_params`` sampled parameter scalars."""
    rng = np.random.default_rng(seed)
    model = build(NetworkSpec(variant, base_channels), seed=seed, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 1) + tuple(patch)))
    Y = one_hot(rng.integers(0, 6, size=(1,) + tuple(patch)), 6, np.float64)
    cfg = LossConfig()

    def loss():
        # running statistics must not drift between probes
        for m in model.modules():
            if hasattr(m, "running_mean"):
                m.running_mean[...] = 0.0
                m.running_var[...] = 1.0
        return total_loss(Y, model(x), model.gate, cfg, 0, lam=lam).total

    params = model.parameters()
    model.zero_grad()
    loss().backward()
    sizes = np.array([p.size for p in params])
    flat_idx = np.sort(rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False))
    owner = np.searchsorted(np.cumsum(sizes), flat_idx, side="right")
    offsets = flat_idx - np.concatenate([[0], np.cumsum(sizes)])[owner]
    analytic, numeric = [], []
    for o, i in zip(owner, offsets):
        analytic.append(np.ravel(params[o].grad)[i])
        numeric.append(_kink_aware_difference(loss, params[o].data.reshape(-1), i, h))
    return relative_error(np.array(analytic), np.array(numeric))


def _kink_aware_difference(loss, view: np.ndarray, i: int, h: float, shrink: int = 3) -> float:
    """Central difference that steps down when the probe straddles a kink.

    ReLU, max-pooling, the clamp and the L1 norm are piecewise smooth; when
    the forward and backward one-sided slopes disagree, a kink lies within
    ``h`` of the point and the step is reduced (up to ``shrink`` times by 10x).
    """
    orig = view[i]
    central = 0.0
    for _ in range(shrink + 1):
        view[i] = orig + h
        fp = float(loss().data)
        view[i] = orig - h
        fm = float(loss().data)
        view[i] = orig
        f0 = float(loss().data)
        central = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) <= 1e-3 * abs(central) + 1e-9:
            break
        h /= 10.0
    return central
