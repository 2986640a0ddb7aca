import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from filternet.autodiff import Tensor, check_gradients, softmax_channels
from filternet.edge_gate import EdgeGate, edge_loss
from filternet.errors import ConfigurationError, NumericError
from filternet.models import NetworkSpec, build, one_hot, parameter_count
from filternet.training import (CLASS_WEIGHTS, LossConfig, OptimizerConfig, TrainConfig,
                                cross_entropy, epoch_order, format_config, lambda_weight,
                                learning_rate, parse_config, read_log, sgd_step, smoothed,
                                total_loss, train, with_overrides)

# literal tables, not recomputed from the formula
LR_TABLE = [1e-3] * 10 + [2e-4] * 10 + [4e-5] * 10
LAMBDA_TABLE = [0.001] * 10 + [0.01] * 10 + [0.1] * 10


def _maps(rng, shape=(6, 8, 8, 3)):
    labels = rng.integers(0, 6, size=shape[1:])
    Y = one_hot(labels, 6, np.float64)
    logits = rng.standard_normal(shape)
    P = np.exp(logits) / np.exp(logits).sum(axis=0, keepdims=True)
    return Y, P


# ---------------------------------------------------------------------------
# schedules


def test_schedules_match_tables():
    for e in range(30):
        assert math.isclose(learning_rate(e), LR_TABLE[e], rel_tol=1e-15)
        assert math.isclose(lambda_weight(e), LAMBDA_TABLE[e], rel_tol=1e-15)
    assert math.isclose(learning_rate(15), 2e-4, rel_tol=1e-15)
    assert math.isclose(learning_rate(25), 4e-5, rel_tol=1e-15)


@given(st.integers(0, 200))
def test_schedules_positive_and_piecewise_constant(e):
    assert learning_rate(e) > 0
    assert learning_rate(e) == learning_rate(10 * (e // 10))
    assert lambda_weight(e) == lambda_weight(10 * (e // 10))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(weights=(0.1, 0.2, 0.2, 0.15, 0.15, 0.2))
    with pytest.raises(ConfigurationError):
        LossConfig(weights=(0, 0.2, 0.2))
    with pytest.raises(ConfigurationError):
        OptimizerConfig(lr0=0)


# ---------------------------------------------------------------------------
# losses


def test_cross_entropy_perfect_prediction():
    Y = one_hot(np.random.default_rng(0).integers(0, 6, size=(4, 4, 2)), 6, np.float64)
    assert cross_entropy(Y, Tensor(Y.copy())).item() <= 1e-6


def test_cross_entropy_uniform_is_ln6():
    Y = one_hot(np.random.default_rng(0).integers(0, 6, size=(4, 4, 2)), 6, np.float64)
    L = cross_entropy(Y, Tensor(np.full(Y.shape, 1.0 / 6.0))).item()
    assert abs(L - 1.791759469228055) < 1e-12


def test_cross_entropy_log_guard():
    Y = np.zeros((6, 1, 1, 1))
    Y[2] = 1.0
    P = np.zeros((6, 1, 1, 1))
    P[0] = 1.0
    assert abs(cross_entropy(Y, Tensor(P)).item() + math.log(1e-7)) < 1e-12


def test_cross_entropy_gradient():
    rng = np.random.default_rng(3)
    Y, P = _maps(rng)
    Yhat = Tensor(P, requires_grad=True)
    (err,) = check_gradients(lambda: cross_entropy(Y, Yhat), [Yhat])
    assert err <= 1e-5


def test_cross_entropy_through_softmax_gradient():
    rng = np.random.default_rng(4)
    Y, _ = _maps(rng, (2, 6, 4, 4, 2)[1:])
    Y = Y[None].repeat(2, axis=0)
    z = Tensor(rng.standard_normal(Y.shape), requires_grad=True)
    (err,) = check_gradients(lambda: cross_entropy(Y, softmax_channels(z)), [z])
    assert err <= 1e-5


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ConfigurationError):
        cross_entropy(np.zeros((6, 2, 2, 2)), Tensor(np.zeros((6, 2, 2, 1))))


def test_lambda_zero_gives_cross_entropy_exactly():
    rng = np.random.default_rng(5)
    Y, P = _maps(rng)
    gate = EdgeGate.create()
    t = total_loss(Y, Tensor(P), gate, LossConfig(), 0, lam=0.0)
    assert t.total.item() == t.L_c.item()


def test_lambda_one_gives_edge_loss():
    rng = np.random.default_rng(6)
    Y, P = _maps(rng)
    gate = EdgeGate.create()
    t = total_loss(Y, Tensor(P), gate, LossConfig(), 0, lam=1.0)
    assert t.total.item() == t.L_e.item()


def test_gateless_total_is_cross_entropy():
    rng = np.random.default_rng(7)
    Y, P = _maps(rng)
    t = total_loss(Y, Tensor(P), None, LossConfig(), 25)
    assert t.L_e is None and t.lam == 0.0
    assert t.total.item() == cross_entropy(Y, Tensor(P)).item()


def test_total_uses_schedule():
    rng = np.random.default_rng(8)
    Y, P = _maps(rng)
    gate = EdgeGate.create()
    for epoch, lam in [(0, 0.001), (12, 0.01), (29, 0.1)]:
        t = total_loss(Y, Tensor(P), gate, LossConfig(), epoch)
        assert t.lam == pytest.approx(lam, rel=1e-15)
        want = (1 - lam) * t.L_c.item() + lam * t.L_e.item()
        assert t.total.item() == pytest.approx(want, rel=1e-14)


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_total_loss_non_negative(seed, lam):
    Y, P = _maps(np.random.default_rng(seed), (6, 6, 6, 2))
    assert total_loss(Y, Tensor(P), EdgeGate.create(), LossConfig(), 0, lam=lam).total.item() >= 0


@pytest.mark.parametrize("lam", [0.001, 0.1, 0.5])
def test_sigma_gradient_is_lambda_times_edge_gradient(lam):
    rng = np.random.default_rng(9)
    Y, P = _maps(rng)
    gate = EdgeGate.create(sigma0=1.3)
    t = total_loss(Y, Tensor(P, requires_grad=True), gate, LossConfig(), 0, lam=lam)
    t.total.backward()
    g_total = float(gate.sigma.grad)
    gate.sigma.grad = None
    edge_loss(Y, Tensor(P), gate, CLASS_WEIGHTS).backward()
    g_edge = float(gate.sigma.grad)
    assert g_edge != 0.0
    assert g_total == pytest.approx(lam * g_edge, rel=1e-12)


# ---------------------------------------------------------------------------
# sgd


def _tiny_model():
    return build(NetworkSpec("FilterNet", 1), seed=0, dtype=np.float64)


def test_zero_gradient_leaves_parameters():
    model = _tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    for p in model.parameters():
        p.grad = np.zeros_like(p.data)
    sgd_step(model, 1e-3)
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_sgd_descends_quadratic():
    model = _tiny_model()
    target = [np.random.default_rng(i).standard_normal(p.shape) for i, p in enumerate(model.parameters())]

    def objective():
        return sum(float(((p.data - t) ** 2).sum()) for p, t in zip(model.parameters(), target))

    before = objective()
    for p, t in zip(model.parameters(), target):
        p.grad = 2.0 * (p.data - t)
    sgd_step(model, 1e-3)
    assert objective() < before


def test_sgd_non_finite_aborts_without_update():
    model = _tiny_model()
    before = [p.data.copy() for p in model.parameters()]
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    model.parameters()[-1].grad = np.asarray(np.nan)
    with pytest.raises(NumericError):
        sgd_step(model, 1e-3)
    for b, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(b, p.data)


def test_sgd_clamps_sigma():
    model = _tiny_model()
    model.gate.sigma.grad = np.asarray(1e6)
    sgd_step(model, 1.0)
    assert model.gate.sigma_value == 0.05


# ---------------------------------------------------------------------------
# config


CONFIG_TEXT = """
# phantom run
seed = 3
variant = UNetF
base_channels = 8   # small
epochs = 10
batch_size = 2
lr0 = 0.001
lr_decay_every = 10
lr_decay_factor = 5
lambda0 = 0.001
lambda_growth_every = 10
lambda_growth_factor = 10
weights = 0, 0.2, 0.2, 0.15, 0.15, 0.3
sigma0 = 1.0
gate_mode = fixed_sigma
"""


def test_parse_config():
    cfg = parse_config(CONFIG_TEXT)
    assert cfg.seed == 3 and cfg.variant == "UNetF" and cfg.base_channels == 8
    assert cfg.optimizer.epochs == 10 and cfg.optimizer.lr_decay_factor == 5.0
    assert cfg.loss.weights == CLASS_WEIGHTS
    assert cfg.gate_mode == "fixed_sigma"
    assert cfg.network == NetworkSpec("UNetF", 8, gate_mode="fixed_sigma")


def test_config_round_trip():
    cfg = parse_config(CONFIG_TEXT)
    assert parse_config(format_config(cfg)) == cfg


def test_unknown_key_is_named():
    with pytest.raises(ConfigurationError, match="momentum"):
        parse_config("seed = 1\nmomentum = 0.9\n")


@pytest.mark.parametrize("text", ["seed = x", "variant = VNet", "just words", "weights = 1, 2"])
def test_bad_config_values(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_overrides():
    cfg = with_overrides(TrainConfig(), epochs=3, lambda0=0.5, variant="UNet")
    assert cfg.optimizer.epochs == 3 and cfg.loss.lambda0 == 0.5 and cfg.variant == "UNet"


# ---------------------------------------------------------------------------
# loop


def _toy_patches(n=4, seed=0, shape=(8, 8, 4)):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        labels = np.zeros(shape, dtype=np.uint8)
        cx, cy = rng.integers(2, 6, size=2)
        labels[cx - 2:cx + 2, cy - 2:cy + 2] = rng.integers(1, 6)
        labels[:2, :, :] = 5
        img = (labels / 5.0 + 0.1 * rng.standard_normal(shape))[None]
        out.append((img, labels))
    return out


def _tiny_cfg(**kw):
    base = dict(variant="FilterNet", base_channels=2, epochs=2, dtype="float64", seed=11)
    base.update(kw)
    return with_overrides(TrainConfig(), **base)


def test_empty_training_set_raises():
    with pytest.raises(ConfigurationError):
        train(_tiny_cfg(), [])


def test_epoch_order_deterministic_and_epoch_dependent():
    np.testing.assert_array_equal(epoch_order(20, 1, 3), epoch_order(20, 1, 3))
    assert not np.array_equal(epoch_order(20, 1, 3), epoch_order(20, 1, 4))
    assert sorted(epoch_order(20, 1, 3)) == list(range(20))


def test_training_is_bitwise_reproducible(tmp_path):
    patches = _toy_patches(5)
    a = train(_tiny_cfg(), patches, tmp_path / "a")
    b = train(_tiny_cfg(), patches, tmp_path / "b")
    assert (tmp_path / "a" / "train_log.csv").read_bytes() == (tmp_path / "b" / "train_log.csv").read_bytes()
    assert len(a.log) == 2 * 3  # ceil(5 / 2) steps per epoch
    assert len(a.checkpoints) == 2
    for p, q in zip(a.model.parameters(), b.model.parameters()):
        assert p.data.tobytes() == q.data.tobytes()


def test_sigma_moves_only_when_trainable_and_lambda_positive():
    patches = _toy_patches(4)
    moving = train(_tiny_cfg(lambda0=0.5), patches)
    assert len({r.sigma for r in moving.log}) > 1
    frozen = train(_tiny_cfg(lambda0=0.0), patches)
    assert {r.sigma for r in frozen.log} == {1.0}
    fixed = train(_tiny_cfg(lambda0=0.5, gate_mode="fixed_sigma"), patches)
    assert {r.sigma for r in fixed.log} == {1.0}


def test_unet_log_has_empty_sigma(tmp_path):
    cfg = _tiny_cfg(variant="UNet", epochs=1)
    model_count = parameter_count(build(cfg.network, cfg.seed))
    res = train(cfg, _toy_patches(2), tmp_path)
    rows = read_log(tmp_path / "train_log.csv")
    assert list(rows[0]) == ["step", "epoch", "L", "L_c", "L_e", "lambda", "lr", "sigma"]
    assert all(r["sigma"] == "" and r["L_e"] == "" for r in rows)
    assert parameter_count(res.model) == model_count


def test_training_reduces_loss():
    patches = _toy_patches(8, seed=2)
    res = train(_tiny_cfg(epochs=6, lr0=0.05), patches)
    s = smoothed(res.losses(), 4)
    assert s[-1] < res.losses()[0]


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
