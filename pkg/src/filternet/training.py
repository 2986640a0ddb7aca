"""
Losses, schedules, plain SGD and the epoch loop.

The total loss is ``(1 - lam) * L_c + lam * L_e`` for gated variants and
``L_c`` otherwise.  Both terms are per-voxel means, so lambda balances
quantities of comparable size regardless of patch size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import NUM_CLASSES
from .autodiff import Tensor, make_result
from .edge_gate import GATE_MODES, SIGMA_FLOOR, EdgeGate, edge_loss
from .errors import ConfigurationError, NumericError
from .models import VARIANTS, NetworkSpec, SegmentationNet, build, one_hot, save_checkpoint

log = logging.getLogger(__name__)

CLASS_WEIGHTS = (0.0, 0.2, 0.2, 0.15, 0.15, 0.3)
LOG_EPS = 1e-7
LOG_COLUMNS = ("step", "epoch", "L", "L_c", "L_e", "lambda", "lr", "sigma")


@dataclass(frozen=True)
class LossConfig:
    lambda0: float = 1e-3
    lambda_growth_every: int = 10
    lambda_growth_factor: float = 10.0
    weights: tuple = CLASS_WEIGHTS
    epsilon_log: float = LOG_EPS

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != NUM_CLASSES or w[0] != 0.0 or min(w) < 0.0:
            raise ConfigurationError(f"class weights must be {NUM_CLASSES} non-negative values "
                                     f"with background 0, got {w}")
        if self.lambda_growth_every < 1:
            raise ConfigurationError("lambda_growth_every must be >= 1")


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 1e-3
    lr_decay_every: int = 10
    lr_decay_factor: float = 5.0
    batch_size: int = 2
    epochs: int = 30
    # smoke-run cap on optimizer steps per epoch; 0 means a full pass
    max_steps: int = 0

    def __post_init__(self):
        if self.max_steps < 0:
            raise ConfigurationError("max_steps must be >= 0")
        if not self.lr0 > 0 or not self.lr_decay_factor > 0:
            raise ConfigurationError("learning rate and its decay factor must be positive")
        if self.lr_decay_every < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("lr_decay_every and batch_size must be >= 1, epochs >= 0")


def learning_rate(epoch: int, opt: OptimizerConfig = OptimizerConfig()) -> float:
    """lr0 / factor ** floor(epoch / every)."""
    return opt.lr0 / opt.lr_decay_factor ** (epoch // opt.lr_decay_every)


def lambda_weight(epoch: int, cfg: LossConfig = LossConfig()) -> float:
    """lambda0 * factor ** floor(epoch / every)."""
    return cfg.lambda0 * cfg.lambda_growth_factor ** (epoch // cfg.lambda_growth_every)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(Y, Yhat: Tensor, eps: float = LOG_EPS, class_axis: Optional[int] = None) -> Tensor:
    """Mean over voxels of -sum_n Y_n log(max(Yhat_n, eps))."""
    if not isinstance(Yhat, Tensor):
        Yhat = Tensor(np.asarray(Yhat, dtype=np.float64))
    Ydata = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=Yhat.dtype)
    if Ydata.shape != Yhat.shape:
        raise ConfigurationError(f"cross_entropy: label shape {Ydata.shape} != {Yhat.shape}")
    if class_axis is None:
        class_axis = 0 if Yhat.ndim == 4 else 1
    voxels = Yhat.size // Yhat.shape[class_axis]
    p = np.maximum(Yhat.data, eps)
    value = np.asarray(-(Ydata * np.log(p)).sum() / voxels, dtype=Yhat.dtype)

    def backward(g):
        live = Yhat.data > eps
        return (g * np.where(live, -Ydata / p, 0.0).astype(Yhat.dtype) / voxels,)

    return make_result(value, (Yhat,), backward, "cross_entropy")


@dataclass
class LossTerms:
    total: Tensor
    L_c: Tensor
    L_e: Optional[Tensor]
    lam: float


def total_loss(Y, Yhat: Tensor, gate: Optional[EdgeGate], cfg: LossConfig, epoch: int,
               lam: Optional[float] = None) -> LossTerms:
    """(1 - lam) L_c + lam L_e with lam from the schedule; L_c alone without a gate.

    ``lam`` overrides the schedule (used by linearity checks).
    """
    Lc = cross_entropy(Y, Yhat, cfg.epsilon_log)
    if gate is None:
        return LossTerms(Lc, Lc, None, 0.0)
    lam = lambda_weight(epoch, cfg) if lam is None else float(lam)
    Le = edge_loss(Y, Yhat, gate, cfg.weights)
    dtype = Yhat.dtype
    total = Lc * Tensor(np.asarray(1.0 - lam, dtype=dtype)) + Le * Tensor(np.asarray(lam, dtype=dtype))
    return LossTerms(total, Lc, Le, lam)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(model: SegmentationNet, lr: float) -> None:
    """p <- p - lr * grad for every parameter, sigma included; sigma clamped at the floor.

    All gradients are checked before anything is written, so a non-finite
    gradient leaves the model untouched.
    """
    params = model.parameters()
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError("non-finite gradient; step aborted")
    for p in params:
        if p.grad is not None:
            p.data = (p.data - lr * p.grad).astype(p.data.dtype, copy=False)
    gate = model.gate
    if gate is not None and gate.trainable:
        gate.sigma.data = np.asarray(max(float(gate.sigma.data), SIGMA_FLOOR),
                                     dtype=gate.sigma.dtype)


# ---------------------------------------------------------------------------
# configuration file


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    variant: str = "FilterNet"
    base_channels: int = 16
    sigma0: float = 1.0
    gate_mode: str = "trainable_sigma"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    # not hyperparameters of the method; run plumbing
    dtype: str = "float32"
    augment: bool = True
    folds: int = 4
    post_process: str = "none"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant: unknown value {self.variant!r}")
        if self.gate_mode not in GATE_MODES:
            raise ConfigurationError(f"gate_mode: unknown value {self.gate_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype: expected float32 or float64, got {self.dtype!r}")
        if self.post_process not in ("none", "lcc"):
            raise ConfigurationError(f"post_process: expected none or lcc, got {self.post_process!r}")
        if self.folds < 2:
            raise ConfigurationError("folds must be >= 2")

    @property
    def network(self) -> NetworkSpec:
        return NetworkSpec(self.variant, self.base_channels, gate_mode=self.gate_mode,
                           sigma0=self.sigma0)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


_OPT_KEYS = {f.name for f in fields(OptimizerConfig)}
_LOSS_KEYS = {"lambda0", "lambda_growth_every", "lambda_growth_factor", "weights"}
_TOP_KEYS = {"seed", "variant", "base_channels", "sigma0", "gate_mode", "dtype", "augment",
             "folds", "post_process"}
_INT_KEYS = {"seed", "base_channels", "lr_decay_every", "batch_size", "epochs", "max_steps",
             "lambda_growth_every", "folds"}
_FLOAT_KEYS = {"sigma0", "lr0", "lr_decay_factor", "lambda0", "lambda_growth_factor"}
CONFIG_KEYS = frozenset(_OPT_KEYS | _LOSS_KEYS | _TOP_KEYS)


def _convert(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key == "weights":
            return tuple(float(v) for v in raw.strip("[]() ").replace(",", " ").split())
        if key == "augment":
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse value {raw!r}") from None
    return raw


def parse_config(text: str, overrides: Optional[dict] = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Unknown keys raise ConfigurationError naming the key.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigurationError(f"unknown config key {key!r} (line {lineno})")
        values[key] = _convert(key, raw)
    values.update(overrides or {})
    opt = OptimizerConfig(**{k: v for k, v in values.items() if k in _OPT_KEYS})
    loss = LossConfig(**{k: v for k, v in values.items() if k in _LOSS_KEYS})
    top = {k: v for k, v in values.items() if k in _TOP_KEYS}
    return TrainConfig(optimizer=opt, loss=loss, **top)


def load_config(path, overrides: Optional[dict] = None) -> TrainConfig:
    return parse_config(Path(path).read_text(), overrides)


def format_config(cfg: TrainConfig) -> str:
    o, l = cfg.optimizer, cfg.loss
    rows = [("seed", cfg.seed), ("variant", cfg.variant), ("base_channels", cfg.base_channels),
            ("epochs", o.epochs), ("batch_size", o.batch_size), ("max_steps", o.max_steps),
            ("lr0", o.lr0), ("lr_decay_every", o.lr_decay_every), ("lr_decay_factor", o.lr_decay_factor),
            ("lambda0", l.lambda0), ("lambda_growth_every", l.lambda_growth_every),
            ("lambda_growth_factor", l.lambda_growth_factor),
            ("weights", ", ".join(repr(w) for w in l.weights)), ("sigma0", cfg.sigma0),
            ("gate_mode", cfg.gate_mode), ("dtype", cfg.dtype), ("augment", cfg.augment),
            ("folds", cfg.folds), ("post_process", cfg.post_process)]
    return "".join(f"{k} = {v}\n" for k, v in rows)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class StepRecord:
    step: int
    epoch: int
    L: float
    L_c: float
    L_e: Optional[float]
    lam: float
    lr: float
    sigma: Optional[float]

    def row(self) -> list:
        def fmt(v):
            return "" if v is None else repr(v)
        return [self.step, self.epoch, fmt(self.L), fmt(self.L_c), fmt(self.L_e), fmt(self.lam),
                fmt(self.lr), fmt(self.sigma)]


@dataclass
class TrainResult:
    model: SegmentationNet
    log: list
    checkpoints: list = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r.L for r in self.log])


def write_log(records: Sequence[StepRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_log(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffle of ``n`` items for (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def _stack(patches, idx, dtype):
    x = np.stack([patches[i][0] for i in idx]).astype(dtype, copy=False)
    y = one_hot(np.stack([patches[i][1] for i in idx]), NUM_CLASSES, dtype)
    return Tensor(x), y


def train(cfg: TrainConfig, patches: Sequence, out_dir=None,
          on_step: Optional[Callable[[StepRecord], None]] = None,
          model: Optional[SegmentationNet] = None) -> TrainResult:
    """Run ``cfg.optimizer.epochs`` epochs of SGD over ``patches``.

    ``patches`` is a sequence of (image (1, X, Y, Z), labels (X, Y, Z)) pairs,
    already augmented.  With ``out_dir`` a log CSV and one checkpoint per epoch
    are written there.
    """
    if len(patches) == 0:
        raise ConfigurationError("empty training set")
    dtype = cfg.np_dtype
    if model is None:
        model = build(cfg.network, cfg.seed, dtype)
    model.train()
    opt = cfg.optimizer
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    records, ckpts = [], []
    step = 0
    for epoch in range(opt.epochs):
        lr = learning_rate(epoch, opt)
        order = epoch_order(len(patches), cfg.seed, epoch)
        starts = range(0, len(order), opt.batch_size)
        if opt.max_steps:
            starts = starts[:opt.max_steps]
        for start in starts:
            x, y = _stack(patches, order[start:start + opt.batch_size], dtype)
            model.zero_grad()
            terms = total_loss(y, model(x), model.gate, cfg.loss, epoch)
            terms.total.backward()
            sigma = None if model.gate is None else model.gate.sigma_value
            rec = StepRecord(step, epoch, float(terms.total.data), float(terms.L_c.data),
                             None if terms.L_e is None else float(terms.L_e.data),
                             terms.lam, lr, sigma)
            sgd_step(model, lr)
            records.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        if out is not None:
            path = out / f"epoch_{epoch:03d}.fnck"
            save_checkpoint(model, path)
            ckpts.append(path)
            write_log(records, out / "train_log.csv")
        log.info("epoch %d done: last L=%.5f", epoch, records[-1].L if records else math.nan)
    return TrainResult(model, records, ckpts)


def smoothed(values, window: int = 20) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    opt_kw = {k: kw.pop(k) for k in list(kw) if k in _OPT_KEYS}
    loss_kw = {k: kw.pop(k) for k in list(kw) if k in _LOSS_KEYS}
    return replace(cfg, optimizer=replace(cfg.optimizer, **opt_kw),
                   loss=replace(cfg.loss, **loss_kw), **kw)
