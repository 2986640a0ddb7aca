"""
Parameterized layers and the two backbone blocks.

Modules register parameters in declaration order; that order is the one used
by checkpoints and by ``parameters()``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from ..errors import ConfigurationError
from . import functional as F
from .tensor import Tensor


class Module:
    def __init__(self):
        self._children: list = []
        self._params: list = []
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        setattr(self, name, t)
        self._params.append((name, t))
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        setattr(self, name, module)
        self._children.append((name, module))
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self._params:
            yield prefix + name, p
        for name, child in self._children:
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, child in self._children:
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children:
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            if isinstance(m, BatchNorm3d):
                m.running_mean = m.running_mean.astype(dtype)
                m.running_var = m.running_var.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple
    in_channels: int
    out_channels: int
    padding: Optional[tuple] = None
    stride: tuple = (1, 1, 1)
    has_bias: bool = True

    def __post_init__(self):
        if any(k <= 0 or k % 2 == 0 for k in self.kernel):
            raise ConfigurationError(f"kernel sizes must be odd and positive, got {self.kernel}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ConfigurationError("channel counts must be positive")
        if self.padding is None:
            object.__setattr__(self, "padding", tuple((k - 1) // 2 for k in self.kernel))


class Conv3d(Module):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        fan_in = spec.in_channels * int(np.prod(spec.kernel))
        w = rng.standard_normal((spec.out_channels, spec.in_channels) + tuple(spec.kernel))
        self.add_param("weight", (w * np.sqrt(2.0 / fan_in)).astype(dtype))
        self.bias = None
        if spec.has_bias:
            self.add_param("bias", np.zeros(spec.out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.spec.padding, self.spec.stride)


class BatchNorm3d(Module):
    def __init__(self, channels: int, dtype=np.float32):
        super().__init__()
        self.add_param("gamma", np.ones(channels, dtype=dtype))
        self.add_param("beta", np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.training)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng, dtype=np.float32):
        super().__init__()
        self.add_child("conv", Conv3d(ConvSpec((k, k, k), cin, cout), rng, dtype))
        self.add_child("bn", BatchNorm3d(cout, dtype))

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    channels: int
    zeta: Optional[int] = None

    def __post_init__(self):
        if self.kind == "A" and self.zeta is not None:
            raise ConfigurationError("block A takes no leading kernel size")
        if self.kind == "B" and self.zeta not in (3, 5, 7):
            raise ConfigurationError(f"block B needs zeta in {{3, 5, 7}}, got {self.zeta}")
        if self.kind not in ("A", "B"):
            raise ConfigurationError(f"unknown block kind {self.kind!r}")


class BlockA(Module):
    """Two Conv3x3x3-BN-ReLU layers."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        super().__init__()
        self.add_child("layer1", ConvBNReLU(cin, cout, 3, rng, dtype))
        self.add_child("layer2", ConvBNReLU(cout, cout, 3, rng, dtype))

    def forward(self, x):
        return self.layer2(self.layer1(x))


class BlockB(Module):
    """Leading Conv(zeta)-BN-ReLU, a block-A body, and a short residual skip.

    ``mid`` is the width of the leading conv; when it differs from ``cout`` the
    skip goes through a 1x1x1 projection.
    """

    def __init__(self, cin: int, cout: int, zeta: int, rng, dtype=np.float32,
                 mid: Optional[int] = None):
        super().__init__()
        mid = cout if mid is None else mid
        self.add_child("lead", ConvBNReLU(cin, mid, zeta, rng, dtype))
        self.add_child("body", BlockA(mid, cout, rng, dtype))
        self.proj = None
        if mid != cout:
            self.add_child("proj", Conv3d(ConvSpec((1, 1, 1), mid, cout), rng, dtype))

    def forward(self, x):
        h = self.lead(x)
        skip = h if self.proj is None else self.proj(h)
        return F.relu(F.add_same_shape(self.body(h), skip))


def make_block(spec: BlockSpec, cin: int, rng, dtype=np.float32) -> Module:
    if spec.kind == "A":
        return BlockA(cin, spec.channels, rng, dtype)
    return BlockB(cin, spec.channels, spec.zeta, rng, dtype)


class UpConv(Module):
    """Nearest-neighbour x2 followed by a 3x3x3 convolution."""

    def __init__(self, cin: int, cout: int, rng, dtype=np.float32):
        super().__init__()
        self.add_child("conv", Conv3d(ConvSpec((3, 3, 3), cin, cout), rng, dtype))

    def forward(self, x):
        return self.conv(F.upsample_nn(x, (2, 2, 2)))
