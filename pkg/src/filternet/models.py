"""
The four network variants, receptive-field and parameter arithmetic, and the
binary checkpoint format.

All variants share the same three-scale layout::

    enc0 -> pool -> enc1 -> pool -> enc2
                                     |
    head <- dec0 <- [up0 ++ enc0] <- dec1 <- [up1 ++ enc1]

UNet / UNetF use block A in the encoder with widths (b, 2b, 4b); BUNet /
FilterNet use block B with leading kernels (7, 5, 3) and widths (b, b, 2b).
The decoder (widths 2b, b) is block A everywhere.  UNetF and FilterNet carry
an edge gate.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import NUM_CLASSES
from .autodiff import Tensor, concat, maxpool3d, softmax_channels
from .autodiff.layers import (BatchNorm3d, BlockA, BlockSpec, Conv3d, ConvSpec, Module, UpConv,
                              make_block)
from .edge_gate import GATE_MODES, EdgeGate
from .errors import ConfigurationError, FileFormatError

VARIANTS = ("UNet", "BUNet", "UNetF", "FilterNet")
ZETA_SCHEDULE = (7, 5, 3)
SCALES = 3
POOL = 2


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "FilterNet"
    base_channels: int = 16
    num_classes: int = NUM_CLASSES
    in_channels: int = 1
    gate_mode: str = "trainable_sigma"
    sigma0: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.base_channels < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ConfigurationError("channel counts must be positive (and >= 2 classes)")
        if self.gate_mode not in GATE_MODES:
            raise ConfigurationError(f"unknown gate mode {self.gate_mode!r}")

    @property
    def uses_block_b(self) -> bool:
        return self.variant in ("BUNet", "FilterNet")

    @property
    def has_gate(self) -> bool:
        return self.variant in ("UNetF", "FilterNet")

    @property
    def encoder_blocks(self) -> list:
        b = self.base_channels
        if self.uses_block_b:
            # down-sampled scales carry half of block A's (b, 2b, 4b)
            widths = (b, b, 2 * b)
            return [BlockSpec("B", w, z) for w, z in zip(widths, ZETA_SCHEDULE)]
        return [BlockSpec("A", w) for w in (b, 2 * b, 4 * b)]

    @property
    def decoder_channels(self) -> tuple:
        return (2 * self.base_channels, self.base_channels)


class SegmentationNet(Module):
    """Encoder-decoder FCN emitting channel-softmaxed probability maps."""

    def __init__(self, spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        enc = spec.encoder_blocks
        c0, c1, c2 = (blk.channels for blk in enc)
        d1, d0 = spec.decoder_channels
        self.add_child("enc0", make_block(enc[0], spec.in_channels, rng, dtype))
        self.add_child("enc1", make_block(enc[1], c0, rng, dtype))
        self.add_child("enc2", make_block(enc[2], c1, rng, dtype))
        self.add_child("up1", UpConv(c2, d1, rng, dtype))
        self.add_child("dec1", BlockA(d1 + c1, d1, rng, dtype))
        self.add_child("up0", UpConv(d1, d0, rng, dtype))
        self.add_child("dec0", BlockA(d0 + c0, d0, rng, dtype))
        self.add_child("head", Conv3d(ConvSpec((1, 1, 1), d0, spec.num_classes), rng, dtype))
        self.gate: Optional[EdgeGate] = (
            EdgeGate.create(spec.gate_mode, spec.sigma0) if spec.has_gate else None)

    # σ is appended after every module parameter
    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self.gate is not None and self.gate.trainable:
            yield prefix + "sigma", self.gate.sigma

    def encode(self, x: Tensor) -> list:
        f0 = self.enc0(x)
        f1 = self.enc1(maxpool3d(f0, POOL))
        f2 = self.enc2(maxpool3d(f1, POOL))
        return [f0, f1, f2]

    def logits(self, x) -> Tensor:
        x = _as_batch(x, self.spec.in_channels, self.parameters()[0].dtype)
        f0, f1, f2 = self.encode(x)
        h = self.dec1(concat([self.up1(f2), f1]))
        h = self.dec0(concat([self.up0(h), f0]))
        return self.head(h)

    def forward(self, x) -> Tensor:
        return softmax_channels(self.logits(x))


def _as_batch(x, in_channels: int, dtype) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=dtype))
    if x.ndim == 4:
        x = Tensor(x.data[None])
    if x.ndim != 5 or x.shape[1] != in_channels:
        raise ConfigurationError(f"expected input (B, {in_channels}, X, Y, Z), got {x.shape}")
    if any(d % (POOL ** (SCALES - 1)) for d in x.shape[2:]):
        raise ConfigurationError(f"spatial dims {x.shape[2:]} must be divisible by "
                                 f"{POOL ** (SCALES - 1)}")
    return x


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> SegmentationNet:
    """Deterministically initialized network (He-normal convs, zero biases, BN 1/0)."""
    return SegmentationNet(spec, np.random.default_rng(seed), dtype)


def forward(model: SegmentationNet, patch) -> Tensor:
    return model(patch)


# ---------------------------------------------------------------------------
# receptive field and size


def encoder_layers(spec: NetworkSpec) -> list:
    """(kernel, stride) of every spatial layer along one axis, input to bottleneck."""
    layers = []
    for s, blk in enumerate(spec.encoder_blocks):
        if s > 0:
            layers.append((POOL, POOL))
        if blk.kind == "B":
            layers.append((blk.zeta, 1))
        layers += [(3, 1), (3, 1)]
    return layers


def stack_receptive_field(layers) -> int:
    """Receptive field of a stack of (kernel, stride) layers: r += (k - 1) * jump, jump *= stride."""
    r, jump = 1, 1
    for k, s in layers:
        r += (k - 1) * jump
        jump *= s
    return r


def receptive_field(spec: NetworkSpec, input_shape: Optional[tuple] = None) -> tuple:
    """Encoder receptive field per axis.

    With ``input_shape`` each axis is clipped to the input extent, i.e. the
    portion of the field that actually exists for a patch of that size.
    """
    r = stack_receptive_field(encoder_layers(spec))
    rf = (r, r, r)
    if input_shape is not None:
        rf = tuple(min(r, int(e)) for e in input_shape[-3:])
    return rf


def parameter_count(model: Union[SegmentationNet, NetworkSpec]) -> int:
    """Trainable scalars: conv weights/biases, BN gamma/beta, sigma when trainable."""
    if isinstance(model, NetworkSpec):
        model = build(model)
    return int(sum(p.size for p in model.parameters()))


def predict_labels(maps) -> np.ndarray:
    """Per-voxel argmax over the class axis (axis -4); ties go to the lower index."""
    data = maps.data if isinstance(maps, Tensor) else np.asarray(maps)
    return np.argmax(data, axis=-4).astype(np.uint8)


def one_hot(labels: np.ndarray, num_classes: int = NUM_CLASSES, dtype=np.float32) -> np.ndarray:
    """(..., X, Y, Z) integer labels -> (..., N, X, Y, Z) one-hot maps."""
    labels = np.asarray(labels)
    out = np.eye(num_classes, dtype=dtype)[labels]
    return np.moveaxis(out, -1, -4)


# ---------------------------------------------------------------------------
# checkpoint file

MAGIC = b"FNCK"
FORMAT_VERSION = 1
_NO_GATE = 255


def save_checkpoint(model: SegmentationNet, path) -> None:
    """Write ``model`` as: magic, u32 version, spec fields, tensors.

    Spec fields: u8 variant, u32 base_channels, u32 num_classes, u32
    in_channels, u8 gate mode (255 = no gate), f32 sigma0.  Then u32 tensor
    count and per tensor u32 ndim, u32 dims, float32 payload (C order, little
    endian).  Tensor order: parameters in declaration order, then BN running
    statistics, then sigma last when a gate is present.
    """
    spec = model.spec
    tensors = [p.data for _, p in super(SegmentationNet, model).named_parameters()]
    tensors += [b for _, b in model.named_buffers()]
    if model.gate is not None:
        tensors.append(np.asarray(model.gate.sigma.data).reshape(()))
    gate = GATE_MODES.index(spec.gate_mode) if spec.has_gate else _NO_GATE
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<BIIIBf", VARIANTS.index(spec.variant), spec.base_channels,
                             spec.num_classes, spec.in_channels, gate, spec.sigma0))
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            t = np.asarray(t)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.astype("<f4").tobytes(order="C"))


def read_checkpoint_spec(path) -> NetworkSpec:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FileFormatError("checkpoint file is truncated")
    return buf


def _read_header(fh) -> NetworkSpec:
    if fh.read(4) != MAGIC:
        raise FileFormatError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {version}")
    fmt = "<BIIIBf"
    variant, base, ncls, cin, gate, sigma0 = struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))
    mode = GATE_MODES[gate] if gate != _NO_GATE else "trainable_sigma"
    return NetworkSpec(VARIANTS[variant], base, ncls, cin, mode, float(np.float32(sigma0)))


def load_checkpoint(path, dtype=np.float32) -> SegmentationNet:
    with open(path, "rb") as fh:
        spec = _read_header(fh)
        model = build(spec, 0, dtype)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            arrays.append(np.frombuffer(_read_exact(fh, 4 * n), dtype="<f4").reshape(shape))
    targets = [p for _, p in super(SegmentationNet, model).named_parameters()]
    buffers = list(model.named_buffers())
    expected = len(targets) + len(buffers) + (model.gate is not None)
    if count != expected:
        raise ConfigurationError(f"checkpoint holds {count} tensors, spec needs {expected}")
    it = iter(arrays)
    for p in targets:
        a = next(it)
        if a.shape != p.shape:
            raise ConfigurationError(f"checkpoint tensor shape {a.shape} != {p.shape}")
        p.data = a.astype(dtype)
    for module in model.modules():
        if isinstance(module, BatchNorm3d):
            module.running_mean = next(it).astype(dtype)
            module.running_var = next(it).astype(dtype)
    if model.gate is not None:
        model.gate.sigma.data = np.asarray(float(next(it)))
    return model
