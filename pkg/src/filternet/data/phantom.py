"""
Synthetic two-leg calf phantoms standing in for the MR data.

Each leg is a quasi-circular cross-section: a bright fat ring around five
angular muscle compartments separated by thin dark septa, plus two small
background "bones".  Every compartment draws its texture from the same
distribution, so only the septa and the geometry tell them apart.  Disease
brightens random blobs inside compartments; an optional multiplicative
low-frequency field mimics coil bias.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError
from .io import DEFAULT_SPACING

LEG_DIMS = (160, 160, 28)
N_COMPARTMENTS = 5
# nominal angular widths (degrees) of TA, TP, Sol, Gas, PL; jittered per subject
SECTOR_WIDTHS = (60.0, 45.0, 95.0, 110.0, 50.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    dims: tuple = LEG_DIMS
    texture_mean: float = 0.60
    texture_std: float = 0.08
    fat_mean: float = 0.85
    septum_mean: float = 0.25
    disease_fraction: float = 0.0
    bias_field_amplitude: float = 0.0
    symmetric: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigurationError(f"dims must be three extents >= 8, got {self.dims}")
        if not 0.0 <= self.disease_fraction <= 1.0:
            raise ConfigurationError("disease_fraction must lie in [0, 1]")
        if not 0.0 <= self.bias_field_amplitude <= 0.3:
            raise ConfigurationError("bias_field_amplitude must lie in [0, 0.3]")

    @property
    def scan_dims(self) -> tuple:
        """Both legs side by side along x."""
        W, H, D = self.dims
        return (2 * W, H, D)


PHANTOM_KEYS = frozenset(f.name for f in fields(PhantomSpec))


def parse_phantom_spec(text: str, **overrides) -> PhantomSpec:
    """Flat ``key = value`` lines with ``#`` comments; unknown keys are errors naming the key."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in PHANTOM_KEYS:
            raise ConfigurationError(f"unknown phantom spec key {key!r} (line {lineno})")
        try:
            if key == "dims":
                values[key] = tuple(int(v) for v in raw.strip("()[] ").replace(",", " ").split())
            elif key == "seed":
                values[key] = int(raw)
            elif key == "symmetric":
                values[key] = raw.lower() in ("1", "true", "yes")
            else:
                values[key] = float(raw)
        except ValueError:
            raise ConfigurationError(f"{key}: cannot parse value {raw!r}") from None
    values.update(overrides)
    return PhantomSpec(**values)


@dataclass
class Phantom:
    image: np.ndarray       # (2W, H, D) float32 in [0, 1]
    labels: np.ndarray      # (2W, H, D) uint8
    subject_id: str
    diseased: bool
    spacing: tuple = DEFAULT_SPACING


def _leg_anatomy(rng, dims):
    """Random geometric parameters for one leg."""
    W, H, _ = dims
    widths = np.array(SECTOR_WIDTHS) * rng.uniform(0.85, 1.15, N_COMPARTMENTS)
    widths = widths / widths.sum() * 2 * np.pi
    return {
        "radius": 0.40 * min(W, H) * rng.uniform(0.92, 1.0),
        "fat": rng.uniform(4.0, 6.0),
        "harmonics": rng.normal(0.0, 0.03, size=(3, 2)),
        "phase0": rng.uniform(-0.3, 0.3),
        "widths": widths,
        "wobble": rng.uniform(0.05, 0.12, N_COMPARTMENTS),
        "wobble_phase": rng.uniform(0, 2 * np.pi, N_COMPARTMENTS),
        "centre": np.array([W / 2.0, H / 2.0]) + rng.uniform(-3, 3, 2),
        "bones": [(rng.uniform(0.15, 0.25), rng.uniform(-0.4, 0.4), rng.uniform(5.0, 7.0)),
                  (rng.uniform(0.25, 0.35), rng.uniform(0.8, 1.4), rng.uniform(3.0, 4.5))],
    }


def _leg_labels(anat, dims) -> np.ndarray:
    """Label volume (W, H, D) of one left-oriented leg."""
    W, H, D = dims
    x, y = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64),
                       indexing="ij")
    dx, dy = x - anat["centre"][0], y - anat["centre"][1]
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), 2 * np.pi)
    labels = np.zeros((W, H, D), dtype=np.uint8)
    bounds0 = np.concatenate([[0.0], np.cumsum(anat["widths"])])
    for z in range(D):
        t = z / max(D - 1, 1)
        shape = 1.0
        for k, (a, b) in enumerate(anat["harmonics"], start=2):
            shape = shape + a * np.cos(k * theta + 2 * t) + b * np.sin(k * theta - t)
        outer = anat["radius"] * (1.0 + 0.04 * np.sin(np.pi * t)) * shape
        inner = outer - anat["fat"]
        # sector boundaries drift smoothly with depth
        drift = anat["wobble"] * np.sin(2 * np.pi * t + anat["wobble_phase"])
        bounds = bounds0[:-1] + anat["phase0"] + np.concatenate([[0.0], drift[1:]])
        rel = np.mod(theta - bounds[0], 2 * np.pi)
        edges = np.mod(bounds - bounds[0], 2 * np.pi)
        comp = np.searchsorted(edges, rel, side="right")  # 1..5
        sl = np.where(r < inner, comp, 0).astype(np.uint8)
        for frac, ang, rad in anat["bones"]:
            bx = anat["centre"][0] + frac * anat["radius"] * np.cos(ang + anat["phase0"])
            by = anat["centre"][1] + frac * anat["radius"] * np.sin(ang + anat["phase0"])
            sl[np.hypot(x - bx, y - by) < rad] = 0
        labels[:, :, z] = sl
    return labels


def _septa(labels: np.ndarray) -> np.ndarray:
    """In-plane voxels of a compartment touching a different compartment."""
    out = np.zeros(labels.shape, dtype=bool)
    fg = labels > 0
    for axis in (0, 1):
        for step in (1, -1):
            nb = np.roll(labels, step, axis=axis)
            out |= fg & (nb > 0) & (nb != labels)
    return out


def _leg_image(rng, labels, anat, spec: PhantomSpec, diseased: bool) -> np.ndarray:
    W, H, D = labels.shape
    img = np.abs(rng.normal(0.0, 0.02, size=labels.shape))
    muscle = labels > 0
    img[muscle] = rng.normal(spec.texture_mean, spec.texture_std, size=int(muscle.sum()))
    x, y = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
    r = np.hypot(x - anat["centre"][0], y - anat["centre"][1])
    body = ndimage.binary_fill_holes(muscle | (r < 0.2 * anat["radius"])[..., None],
                                     structure=np.ones((3, 3, 1)))
    # fat: a ring of width anat["fat"] outside the muscle
    grown = ndimage.binary_dilation(body, structure=np.ones((3, 3, 1)),
                                    iterations=int(round(anat["fat"])))
    fat = grown & ~muscle & ~body
    img[fat] = rng.normal(spec.fat_mean, 0.04, size=int(fat.sum()))
    bones = body & ~muscle
    img[bones] = rng.normal(0.10, 0.02, size=int(bones.sum()))
    sep = _septa(labels)
    img[sep] = rng.normal(spec.septum_mean, 0.04, size=int(sep.sum()))
    if diseased:
        for _ in range(int(rng.integers(2, 5))):
            k = int(rng.integers(1, N_COMPARTMENTS + 1))
            pts = np.argwhere(labels == k)
            cx, cy, cz = pts[rng.integers(len(pts))]
            rad = rng.uniform(6.0, 14.0)
            zz = np.arange(D)[None, None, :]
            blob = np.exp(-(((x - cx) ** 2 + (y - cy) ** 2)[..., None] / (2 * rad ** 2)
                            + (zz - cz) ** 2 / (2 * (rad / 4) ** 2)))
            img += 0.3 * blob * (labels == k)
    return img


def _bias_field(rng, shape, amplitude):
    W, H, D = shape
    u = np.linspace(-1, 1, W)[:, None, None]
    v = np.linspace(-1, 1, H)[None, :, None]
    w = np.linspace(-1, 1, D)[None, None, :]
    a, b, c, ph = rng.uniform(-1, 1, 4)
    f = a * u + b * v + 0.5 * c * u * v + 0.2 * np.cos(np.pi * (u + ph)) + 0.1 * w
    f = f / np.abs(f).max()
    return 1.0 + amplitude * f


def generate_phantom(spec: PhantomSpec, index: int = 0) -> Phantom:
    """One two-leg scan, fully determined by (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    diseased = bool(rng.random() < spec.disease_fraction)
    legs_img, legs_lab = [], []
    left_anat = _leg_anatomy(rng, spec.dims)
    for side in ("left", "right"):
        anat = left_anat if (side == "left" or spec.symmetric) else _leg_anatomy(rng, spec.dims)
        labels = _leg_labels(anat, spec.dims)
        if side == "left" or not spec.symmetric:
            img = _leg_image(rng, labels, anat, spec, diseased)
        else:
            img = legs_img[0]
        legs_img.append(img)
        legs_lab.append(labels)
    # the right leg is a mirrored left-type anatomy
    image = np.concatenate([legs_img[0], legs_img[1][::-1]], axis=0)
    labels = np.concatenate([legs_lab[0], legs_lab[1][::-1]], axis=0)
    if spec.bias_field_amplitude > 0:
        field = _bias_field(rng, image.shape, spec.bias_field_amplitude)
        if spec.symmetric:
            half = field[: image.shape[0] // 2]
            field = np.concatenate([half, half[::-1]], axis=0)
        image = image * field
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Phantom(image, labels, f"S{index:03d}", diseased)


def generate_phantoms(spec: PhantomSpec, count: int) -> list:
    return [generate_phantom(spec, i) for i in range(count)]
