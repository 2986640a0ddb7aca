"""Fixed-grid patch extraction and in-plane rotation/scaling augmentation."""

from __future__ import annotations

import itertools
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError
from .preprocess import LEG_SHAPE

PATCH_SHAPE = (120, 120, 28)
PATCH_STRIDE = 20
N_AUGMENT = 3
MAX_ANGLE_DEG = 10.0
SCALE_RANGE = (0.8, 1.2)


def patch_origins(leg_shape=LEG_SHAPE, patch_shape=PATCH_SHAPE, stride=PATCH_STRIDE) -> list:
    """In-plane origins on a regular grid; z always starts at 0."""
    xs = range(0, leg_shape[0] - patch_shape[0] + 1, stride)
    ys = range(0, leg_shape[1] - patch_shape[1] + 1, stride)
    return [(x, y, 0) for x, y in itertools.product(xs, ys)]


def extract_patches(leg: np.ndarray, labels: Optional[np.ndarray] = None,
                    leg_shape=LEG_SHAPE, patch_shape=PATCH_SHAPE, stride=PATCH_STRIDE) -> list:
    """Patches of a standardized leg: a list of arrays, or of (image, labels) pairs."""
    if tuple(leg.shape) != tuple(leg_shape):
        raise ConfigurationError(f"leg volume must be {tuple(leg_shape)}, got {leg.shape}")
    if labels is not None and labels.shape != leg.shape:
        raise ConfigurationError("label volume shape differs from the image")
    px, py, pz = patch_shape
    out = []
    for x, y, z in patch_origins(leg_shape, patch_shape, stride):
        sl = (slice(x, x + px), slice(y, y + py), slice(z, z + pz))
        out.append(leg[sl] if labels is None else (leg[sl], labels[sl]))
    return out


def draw_transform(rng: np.random.Generator) -> tuple:
    """(angle in degrees, (scale_x, scale_y))."""
    angle = rng.uniform(-MAX_ANGLE_DEG, MAX_ANGLE_DEG)
    scales = tuple(rng.uniform(*SCALE_RANGE, size=2))
    return float(angle), (float(scales[0]), float(scales[1]))


def transform_pair(patch: np.ndarray, labels: Optional[np.ndarray], angle_deg: float,
                   scales=(1.0, 1.0)):
    """Rotate and scale every x-y slice about the patch centre.

    Images use linear interpolation, labels nearest neighbour; outside samples
    are 0.  Output shapes equal the input shapes.
    """
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    forward = rot @ np.diag(scales)
    inv = np.linalg.inv(forward)
    M = np.eye(3)
    M[:2, :2] = inv
    centre = (np.array(patch.shape[:3], dtype=np.float64) - 1) / 2.0
    offset = centre - M @ centre
    img = ndimage.affine_transform(np.asarray(patch, dtype=np.float64), M, offset, order=1,
                                   mode="constant", cval=0.0).astype(patch.dtype)
    if labels is None:
        return img, None
    lab = ndimage.affine_transform(labels, M, offset, order=0, mode="constant", cval=0)
    return img, lab.astype(labels.dtype)


def augment(patch: np.ndarray, labels: np.ndarray, seed) -> list:
    """Three extra (image, labels) pairs with random rotation in [-10, 10] deg and scales in [0.8, 1.2]."""
    rng = np.random.default_rng(seed)
    return [transform_pair(patch, labels, *draw_transform(rng)) for _ in range(N_AUGMENT)]


def training_patches(legs, seed: int = 0, do_augment: bool = True, leg_shape=LEG_SHAPE,
                     patch_shape=PATCH_SHAPE, stride=PATCH_STRIDE) -> list:
    """All patches (plus augmentations) of a list of (image, labels) legs.

    Images come back with a leading channel axis, ready for the network.
    Augmentation seeds are derived from (seed, leg index, patch index), so the
    set is generated once and is reproducible.
    """
    out = []
    for li, (img, lab) in enumerate(legs):
        for pi, (p, l) in enumerate(extract_patches(img, lab, leg_shape, patch_shape, stride)):
            p = np.asarray(p, dtype=np.float32)
            out.append((p[None], np.asarray(l, dtype=np.uint8)))
            if do_augment:
                for ap, al in augment(p, l, [seed, li, pi]):
                    out.append((ap[None], al))
    return out
