"""
Unsupervised preprocessing: bias correction, intensity normalization, Otsu
foreground, k-means leg localization and extraction to a fixed leg-area grid.

None of these functions look at labels; label volumes only follow the
geometry decided from the image.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError, DegenerateInputError, LocalizationError
from .io import DEFAULT_SPACING

LEG_SHAPE = (160, 160, 28)
BIAS_SIGMA = (25.0, 25.0, 0.0)
OTSU_BINS = 256
KMEANS_MAX_ITER = 100
# components smaller than this fraction of the foreground are discarded as noise
MIN_COMPONENT_FRACTION = 0.005


def normalize(v: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance."""
    v = np.asarray(v, dtype=np.float64)
    std = v.std()
    if not std > 0 or std < 1e-12 * max(1.0, abs(v.mean())):
        raise DegenerateInputError("cannot normalize a constant volume")
    return (v - v.mean()) / std


def otsu_threshold(v: np.ndarray, bins: int = OTSU_BINS) -> float:
    """Histogram threshold maximizing between-class variance.

    Candidate thresholds are the interior bin edges; voxels ``>= t`` are
    foreground.  Ties go to the lowest candidate.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if not hi > lo:
        raise DegenerateInputError("Otsu threshold needs at least two distinct values")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    s0 = np.cumsum(hist * centres)[:-1]
    total, s_total = float(hist.sum()), float((hist * centres).sum())
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - (s_total - s0) / w1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, -np.inf)
    return float(edges[int(np.argmax(between)) + 1])


def bias_correct(v: np.ndarray, sigma=BIAS_SIGMA) -> np.ndarray:
    """Homomorphic gain removal: divide by a broad in-plane blur of the tissue.

    The blur is a normalized convolution over the Otsu foreground so that the
    dark background does not drag the gain estimate down near the tissue
    border.  The result is rescaled to the input mean.
    """
    v = np.asarray(v, dtype=np.float64)
    shift = 0.0
    if v.min() <= 0:
        shift = 1e-3 * max(float(np.ptp(v)), 1.0) - v.min()
    s = v + shift
    try:
        mask = (s >= otsu_threshold(s)).astype(np.float64)
    except DegenerateInputError:
        return v.copy()
    num = ndimage.gaussian_filter(s * mask, sigma, mode="reflect")
    den = ndimage.gaussian_filter(mask, sigma, mode="reflect")
    floor = 1e-3 * den.max()
    gain = np.where(den > floor, num / np.maximum(den, floor), 0.0)
    # where no tissue is nearby fall back to the global tissue mean
    fallback = float((s * mask).sum() / mask.sum())
    gain = np.where(gain > 0, gain, fallback) / fallback
    out = s / gain - shift
    if v.mean() != 0 and out.mean() != 0:
        out = out * (v.mean() / out.mean())
    return out


# ---------------------------------------------------------------------------
# legs


@dataclass(frozen=True)
class LegBox:
    """Half-open in-plane box [x0, x1) x [y0, y1); z is kept whole."""

    x0: int
    x1: int
    y0: int
    y1: int
    side: str

    @property
    def mirror(self) -> bool:
        return self.side == "right"


def foreground_mask(v: np.ndarray) -> np.ndarray:
    mask = v >= otsu_threshold(v)
    lab, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = np.bincount(lab.ravel())[1:]
    keep = np.flatnonzero(sizes >= MIN_COMPONENT_FRACTION * sizes.sum()) + 1
    return np.isin(lab, keep)


def kmeans_1d(values: np.ndarray, max_iter: int = KMEANS_MAX_ITER) -> tuple:
    """Two-means on scalars seeded at the 25th/75th percentiles.

    Returns ``(assignment, centres)`` with cluster 0 the lower centre.
    """
    x = np.asarray(values, dtype=np.float64)
    c = np.percentile(x, [25.0, 75.0])
    assign = None
    for _ in range(max_iter):
        new = (np.abs(x - c[1]) < np.abs(x - c[0])).astype(np.int64)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for k in (0, 1):
            if np.any(assign == k):
                c[k] = x[assign == k].mean()
    if c[0] > c[1]:
        assign, c = 1 - assign, c[::-1]
    return assign, c


def localize_legs(v: np.ndarray) -> list:
    """Two boxes (left = smaller x first), from k-means on foreground x positions."""
    mask = foreground_mask(v)
    coords = np.argwhere(mask)
    if coords.shape[0] < 2:
        raise LocalizationError("no foreground found")
    assign, _ = kmeans_1d(coords[:, 0])
    if assign.min() == assign.max():
        raise LocalizationError("k-means produced a single cluster")
    # a connected component spanning both clusters means the legs touch
    lab, _ = ndimage.label(mask)
    comp = lab[tuple(coords.T)]
    left_comps = set(np.unique(comp[assign == 0]))
    right_comps = set(np.unique(comp[assign == 1]))
    if left_comps & right_comps:
        raise LocalizationError("foreground is a single connected region; legs not separable")
    boxes = []
    for k, side in ((0, "left"), (1, "right")):
        pts = coords[assign == k]
        boxes.append(LegBox(int(pts[:, 0].min()), int(pts[:, 0].max()) + 1,
                            int(pts[:, 1].min()), int(pts[:, 1].max()) + 1, side))
    return boxes


def _axis_coords(start: int, stop: int, n: int) -> np.ndarray:
    """n sample positions spanning [start, stop - 1] with the end points included."""
    if n == 1 or stop - start == 1:
        return np.full(n, float(start) if n > 1 else (start + stop - 1) / 2.0)
    return start + np.arange(n) * ((stop - 1 - start) / (n - 1))


def resample(data: np.ndarray, box: LegBox, shape=LEG_SHAPE, order: int = 1) -> np.ndarray:
    """Crop ``box`` and resample to ``shape`` (align-corners grid, order 1 or 0)."""
    W, H, D = data.shape
    if not (0 <= box.x0 < box.x1 <= W and 0 <= box.y0 < box.y1 <= H):
        raise ConfigurationError(f"box {box} lies outside a volume of shape {data.shape}")
    gx = _axis_coords(box.x0, box.x1, shape[0])
    gy = _axis_coords(box.y0, box.y1, shape[1])
    gz = _axis_coords(0, D, shape[2])
    if order == 0:
        ix, iy, iz = (np.rint(g).astype(np.int64) for g in (gx, gy, gz))
        return data[np.ix_(ix, iy, iz)]
    grid = np.meshgrid(gx, gy, gz, indexing="ij")
    return ndimage.map_coordinates(np.asarray(data, dtype=np.float64), grid, order=1,
                                   mode="nearest")


def extract_and_standardize(v: np.ndarray, box: LegBox, labels: np.ndarray = None,
                            shape=LEG_SHAPE):
    """Crop + resize to the leg-area grid, mirrored in x for the right leg.

    With ``labels`` returns ``(image, labels)``; labels use nearest sampling.
    """
    img = resample(v, box, shape, order=1)
    lab = None if labels is None else resample(labels, box, shape, order=0)
    if box.mirror:
        img = img[::-1].copy()
        lab = None if lab is None else lab[::-1].copy()
    return img if labels is None else (img, lab)


def mirror(v: np.ndarray) -> np.ndarray:
    return np.asarray(v)[::-1].copy()


@dataclass
class Leg:
    side: str
    image: np.ndarray           # LEG_SHAPE float32, zero mean / unit variance
    labels: Optional[np.ndarray]
    box: LegBox
    spacing: tuple              # mm per voxel on the resampled grid


def resampled_spacing(box: LegBox, spacing, shape=LEG_SHAPE, depth: int = None) -> tuple:
    """Voxel size after mapping ``box`` onto ``shape`` with the align-corners grid."""
    extents = (box.x1 - box.x0, box.y1 - box.y0, shape[2] if depth is None else depth)
    return tuple(float(s) * (e - 1) / (n - 1) if n > 1 and e > 1 else float(s)
                 for s, e, n in zip(spacing, extents, shape))


def preprocess_legs(v: np.ndarray, labels: np.ndarray = None, spacing=DEFAULT_SPACING,
                    shape=LEG_SHAPE) -> list:
    """bias_correct -> normalize -> localize -> extract, for both legs (left first).

    Each image is re-standardized after resampling.
    """
    corrected = normalize(bias_correct(v))
    out = []
    for box in localize_legs(corrected):
        if labels is None:
            img, lab = extract_and_standardize(corrected, box, shape=shape), None
        else:
            img, lab = extract_and_standardize(corrected, box, labels, shape)
        out.append(Leg(box.side, normalize(img).astype(np.float32), lab, box,
                       resampled_spacing(box, spacing, shape, v.shape[2])))
    return out


def preprocess_scan(v: np.ndarray, labels: np.ndarray = None) -> list:
    """``[(side, image, labels_or_None), ...]`` from :func:`preprocess_legs`."""
    return [(leg.side, leg.image, leg.labels) for leg in preprocess_legs(v, labels)]
