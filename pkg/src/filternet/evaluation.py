"""
Overlap and surface-distance metrics, largest-component clean-up, tiled
full-leg inference and the cross-validation report.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage, stats
from scipy.spatial import cKDTree

from . import CLASS_NAMES, NUM_CLASSES
from .autodiff import Tensor, no_grad
from .data.io import DEFAULT_SPACING
from .data.patches import PATCH_SHAPE

FOREGROUND = tuple(range(1, NUM_CLASSES))
TILE_STRIDE = 40
_NEIGHBOURS = 8
METRIC_COLUMNS = ("variant", "fold", "subject_id", "class", "dsc", "assd_mm", "post_processed")
SUMMARY_COLUMNS = ("class", "variant", "metric", "n", "mean", "std", "p_vs_filternet")
REFERENCE_VARIANT = "FilterNet"


# ---------------------------------------------------------------------------
# metrics


def dsc(pred: np.ndarray, truth: np.ndarray, cls: Optional[int] = None) -> float:
    """2|P & T| / (|P| + |T|); 1.0 when both are empty."""
    p = pred == cls if cls is not None else pred.astype(bool)
    t = truth == cls if cls is not None else truth.astype(bool)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass
class SurfaceSet:
    voxels: np.ndarray      # (n, 3) integer indices, raster order
    spacing: tuple

    @property
    def points_mm(self) -> np.ndarray:
        return self.voxels * np.asarray(self.spacing, dtype=np.float64)

    def __len__(self):
        return len(self.voxels)


def extract_surface(mask: np.ndarray, spacing=DEFAULT_SPACING) -> SurfaceSet:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (the volume border counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, border_value=0)
    return SurfaceSet(np.argwhere(mask & ~interior).astype(np.int64), tuple(spacing))


def _directed(src: SurfaceSet, dst: SurfaceSet) -> np.ndarray:
    """Exact nearest-neighbour distances from every src voxel to dst, in mm.

    The k-d tree proposes candidates; distances are recomputed from integer
    offsets so that equal-distance ties resolve to the same value a direct
    scan would produce.
    """
    s = np.asarray(src.spacing, dtype=np.float64)
    tree = cKDTree(dst.points_mm)
    k = min(_NEIGHBOURS, len(dst))
    d, idx = tree.query(src.points_mm, k=k)
    d, idx = d.reshape(len(src), k), idx.reshape(len(src), k)
    diff = (src.voxels[:, None, :] - dst.voxels[idx]) * s
    out = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    # rows whose k candidates are all near-ties may have further tied neighbours
    if k < len(dst):
        for n in np.flatnonzero(d[:, -1] <= d[:, 0] * (1 + 1e-9) + 1e-9):
            cand = tree.query_ball_point(src.points_mm[n], d[n, 0] * (1 + 1e-9) + 1e-9)
            diff = (src.voxels[n] - dst.voxels[cand]) * s
            out[n] = np.sqrt((diff ** 2).sum(-1)).min()
    return out


def assd(a: SurfaceSet, b: SurfaceSet) -> float:
    """Symmetric mean surface distance over the union of both directed sets; NaN if a set is empty."""
    if len(a) == 0 or len(b) == 0:
        return math.nan
    dab, dba = _directed(a, b), _directed(b, a)
    return float((dab.sum() + dba.sum()) / (len(a) + len(b)))


def assd_masks(pred_mask, truth_mask, spacing=DEFAULT_SPACING) -> float:
    return assd(extract_surface(pred_mask, spacing), extract_surface(truth_mask, spacing))


def largest_component(labels: np.ndarray, classes: Sequence[int] = FOREGROUND) -> np.ndarray:
    """Keep only the largest 6-connected component of each class; the rest becomes background.

    Ties go to the component found first in raster order.
    """
    out = np.array(labels, copy=True)
    for c in classes:
        lab, n = ndimage.label(labels == c)
        if n <= 1:
            continue
        sizes = np.bincount(lab.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[(lab > 0) & (lab != keep)] = 0
    return out


def leg_metrics(pred: np.ndarray, truth: np.ndarray, spacing=DEFAULT_SPACING) -> dict:
    """{class: (dsc, assd_mm)} over the foreground classes."""
    return {c: (dsc(pred, truth, c), assd_masks(pred == c, truth == c, spacing))
            for c in FOREGROUND}


# ---------------------------------------------------------------------------
# inference


def tile_origins(extent: int, size: int, stride: int) -> list:
    if extent < size:
        raise ValueError(f"volume extent {extent} smaller than patch {size}")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return starts


def model_predictor(model, batch: int = 2) -> Callable:
    """Wrap a network as a function from (B, 1, X, Y, Z) arrays to probabilities."""
    dtype = model.parameters()[0].dtype

    def predict(x: np.ndarray) -> np.ndarray:
        model.eval()
        outs = []
        with no_grad():
            for i in range(0, len(x), batch):
                outs.append(model(Tensor(np.asarray(x[i:i + batch], dtype=dtype))).data)
        return np.concatenate(outs)

    return predict


def predict_volume(predictor: Callable, image: np.ndarray, patch=PATCH_SHAPE,
                   stride: int = TILE_STRIDE, batch: int = 2) -> np.ndarray:
    """Overlap-averaged probabilities (N, X, Y, Z) from tiled patches."""
    X, Y, Z = image.shape
    origins = [(x, y, z) for x in tile_origins(X, patch[0], stride)
               for y in tile_origins(Y, patch[1], stride)
               for z in tile_origins(Z, patch[2], stride)]
    acc, count = None, np.zeros(image.shape, dtype=np.float64)
    for i in range(0, len(origins), batch):
        group = origins[i:i + batch]
        x = np.stack([image[a:a + patch[0], b:b + patch[1], c:c + patch[2]][None]
                      for a, b, c in group])
        probs = predictor(x)
        if acc is None:
            acc = np.zeros((probs.shape[1],) + image.shape, dtype=np.float64)
        for (a, b, c), p in zip(group, probs):
            acc[:, a:a + patch[0], b:b + patch[1], c:c + patch[2]] += p
            count[a:a + patch[0], b:b + patch[1], c:c + patch[2]] += 1
    return acc / count


def segment(predictor: Callable, image: np.ndarray, post_process: bool = False,
            **kw) -> np.ndarray:
    labels = np.argmax(predict_volume(predictor, image, **kw), axis=0).astype(np.uint8)
    return largest_component(labels) if post_process else labels


# ---------------------------------------------------------------------------
# fold evaluation and reporting


@dataclass
class MetricsRecord:
    variant: str
    fold: int
    subject_id: str
    cls: int
    dsc: float
    assd_mm: float
    post_processed: bool = False

    def row(self) -> list:
        return [self.variant, self.fold, self.subject_id, CLASS_NAMES[self.cls],
                repr(self.dsc), "" if math.isnan(self.assd_mm) else repr(self.assd_mm),
                str(self.post_processed).lower()]


@dataclass
class SubjectLegs:
    subject_id: str
    legs: dict = field(default_factory=dict)   # side -> (image, labels[, spacing])
    spacing: tuple = DEFAULT_SPACING


@dataclass
class FoldResult:
    records: list
    leg_records: list
    flagged: list      # (subject_id, reason)


def combine_legs(per_leg: Sequence[dict]) -> tuple:
    """Average per-class metrics over legs; returns (metrics, flags)."""
    flags = []
    out = {}
    for c in FOREGROUND:
        d = [m[c][0] for m in per_leg]
        a = [m[c][1] for m in per_leg if not math.isnan(m[c][1])]
        if len(a) < len(per_leg):
            flags.append(f"undefined ASSD for {CLASS_NAMES[c]}")
        out[c] = (float(np.mean(d)), float(np.mean(a)) if a else math.nan)
    return out, flags


def evaluate_fold(predictor: Callable, subjects: Sequence[SubjectLegs], fold: int = 0,
                  variant: str = REFERENCE_VARIANT, post_process: bool = False,
                  **kw) -> FoldResult:
    """Per-leg metrics averaged to one record per subject and class."""
    records, leg_records, flagged = [], [], []
    for subj in subjects:
        per_leg = []
        for side in ("left", "right"):
            if side not in subj.legs:
                continue
            image, truth = subj.legs[side][:2]
            spacing = subj.legs[side][2] if len(subj.legs[side]) > 2 else subj.spacing
            pred = segment(predictor, image, post_process, **kw)
            m = leg_metrics(pred, truth, spacing)
            per_leg.append(m)
            leg_records.append((subj.subject_id, side, m))
        if len(per_leg) == 0:
            flagged.append((subj.subject_id, "no legs"))
            continue
        if len(per_leg) == 1:
            flagged.append((subj.subject_id, "single leg"))
        combined, flags = combine_legs(per_leg)
        flagged += [(subj.subject_id, f) for f in flags]
        for c, (d, a) in combined.items():
            records.append(MetricsRecord(variant, fold, subj.subject_id, c, d, a, post_process))
    return FoldResult(records, leg_records, flagged)


@dataclass
class PairedT:
    t: float
    p: float
    n: int
    degenerate: bool


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> PairedT:
    """Two-sided paired t-test on a - b.

    With zero variance of the differences the statistic is undefined; the
    result is flagged degenerate with p = 1 when the samples agree exactly
    and p = 0 when they differ by a constant.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    n = d.size
    if n < 2:
        return PairedT(math.nan, math.nan, n, True)
    mean = d.sum() / n
    var = ((d - mean) ** 2).sum() / (n - 1)
    if var == 0.0:
        return PairedT(math.nan, 1.0 if mean == 0.0 else 0.0, n, True)
    t = mean / math.sqrt(var / n)
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return PairedT(float(t), float(p), n, False)


def report(records: Sequence[MetricsRecord], reference: str = REFERENCE_VARIANT) -> list:
    """Summary rows: per class, variant and metric the mean, population std and the
    paired p-value against the reference variant (matched by subject)."""
    if not records:
        raise ValueError("report needs at least one record")
    by = defaultdict(dict)
    for r in records:
        by[(r.variant, r.cls, "dsc")][(r.fold, r.subject_id)] = r.dsc
        by[(r.variant, r.cls, "assd_mm")][(r.fold, r.subject_id)] = r.assd_mm
    rows = []
    variants = sorted({r.variant for r in records}, key=lambda v: (v != reference, v))
    for c in sorted({r.cls for r in records}):
        for v in variants:
            for metric in ("dsc", "assd_mm"):
                vals = {k: x for k, x in by[(v, c, metric)].items() if not math.isnan(x)}
                arr = np.array(list(vals.values()))
                mean = float(arr.mean()) if arr.size else math.nan
                std = float(arr.std()) if arr.size else math.nan
                p = ""
                ref = by.get((reference, c, metric), {})
                if v != reference and ref:
                    keys = sorted(k for k in vals if k in ref and not math.isnan(ref[k]))
                    test = paired_t_test([ref[k] for k in keys], [vals[k] for k in keys])
                    p = "" if math.isnan(test.p) else repr(test.p)
                rows.append({"class": CLASS_NAMES[c], "variant": v, "metric": metric,
                             "n": int(arr.size), "mean": mean, "std": std, "p_vs_filternet": p})
    return rows


def write_metrics(records: Sequence[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow(r.row())


def read_metrics(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(row["variant"], int(row["fold"]), row["subject_id"],
                                     CLASS_NAMES.index(row["class"]), float(row["dsc"]),
                                     float(row["assd_mm"]) if row["assd_mm"] else math.nan,
                                     row["post_processed"] == "true"))
    return out


def write_summary(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def write_plot_data(rows: Sequence[dict], path) -> None:
    """One row per (variant, class) with the DSC and ASSD means."""
    table = defaultdict(dict)
    for r in rows:
        table[(r["variant"], r["class"])][r["metric"]] = r["mean"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "class", "dsc_mean", "assd_mm_mean"])
        for (v, c), m in table.items():
            w.writerow([v, c, m.get("dsc", ""), m.get("assd_mm", "")])


def write_flagged(flagged: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "reason"])
        w.writerows(flagged)
