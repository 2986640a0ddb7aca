"""
Fold-level orchestration: load standardized legs, train on one split, evaluate
on the held-out subjects.  Shared by the command line and the experiment tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data.io import ManifestEntry, read_manifest, read_volume, resolve, write_manifest, write_volume
from .data.patches import training_patches
from .data.phantom import Phantom
from .data.preprocess import preprocess_legs
from .data.split import SplitPlan, make_split
from .errors import ConfigurationError, DegenerateInputError, LocalizationError
from .evaluation import FoldResult, SubjectLegs, evaluate_fold, model_predictor
from .models import SegmentationNet
from .training import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


def run_label(cfg: TrainConfig) -> str:
    """Name used in metric files: the variant, tagged when the gate or post-processing differ."""
    tags = []
    if cfg.network.has_gate and cfg.gate_mode != "trainable_sigma":
        tags.append("FL" if cfg.gate_mode == "laplacian_only" else f"sigma{cfg.sigma0:g}")
    if cfg.post_process == "lcc":
        tags.append("lcc")
    return "-".join([cfg.variant] + tags)


# ---------------------------------------------------------------------------
# data


def legs_from_phantom(ph: Phantom) -> SubjectLegs:
    """Run the unsupervised pipeline on one phantom scan."""
    legs = preprocess_legs(ph.image, ph.labels, ph.spacing)
    subj = SubjectLegs(ph.subject_id, spacing=ph.spacing)
    for leg in legs:
        subj.legs[leg.side] = (leg.image, leg.labels, leg.spacing)
    return subj


def preprocess_manifest(manifest_path, out_dir) -> tuple:
    """Standardize every scan listed in ``manifest_path`` into ``out_dir``.

    Returns ``(written_entries, failures)``; failures are (subject_id, reason)
    for scans whose legs could not be separated.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, failures = [], []
    for e in read_manifest(manifest_path):
        data, spacing = read_volume(resolve(manifest_path, e.path))
        labels = read_volume(resolve(manifest_path, e.label_path))[0] if e.label_path else None
        try:
            legs = preprocess_legs(data, labels, spacing)
        except (LocalizationError, DegenerateInputError) as exc:
            log.warning("skipping %s: %s", e.subject_id, exc)
            failures.append((e.subject_id, str(exc)))
            continue
        for leg in legs:
            name = f"{e.subject_id}_{leg.side}.mvl"
            write_volume(out / name, leg.image, leg.spacing)
            lab_name = ""
            if leg.labels is not None:
                lab_name = f"{e.subject_id}_{leg.side}_label.mvl"
                write_volume(out / lab_name, leg.labels.astype(np.uint8), leg.spacing)
            entries.append(ManifestEntry(name, e.subject_id, leg.side, e.cohort, lab_name))
    write_manifest(out / "manifest.csv", entries)
    return entries, failures


def load_legs(manifest_path) -> dict:
    """subject_id -> SubjectLegs from a manifest of standardized, labelled legs."""
    subjects = {}
    for e in read_manifest(manifest_path):
        if e.side not in ("left", "right"):
            raise ConfigurationError(f"{e.path}: expected a single-leg entry, got side {e.side!r}")
        if not e.label_path:
            raise ConfigurationError(f"{e.path}: training and evaluation need a label volume")
        img, spacing = read_volume(resolve(manifest_path, e.path))
        lab = read_volume(resolve(manifest_path, e.label_path))[0]
        subj = subjects.setdefault(e.subject_id, SubjectLegs(e.subject_id, spacing=spacing))
        subj.legs[e.side] = (img.astype(np.float32), lab.astype(np.uint8), spacing)
    return subjects


# ---------------------------------------------------------------------------
# folds


def plan_for(cfg: TrainConfig, subjects: dict) -> SplitPlan:
    return make_split(list(subjects), cfg.folds, cfg.seed)


def fold_patches(cfg: TrainConfig, subjects: dict, ids: Sequence[str]) -> list:
    legs = [subjects[s].legs[side][:2] for s in sorted(ids) for side in ("left", "right")
            if side in subjects[s].legs]
    return training_patches(legs, cfg.seed, cfg.augment)


def train_fold(cfg: TrainConfig, subjects: dict, fold: int, out_dir=None,
               on_step: Optional[Callable] = None) -> TrainResult:
    plan = plan_for(cfg, subjects)
    patches = fold_patches(cfg, subjects, plan.train_subjects(fold))
    log.info("fold %d: %d training patches", fold, len(patches))
    return train(cfg, patches, out_dir, on_step)


def evaluate_model(model: SegmentationNet, cfg: TrainConfig, subjects: dict, fold: int,
                   post_process: Optional[bool] = None) -> FoldResult:
    plan = plan_for(cfg, subjects)
    pp = cfg.post_process == "lcc" if post_process is None else post_process
    test = [subjects[s] for s in plan.test_subjects(fold)]
    return evaluate_fold(model_predictor(model), test, fold, run_label(cfg), pp)


@dataclass
class CrossValResult:
    label: str
    records: list
    flagged: list
    train_results: list     # one TrainResult per fold


def crossval(cfg: TrainConfig, subjects: dict, out_dir=None,
             on_step: Optional[Callable] = None) -> CrossValResult:
    """Train and evaluate every fold; each subject is tested exactly once."""
    records, flagged, results = [], [], []
    for fold in range(cfg.folds):
        fold_dir = None if out_dir is None else Path(out_dir) / f"fold_{fold}"
        res = train_fold(cfg, subjects, fold, fold_dir, on_step)
        ev = evaluate_model(res.model, cfg, subjects, fold)
        records += ev.records
        flagged += ev.flagged
        results.append(res)
    return CrossValResult(run_label(cfg), records, flagged, results)
