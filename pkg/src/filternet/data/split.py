"""Subject-level k-fold splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError


@dataclass(frozen=True)
class SplitPlan:
    k: int
    groups: tuple
    seed: int

    def test_subjects(self, fold: int) -> list:
        if not 0 <= fold < self.k:
            raise ConfigurationError(f"fold must be in 0..{self.k - 1}, got {fold}")
        return list(self.groups[fold])

    def train_subjects(self, fold: int) -> list:
        test = set(self.test_subjects(fold))
        return [s for g in self.groups for s in g if s not in test]


def make_split(subject_ids, k: int = 4, seed: int = 0) -> SplitPlan:
    """Seeded shuffle of the unique subject ids, dealt round-robin into k groups."""
    ids = sorted(set(str(s) for s in subject_ids))
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    if len(ids) < k:
        raise ConfigurationError(f"{len(ids)} subjects cannot fill {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    groups = [[] for _ in range(k)]
    for n, i in enumerate(order):
        groups[n % k].append(ids[i])
    return SplitPlan(k, tuple(tuple(g) for g in groups), seed)
