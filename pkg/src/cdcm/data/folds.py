"""Patient-level nested (double) cross-validation plans.

Case patients are shuffled and dealt into 5 outer groups. Outer fold ``k``
holds group ``k`` out for final evaluation; each remaining group serves once
as inner validation while the other three train, giving 4 inner rotations per
outer fold. With 23 cases this yields the 15:4:4 (approximately) patient
ratio. Each control follows its matched case into whatever partition that
case lands in, so no patient's slices ever straddle two partitions.
"""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError

N_OUTER = 5
MIN_CASES = N_OUTER


@dataclass(frozen=True)
class InnerSplit:
    train_patients: tuple
    inner_val_patients: tuple


@dataclass(frozen=True)
class OuterFold:
    outer_val_patients: tuple
    inner_splits: tuple


@dataclass
class FoldPlan:
    outer_folds: list
    seed: int
    case_groups: list = field(default_factory=list)

    def configurations(self):
        """Yield ``(outer, inner, train, inner_val, outer_val)`` patient-id tuples."""
        for o, fold in enumerate(self.outer_folds):
            for i, split in enumerate(fold.inner_splits):
                yield o, i, split.train_patients, split.inner_val_patients, fold.outer_val_patients

    def to_dict(self):
        return {
            "seed": self.seed,
            "case_groups": [list(g) for g in self.case_groups],
            "outer_folds": [
                {
                    "outer_val_patients": list(f.outer_val_patients),
                    "inner_splits": [
                        {"train_patients": list(s.train_patients), "inner_val_patients": list(s.inner_val_patients)}
                        for s in f.inner_splits
                    ],
                }
                for f in self.outer_folds
            ],
        }


def _group_sizes(n, k):
    base, extra = divmod(n, k)
    return [base + (1 if i < extra else 0) for i in range(k)]


def plan_double_cv(patients, seed, n_outer=N_OUTER) -> FoldPlan:
    """Build the 5 x 4 patient-level plan; deterministic given ``seed``."""
    cases = sorted(p.patient_id for p in patients if p.is_case)
    if len(cases) < n_outer:
        raise ConfigurationError(f"double CV needs at least {n_outer} case patients, got {len(cases)}")
    followers = {c: [] for c in cases}
    for p in sorted(patients, key=lambda r: r.patient_id):
        if not p.is_case:
            if p.matched_case not in followers:
                raise ConfigurationError(f"control {p.patient_id} is not matched to a known case")
            followers[p.matched_case].append(p.patient_id)

    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    groups, start = [], 0
    for size in _group_sizes(len(cases), n_outer):
        groups.append(tuple(shuffled[start : start + size]))
        start += size

    def expand(case_ids):
        out = []
        for c in case_ids:
            out.append(c)
            out += followers[c]
        return tuple(out)

    folds = []
    for k in range(n_outer):
        rest = [g for j, g in enumerate(groups) if j != k]
        inner = []
        for v in range(len(rest)):
            train_cases = [c for j, g in enumerate(rest) if j != v for c in g]
            inner.append(InnerSplit(expand(train_cases), expand(rest[v])))
        folds.append(OuterFold(expand(groups[k]), tuple(inner)))
    return FoldPlan(folds, int(seed), groups)
