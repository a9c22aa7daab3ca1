"""Patient-level, group-stratified train/validation/test splitting."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np

from .data import Cohort

MIN_STRATUM = 3


def largest_remainder(total: int, ratios: Sequence[float]) -> np.ndarray:
    """Integer sizes summing to ``total`` that are closest to ``total * ratios``."""
    quotas = total * np.asarray(ratios, dtype=float)
    sizes = np.floor(quotas).astype(np.int64)
    remainder = quotas - sizes
    # Ties go to the earlier split.
    order = sorted(range(len(quotas)), key=lambda i: (-remainder[i], i))
    for i in order[: total - int(sizes.sum())]:
        sizes[i] += 1
    return sizes


def _allocate(group_sizes: np.ndarray, split_sizes: np.ndarray, ratios: np.ndarray) -> np.ndarray:
    """Integer group x split table with the given row and column sums, near the proportional quotas."""
    quotas = np.outer(group_sizes, ratios)
    table = np.floor(quotas).astype(np.int64)
    row_left = group_sizes - table.sum(axis=1)
    col_left = split_sizes - table.sum(axis=0)
    if (col_left < 0).any():
        # Column targets below the floors (only when small groups pushed train over); trim greedily.
        for s in np.flatnonzero(col_left < 0):
            for g in np.argsort(-(table[:, s] - quotas[:, s]), kind="stable"):
                while col_left[s] < 0 and table[g, s] > 0:
                    table[g, s] -= 1
                    row_left[g] += 1
                    col_left[s] += 1
    cells = sorted(
        ((g, s) for g in range(len(group_sizes)) for s in range(len(split_sizes))),
        key=lambda c: (-(quotas[c] - table[c]), c),
    )
    # One unit per cell by largest fractional remainder, then fill whatever is left.
    for g, s in cells:
        if row_left[g] > 0 and col_left[s] > 0 and quotas[g, s] > table[g, s]:
            table[g, s] += 1
            row_left[g] -= 1
            col_left[s] -= 1
    for g, s in cells:
        extra = min(row_left[g], col_left[s])
        if extra > 0:
            table[g, s] += extra
            row_left[g] -= extra
            col_left[s] -= extra
    return table


def split(cohort: Cohort, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Cohort, Cohort, Cohort]:
    """Split into disjoint train/validation/test cohorts.

    Overall sizes follow the largest-remainder rule; within each group the
    split proportions follow the overall ratios as closely as integers allow.
    Groups with fewer than three patients go wholly to train, with a warning.
    """
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != 3 or (ratios < 0).any() or abs(ratios.sum() - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {tuple(ratios)}")
    N = len(cohort)
    values = np.array(cohort.group_values(), dtype=object)
    groups = sorted(set(values.tolist()))
    members = {g: np.flatnonzero(values == g) for g in groups}
    small = [g for g in groups if len(members[g]) < MIN_STRATUM]
    if small:
        warnings.warn(f"groups smaller than {MIN_STRATUM} placed wholly in train: {small}", stacklevel=2)
    strata = [g for g in groups if g not in small]

    sizes = largest_remainder(N, ratios)
    n_small = sum(len(members[g]) for g in small)
    split_sizes = sizes.copy()
    split_sizes[0] -= n_small
    if split_sizes[0] < 0:
        split_sizes[1:] = largest_remainder(N - n_small, ratios)[1:]
        split_sizes[0] = N - n_small - split_sizes[1:].sum()
    table = _allocate(np.array([len(members[g]) for g in strata], dtype=np.int64), split_sizes, ratios)

    rng = np.random.default_rng([seed, 0x5917])
    parts: list[list[int]] = [[], [], []]
    for g in small:
        parts[0].extend(members[g].tolist())
    for row, g in enumerate(strata):
        shuffled = rng.permutation(members[g])
        bounds = np.cumsum(table[row])
        for s, chunk in enumerate(np.split(shuffled, bounds[:-1])):
            parts[s].extend(chunk.tolist())
    return tuple(cohort.subset(sorted(p)) for p in parts)  # type: ignore[return-value]
