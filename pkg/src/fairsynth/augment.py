"""Curated training pools: real only, oversampled, or real plus synthetic."""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from .data import Cohort, Provenance
from .fairness import GroupLabeling

logger = logging.getLogger(__name__)

OVERSAMPLE_TOLERANCE = 0.01
MAX_REPLICATION = 20


class Strategy(str, enum.Enum):
    REAL_ONLY = "REAL_ONLY"
    REAL_OVERSAMPLE = "REAL_OVERSAMPLE"
    REAL_SYNTH = "REAL_SYNTH"
    REAL_FAIRSYNTH = "REAL_FAIRSYNTH"


@dataclass(frozen=True)
class CurationSpec:
    strategy: Strategy
    n_real: int
    n_synth: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.n_real <= 0:
            raise ValueError("n_real must be positive")
        if self.n_synth < 0:
            raise ValueError("n_synth must be non-negative")
        if self.strategy in (Strategy.REAL_ONLY, Strategy.REAL_OVERSAMPLE) and self.n_synth:
            raise ValueError(f"n_synth must be 0 for {self.strategy.value}")


def merge(real: Cohort, synth: Cohort) -> Cohort:
    """Real records followed by synthetic ones; per-record provenance is kept."""
    if real.vocabulary.hash != synth.vocabulary.hash:
        raise ValueError("cannot merge cohorts with different vocabularies")
    if len(synth) == 0:
        return real
    return Cohort(real.records + synth.records, real.vocabulary, Provenance.MERGED)


def _shares_gap(sizes: Mapping[str, int], target: Mapping[str, float]) -> float:
    total = sum(sizes.values())
    return max(abs(n / total - target.get(g, 0.0)) for g, n in sizes.items())


def oversample_counts(
    counts: Mapping[str, int],
    target: Mapping[str, float],
    max_factor: int = MAX_REPLICATION,
    tolerance: float = OVERSAMPLE_TOLERANCE,
) -> dict[str, int]:
    """Final per-group sizes without removing anyone.

    Starts from the smallest cohort that could hold every group at its target
    share and grows the total one record at a time until integer rounding puts
    every share within ``tolerance``. Each group is capped at ``max_factor``
    times its original size; once a cap binds, growing further cannot help.
    """
    positive = [g for g in target if target[g] > 0]
    start = max(counts[g] / target[g] for g in positive)

    def sizes_at(total: float) -> dict[str, int]:
        return {g: min(max(n, int(round(target.get(g, 0.0) * total))), max_factor * n) for g, n in counts.items()}

    out = sizes_at(start)
    limit = max_factor * sum(counts.values())
    total = int(np.ceil(start))
    while _shares_gap(out, target) > tolerance and total < limit:
        if any(out[g] == max_factor * counts[g] and out[g] > counts[g] for g in counts):
            break
        total += 1
        out = sizes_at(total)
    return out


def dp_oversample(
    cohort: Cohort,
    groups: GroupLabeling | None = None,
    target: Mapping[str, float] | None = None,
    seed: int = 0,
    tolerance: float = OVERSAMPLE_TOLERANCE,
    max_factor: int = MAX_REPLICATION,
) -> Cohort:
    """Replicate minority-group records round-robin until group shares reach ``target``.

    ``target`` defaults to parity over the groups present. Replicas keep their
    patient_id and are tagged OVERSAMPLED; originals are never removed. When the
    replication cap stops a group short of its share, a warning is emitted.
    """
    groups = groups or GroupLabeling.from_cohort(cohort)
    if len(groups) != len(cohort):
        raise ValueError("group labeling does not match the cohort")
    sizes = groups.counts
    present = [g for i, g in enumerate(groups.groups) if sizes[i] > 0]
    if target is None:
        target = {g: 1.0 / len(present) for g in present}
    target = {str(g): float(p) for g, p in target.items()}
    if any(p < 0 for p in target.values()) or abs(sum(target.values()) - 1.0) > 1e-6:
        raise ValueError("target proportions must be non-negative and sum to 1")
    for g, p in target.items():
        if g not in groups.groups or (p > 0 and sizes[groups.groups.index(g)] == 0):
            raise ValueError(f"target group {g!r} has no records in the cohort")
    counts = {g: int(sizes[i]) for i, g in enumerate(groups.groups) if sizes[i] > 0}
    final = oversample_counts(counts, target, max_factor, tolerance)

    rng = np.random.default_rng([seed, 0x0DE5])
    replicas = []
    for i, g in enumerate(groups.groups):
        extra = final.get(g, 0) - counts.get(g, 0)
        if extra <= 0:
            continue
        members = rng.permutation(np.flatnonzero(groups.assignment == i))
        for k in range(extra):
            record = cohort.records[members[k % len(members)]]
            replicas.append(replace(record, provenance=Provenance.OVERSAMPLED.value))
    worst = _shares_gap(final, target)
    if worst > tolerance:
        warnings.warn(
            f"oversampling stopped {worst:.3f} from target proportions (replication cap {max_factor}x)", stacklevel=2
        )
    if not replicas:
        return cohort
    return Cohort(cohort.records + tuple(replicas), cohort.vocabulary, Provenance.OVERSAMPLED)


def sample_real(pool: Cohort, n: int, seed: int) -> Cohort:
    if n > len(pool):
        raise ValueError(f"insufficient real pool: need {n}, have {len(pool)}")
    rng = np.random.default_rng([seed, 0x8EA1])
    idx = np.sort(rng.choice(len(pool), size=n, replace=False))
    return pool.subset(idx.tolist(), Provenance.REAL)


def curate(
    spec: CurationSpec,
    real_pool: Cohort,
    generator_plain=None,
    generator_fair=None,
    oversample_target: Mapping[str, float] | None = None,
) -> Cohort:
    """Build one training pool. Both synthetic strategies sample with the same
    seed, so they differ only through the generator weights."""
    from .generator import sample_records

    real = sample_real(real_pool, spec.n_real, spec.seed)
    if spec.strategy is Strategy.REAL_ONLY:
        return real
    if spec.strategy is Strategy.REAL_OVERSAMPLE:
        return dp_oversample(real, target=oversample_target, seed=spec.seed)
    generator = generator_plain if spec.strategy is Strategy.REAL_SYNTH else generator_fair
    if generator is None:
        raise ValueError(f"{spec.strategy.value} requires a trained generator")
    if spec.n_synth == 0:
        return real
    synth = sample_records(generator, spec.n_synth, real_pool.vocabulary, seed=spec.seed)
    if len(synth) < spec.n_synth:
        logger.warning("generator produced %d of %d requested records", len(synth), spec.n_synth)
    return merge(real, synth)
