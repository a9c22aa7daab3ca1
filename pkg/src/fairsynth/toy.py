"""Biased toy EHR cohorts with a controllable per-group mortality signal.

Each patient gets a group, a mortality flag from the group's base rate, and
visits of ordinary codes drawn from a group-shifted categorical distribution.
Expired patients carry "signal" codes in their last visit with probability
``signal_strength`` in the reference group and ``signal_strength * (1 - bias)``
elsewhere, so a predictor trained on the cohort is expected to miss more
deaths outside the reference group as the bias grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Cohort, PatientRecord, Provenance, build_vocabulary, canonicalize_record
from .preprocess import lab_token

# Alive / expired patient counts per ethnicity of a 5,000-patient ICU cohort.
REFERENCE_COUNTS = {
    "White": (3105, 359),
    "Black": (460, 27),
    "Hispanic": (175, 11),
    "Asian": (156, 9),
    "Others": (615, 83),
}
REFERENCE_MALE = 2807


def _default_proportions() -> dict[str, float]:
    total = sum(a + e for a, e in REFERENCE_COUNTS.values())
    return {g: (a + e) / total for g, (a, e) in REFERENCE_COUNTS.items()}


def _default_mortality() -> dict[str, float]:
    return {g: e / (a + e) for g, (a, e) in REFERENCE_COUNTS.items()}


@dataclass
class ToyCohortConfig:
    n_patients: int = 5000
    group_proportions: dict[str, float] = field(default_factory=_default_proportions)
    base_mortality: dict[str, float] = field(default_factory=_default_mortality)
    bias_strength: float = 0.5
    mean_visits: float = 3.0
    n_codes: int = 40
    n_signal_codes: int = 4
    signal_strength: float = 0.7
    # Chance that a surviving patient carries one signal code anyway.
    signal_noise: float = 0.05
    codes_per_visit: float = 3.0
    n_lab_variables: int = 2
    n_lab_bins: int = 4
    n_labels: int = 5
    label_rate: float = 0.2
    male_fraction: float = REFERENCE_MALE / 5000
    reference_group: str = "White"
    sensitive_attribute: str = "ethnicity"
    T_max: int = 8
    min_code_count: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        props = np.array(list(self.group_proportions.values()), dtype=float)
        if len(props) == 0 or (props < 0).any() or abs(props.sum() - 1.0) > 1e-6 or (props == 1).any():
            raise ValueError("group proportions must be non-negative, sum to 1 and cover at least two groups")
        if set(self.base_mortality) != set(self.group_proportions):
            raise ValueError("base_mortality must name the same groups as group_proportions")
        rates = [self.base_mortality[g] for g in self.group_proportions]
        probs = rates + [self.signal_strength, self.signal_noise, self.label_rate, self.male_fraction]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValueError("rates and probabilities must lie in [0, 1]")
        if self.bias_strength < 0:
            raise ValueError("bias_strength must be non-negative")
        if self.reference_group not in self.group_proportions:
            raise ValueError(f"reference group {self.reference_group!r} not among the groups")
        if self.n_patients < 1 or self.n_codes < 1 or self.n_signal_codes < 1 or self.T_max < 3 or self.mean_visits < 1:
            raise ValueError("sizes must be positive, T_max >= 3 and mean_visits >= 1")

    def signal_rate(self, group: str) -> float:
        if group == self.reference_group:
            return self.signal_strength
        return self.signal_strength * max(0.0, 1.0 - self.bias_strength)


def code_name(i: int) -> str:
    return f"dx_{i:03d}"


def signal_code_name(i: int) -> str:
    return f"sig_{i:02d}"


def generate_toy_cohort(config: ToyCohortConfig | None = None) -> Cohort:
    config = config or ToyCohortConfig()
    rng = np.random.default_rng([config.seed, 0x70E])
    groups = list(config.group_proportions)
    probs = np.array([config.group_proportions[g] for g in groups], dtype=float)
    probs = probs / probs.sum()
    max_visits = config.T_max - 2

    # Group-shifted code preferences: a shared Zipf-like base tilted per group.
    base = 1.0 / np.arange(1, config.n_codes + 1)
    tilt = np.random.default_rng([config.seed, 0x711]).normal(size=(len(groups), config.n_codes))
    code_probs = base * np.exp(config.bias_strength * tilt)
    code_probs /= code_probs.sum(axis=1, keepdims=True)

    records = []
    for i in range(config.n_patients):
        g = int(rng.choice(len(groups), p=probs))
        group = groups[g]
        outcome = int(rng.random() < config.base_mortality[group])
        n_visits = int(min(1 + rng.poisson(config.mean_visits - 1), max_visits))
        visits = []
        for _ in range(n_visits):
            k = int(min(1 + rng.poisson(config.codes_per_visit - 1), config.n_codes))
            visit = {code_name(c) for c in rng.choice(config.n_codes, size=k, replace=False, p=code_probs[g])}
            for v in range(config.n_lab_variables):
                if rng.random() < 0.5:
                    visit.add(lab_token(f"lab{v}", int(rng.integers(config.n_lab_bins))))
            visits.append(visit)
        if outcome and rng.random() < config.signal_rate(group):
            n_sig = int(rng.integers(1, config.n_signal_codes + 1))
            visits[-1] |= {signal_code_name(s) for s in rng.choice(config.n_signal_codes, size=n_sig, replace=False)}
        elif not outcome and rng.random() < config.signal_noise:
            visits[-1].add(signal_code_name(int(rng.integers(config.n_signal_codes))))
        labels = {f"pheno_{j}" for j in range(config.n_labels) if rng.random() < config.label_rate}
        static = {
            config.sensitive_attribute: group,
            "gender": "M" if rng.random() < config.male_fraction else "F",
        }
        records.append(PatientRecord(f"toy-{i:05d}", static, frozenset(labels), tuple(frozenset(v) for v in visits), outcome))

    vocab = build_vocabulary(records, config.min_code_count, config.sensitive_attribute)
    return Cohort(tuple(canonicalize_record(r, vocab) for r in records), vocab, Provenance.REAL)


def has_signal(record: PatientRecord) -> bool:
    """Fixed rule predictor: positive iff any signal code appears in any visit."""
    return any(code.startswith("sig_") for visit in record.visits for code in visit)
