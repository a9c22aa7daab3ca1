"""Group-fairness objectives for generator training and hard metrics for
evaluation.

Losses take torch tensors (or arrays) so they can sit inside the generator's
autograd graph; metrics take binary numpy arrays.
"""

from __future__ import annotations

import enum
import json
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DEFAULT_TEMPERATURE = 0.05


@dataclass(frozen=True)
class GroupLabeling:
    """Group membership of each patient plus an optional privileged group.

    When ``reference_group`` is unset, the largest group is the reference
    (ties go to the earlier group).
    """

    groups: tuple[str, ...]
    assignment: np.ndarray
    reference_group: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", tuple(self.groups))
        assignment = np.asarray(self.assignment, dtype=np.int64)
        object.__setattr__(self, "assignment", assignment)
        if len(self.groups) < 1:
            raise ValueError("at least one group is required")
        if len(set(self.groups)) != len(self.groups):
            raise ValueError("group identifiers must be distinct")
        if assignment.size and (assignment.min() < 0 or assignment.max() >= len(self.groups)):
            raise ValueError("group assignment out of range")
        if self.reference_group is not None and self.reference_group not in self.groups:
            raise ValueError(f"reference group {self.reference_group!r} not among {self.groups}")

    @classmethod
    def from_values(
        cls,
        values: Sequence[str],
        groups: Sequence[str] | None = None,
        reference_group: str | None = None,
    ) -> GroupLabeling:
        if groups is None:
            counts = Counter(values)
            groups = sorted(counts, key=lambda g: (-counts[g], g))
        index = {g: i for i, g in enumerate(groups)}
        try:
            assignment = np.array([index[v] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"value {exc.args[0]!r} not in groups {tuple(groups)}") from None
        return cls(tuple(groups), assignment, reference_group)

    @classmethod
    def from_cohort(cls, cohort, reference_group: str | None = None) -> GroupLabeling:
        return cls.from_values(cohort.group_values(), reference_group=reference_group)

    def __len__(self) -> int:
        return len(self.assignment)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=len(self.groups))

    @property
    def reference_index(self) -> int:
        if self.reference_group is not None:
            return self.groups.index(self.reference_group)
        return int(np.argmax(self.counts))

    @property
    def reference(self) -> str:
        return self.groups[self.reference_index]

    def subset(self, indices) -> GroupLabeling:
        return GroupLabeling(self.groups, self.assignment[np.asarray(indices)], self.reference_group)


def _tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def _soft_positive(P: torch.Tensor, soft: bool, temperature: float) -> torch.Tensor:
    if soft:
        return torch.sigmoid((P - 0.5) / temperature)
    return (P > 0.5).to(P.dtype)


# --- training losses --------------------------------------------------------

def di_loss(
    P,
    groups: GroupLabeling,
    soft: bool = False,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Disparate-impact loss ``|1 - DI|`` over per-patient positive-prediction counts.

    Each patient's count is the number of entries of its row of ``P`` above
    0.5 (hard) or the sum of a steep sigmoid at 0.5 (soft). Group rates are
    mean counts; with more than two groups DI is the smallest ratio of a
    non-reference group's rate to the reference rate. Groups absent from
    ``groups.assignment`` are ignored.
    """
    P = _tensor(P)
    if P.dim() == 1:
        P = P[:, None]
    assignment = torch.as_tensor(groups.assignment, device=P.device)
    if P.shape[0] != assignment.shape[0]:
        raise ValueError("P rows must align with group assignment")
    K = len(groups.groups)
    counts = _soft_positive(P, soft, temperature).sum(dim=1)
    sums = torch.zeros(K, dtype=P.dtype, device=P.device).index_add(0, assignment, counts)
    sizes = torch.bincount(assignment, minlength=K)
    present = sizes > 0
    ref = groups.reference_index
    if int(present.sum()) < 2:
        return P.new_zeros(())
    if not present[ref]:
        warnings.warn("reference group absent; disparate impact undefined, loss capped at 1.0", stacklevel=2)
        return P.new_ones(())
    rates = sums / sizes.clamp(min=1).to(P.dtype)
    if rates[ref].detach().item() == 0.0:
        warnings.warn("reference group rate is 0; disparate impact undefined, loss capped at 1.0", stacklevel=2)
        return P.new_ones(())
    others = present.clone()
    others[ref] = False
    di = (rates[others] / rates[ref]).min()
    return (1.0 - di).abs()


def wtpr_surrogate(
    P,
    labels,
    groups: GroupLabeling,
    temperature: float = DEFAULT_TEMPERATURE,
    min_positives: int = 1,
) -> torch.Tensor:
    """Differentiable ``1 - worst-group TPR``.

    Soft TPR per group is the label-weighted mean of ``sigmoid((P - .5) / T)``;
    groups are combined with softmin weights at the same temperature, so equal
    TPRs give exactly ``1 - TPR`` and ``T -> 0`` recovers the hard metric.
    """
    P = _tensor(P)
    y = _tensor(labels, dtype=P.dtype).to(P.dtype)
    if P.dim() == 1:
        P, y = P[:, None], y[:, None]
    if P.shape != y.shape:
        raise ValueError("P and labels must have the same shape")
    assignment = torch.as_tensor(groups.assignment, device=P.device)
    K = len(groups.groups)
    soft = torch.sigmoid((P - 0.5) / temperature)
    tp = torch.zeros(K, dtype=P.dtype, device=P.device).index_add(0, assignment, (soft * y).sum(dim=1))
    pos = torch.zeros(K, dtype=P.dtype, device=P.device).index_add(0, assignment, y.sum(dim=1))
    eligible = pos >= max(min_positives, 1)
    if not bool(eligible.any()):
        raise ValueError("no group meets minimum positive count")
    tpr = tp[eligible] / pos[eligible]
    weights = torch.softmax(-tpr / temperature, dim=0)
    return 1.0 - (weights * tpr).sum()


class Aggregation(str, enum.Enum):
    MASKED_MEAN = "MASKED_MEAN"
    MASKED_SUM = "MASKED_SUM"


def aggregate(P: torch.Tensor, mask: torch.Tensor | None, how: Aggregation | str) -> torch.Tensor:
    """Collapse ``(N, T, C)`` visit-level probabilities to ``(N, C)`` per patient."""
    P = _tensor(P)
    mask = torch.ones_like(P) if mask is None else _tensor(mask, P.dtype).to(P.dtype)
    total = (P * mask).sum(dim=1)
    if Aggregation(how) is Aggregation.MASKED_MEAN:
        return total / mask.sum(dim=1).clamp(min=1.0)
    return total


LossFn = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class FairnessObjective:
    name: str
    loss_fn: LossFn
    aggregation: Aggregation = Aggregation.MASKED_SUM


def _di_objective(P, groups, labels=None, soft=True, temperature=DEFAULT_TEMPERATURE, **_):
    return di_loss(P, groups, soft=soft, temperature=temperature)


def _wtpr_objective(P, groups, labels=None, temperature=DEFAULT_TEMPERATURE, min_positives=1, **_):
    if labels is None:
        raise ValueError("the wtpr objective needs labels")
    try:
        return wtpr_surrogate(P, labels, groups, temperature=temperature, min_positives=min_positives)
    except ValueError:
        return _tensor(P).new_zeros(())


OBJECTIVES: dict[str, FairnessObjective] = {
    "di": FairnessObjective("di", _di_objective),
    "wtpr": FairnessObjective("wtpr", _wtpr_objective),
}


def register_objective(objective: FairnessObjective) -> None:
    OBJECTIVES[objective.name] = objective


def get_objective(name: str | FairnessObjective) -> FairnessObjective:
    key = name.name if isinstance(name, FairnessObjective) else name
    if key not in OBJECTIVES:
        raise KeyError(f"unregistered fairness objective {key!r}; registered: {sorted(OBJECTIVES)}")
    return OBJECTIVES[key]


def fo_loss(
    P,
    groups: GroupLabeling,
    objective: str | FairnessObjective,
    mask=None,
    labels=None,
    **params,
) -> torch.Tensor:
    """Dispatch a registered fairness objective.

    ``(N, T, C)`` inputs are first aggregated per patient with the objective's
    aggregation; labels are aggregated to "present in any masked visit".
    """
    objective = get_objective(objective)
    P = _tensor(P)
    if P.dim() == 3:
        if labels is not None:
            y = _tensor(labels, P.dtype).to(P.dtype)
            m = torch.ones_like(y) if mask is None else _tensor(mask, P.dtype).to(P.dtype)
            labels = ((y * m).sum(dim=1) > 0).to(P.dtype)
        P = aggregate(P, mask, objective.aggregation)
    if len(np.unique(groups.assignment)) < 2:
        return P.new_zeros(())
    loss = objective.loss_fn(P, groups, labels=labels, **params)
    return loss.clamp(min=0.0)


# --- evaluation metrics -----------------------------------------------------

def _binary(x) -> np.ndarray:
    arr = np.asarray(x)
    return (arr > 0).astype(np.int64) if arr.dtype != bool else arr.astype(np.int64)


def selection_rates(predictions, groups: GroupLabeling) -> dict[str, float]:
    pred = _binary(predictions)
    sizes = groups.counts
    hits = np.bincount(groups.assignment, weights=pred, minlength=len(groups.groups))
    return {g: float(hits[i] / sizes[i]) for i, g in enumerate(groups.groups) if sizes[i] > 0}


def disparate_impact(predictions, groups: GroupLabeling) -> float:
    """Ratio of selection rates, protected over reference.

    With more than two groups the smallest ratio over non-reference groups is
    returned. A zero reference rate makes DI undefined: NaN with a warning.
    """
    rates = selection_rates(predictions, groups)
    ref = groups.reference
    if ref not in rates:
        warnings.warn("reference group absent; disparate impact undefined", stacklevel=2)
        return float("nan")
    others = [rates[g] for g in rates if g != ref]
    if not others:
        return 1.0
    if rates[ref] == 0:
        warnings.warn("reference selection rate is 0; disparate impact undefined", stacklevel=2)
        return float("nan")
    return min(r / rates[ref] for r in others)


def group_tprs(predictions, labels, groups: GroupLabeling, min_positives: int = 5) -> tuple[dict[str, float], list[str]]:
    """Per-group TPR for groups with at least ``min_positives`` positives, and the excluded groups."""
    pred, y = _binary(predictions), _binary(labels)
    K = len(groups.groups)
    positives = np.bincount(groups.assignment, weights=y, minlength=K)
    tp = np.bincount(groups.assignment, weights=y * pred, minlength=K)
    tprs, excluded = {}, []
    for i, g in enumerate(groups.groups):
        if positives[i] >= min_positives and positives[i] > 0:
            tprs[g] = float(tp[i] / positives[i])
        elif groups.counts[i] > 0:
            excluded.append(g)
    return tprs, excluded


def worst_tpr(predictions, labels, groups: GroupLabeling, min_positives: int = 5) -> float:
    tprs, _ = group_tprs(predictions, labels, groups, min_positives)
    if not tprs:
        raise ValueError("no group meets minimum positive count")
    return min(tprs.values())


@dataclass
class FairnessReport:
    di: float
    wtpr: float
    per_group_tpr: dict[str, float]
    per_group_selection_rate: dict[str, float]
    n_per_group: dict[str, int]
    excluded_groups: list[str] = field(default_factory=list)
    reference_group: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ("di", "wtpr"):
            if out[key] is not None and not np.isfinite(out[key]):
                out[key] = None
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def fairness_report(predictions, labels, groups: GroupLabeling, min_positives: int = 5) -> FairnessReport:
    tprs, excluded = group_tprs(predictions, labels, groups, min_positives)
    if tprs:
        wtpr = min(tprs.values())
    else:
        warnings.warn("no group meets minimum positive count; WTPR undefined", stacklevel=2)
        wtpr = float("nan")
    counts = groups.counts
    return FairnessReport(
        di=disparate_impact(predictions, groups),
        wtpr=wtpr,
        per_group_tpr=tprs,
        per_group_selection_rate=selection_rates(predictions, groups),
        n_per_group={g: int(counts[i]) for i, g in enumerate(groups.groups) if counts[i] > 0},
        excluded_groups=excluded,
        reference_group=groups.reference,
    )


@dataclass
class FairnessConfig:
    """Settings under the ``fairness`` config section."""

    objective: str | None = "di"
    reference_group: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    min_positives: int = 5
    # Which generator outputs the objective sees: the mortality token, or all visit codes.
    targets: str = "outcome"
    soft: bool = True

    def __post_init__(self) -> None:
        if self.objective is not None:
            get_objective(self.objective)
        if self.targets not in ("outcome", "codes"):
            raise ValueError("fairness.targets must be 'outcome' or 'codes'")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def feedback_loss(report: FairnessReport, metric: str) -> float:
    """Map a probe's fairness report to a non-negative deficit (0 = perfectly fair)."""
    metric = metric.lower()
    if metric == "di":
        value = abs(1.0 - report.di)
    elif metric == "wtpr":
        value = 1.0 - report.wtpr
    else:
        raise ValueError(f"unknown feedback metric {metric!r}")
    return float(value) if np.isfinite(value) else 0.0


def downstream_feedback(
    synth,
    real_val,
    predictor_config=None,
    metric: str = "di",
    seed: int = 0,
    holdout_fraction: float = 0.5,
    min_positives: int = 5,
) -> float:
    """Fairness deficit of a probe predictor trained on real-validation + synthetic data.

    The real validation cohort is split into a probe-training half and a
    holdout half. Any failure returns 0 with a warning, so the generator
    falls back to its own fairness loss.
    """
    from .augment import merge
    from .downstream import PredictorConfig, evaluate, predict, train_predictor
    from .splits import split

    try:
        if len(synth) == 0 or len(real_val) == 0:
            raise ValueError("empty cohort")
        config = predictor_config or PredictorConfig(seed=seed)
        probe_train, _, holdout = split(real_val, (1.0 - holdout_fraction, 0.0, holdout_fraction), seed=seed)
        probe = train_predictor(merge(probe_train, synth), holdout, config)
        metrics = evaluate(predict(probe, holdout), min_positives=min_positives)
        return feedback_loss(metrics.fairness, metric)
    except Exception as exc:  # noqa: BLE001 - fails open by design
        warnings.warn(f"downstream feedback failed ({exc}); using l_df = 0", stacklevel=2)
        return 0.0
