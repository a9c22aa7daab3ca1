"""Raw event tables -> Cohort: lab discretization, imputation, filtering and
static-attribute labeling."""

from __future__ import annotations

import bisect
import enum
import logging
import math
import operator
import warnings
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .data import LAB_PREFIX, STATIC_PREFIX, Cohort, PatientRecord

logger = logging.getLogger(__name__)


class ImputationPolicy(str, enum.Enum):
    FORWARD_FILL = "FORWARD_FILL"
    COHORT_MEDIAN = "COHORT_MEDIAN"
    DROP = "DROP"


DEFAULT_ETHNICITY_KEYWORDS = (
    ("WHITE", "White"),
    ("BLACK", "Black"),
    ("HISPANIC", "Hispanic"),
    ("LATINO", "Hispanic"),
    ("ASIAN", "Asian"),
)


@dataclass
class PreprocessConfig:
    n_lab_bins: int = 10
    imputation_policy: ImputationPolicy = ImputationPolicy.FORWARD_FILL
    filters: list = field(default_factory=list)
    # Explicit raw -> canonical map; unmapped values fall back to keyword rules.
    ethnicity_grouping: dict = field(default_factory=dict)
    sensitive_attribute: str = "ethnicity"
    min_code_count: int = 5
    max_visits: int | None = None
    outcome_column: str = "outcome"
    labels_column: str = "labels"

    def __post_init__(self) -> None:
        self.imputation_policy = ImputationPolicy(self.imputation_policy)
        if self.n_lab_bins < 2:
            raise ValueError("n_lab_bins must be >= 2")
        if any(not str(v).strip() for v in self.ethnicity_grouping.values()):
            raise ValueError("canonical groups must be non-empty")


def group_ethnicity(raw: str, grouping: Mapping[str, str] | None = None) -> str:
    """Map a raw ethnicity string onto the 5-way White/Black/Hispanic/Asian/Others grouping."""
    if grouping and raw in grouping:
        return grouping[raw]
    upper = str(raw).upper()
    for keyword, group in DEFAULT_ETHNICITY_KEYWORDS:
        if keyword in upper:
            return group
    return "Others"


# --- lab discretization -----------------------------------------------------

def build_bin_edges(values: Iterable[float], n_bins: int) -> list[float]:
    """Interior quantile edges (``n_bins - 1`` of them) for a lab variable.

    With fewer than ``n_bins`` distinct values, edges fall back to midpoints
    between consecutive distinct values.
    """
    arr = np.asarray([v for v in values if v is not None], dtype=float)
    arr = arr[np.isfinite(arr)]
    distinct = np.unique(arr)
    if len(distinct) < n_bins:
        warnings.warn(
            f"only {len(distinct)} distinct values for {n_bins} bins; using distinct-value bins",
            stacklevel=2,
        )
        return [float(x) for x in (distinct[:-1] + distinct[1:]) / 2]
    qs = np.arange(1, n_bins) / n_bins
    return [float(x) for x in np.quantile(arr, qs)]


def discretize_lab(value: float, edges: Sequence[float]) -> int:
    """Bin index with left-inclusive bins: a value equal to an edge goes up."""
    if value is None or math.isnan(value):
        raise ValueError("missing value: impute before discretizing")
    return bisect.bisect_right(edges, value)


def lab_token(variable: str, bin_index: int) -> str:
    return f"{LAB_PREFIX}{variable}:{bin_index}"


# --- imputation -------------------------------------------------------------

def impute_missing(
    events: pd.DataFrame,
    policy: ImputationPolicy | str,
    medians: Mapping[str, float] | None = None,
) -> pd.DataFrame:
    """Fill missing lab values in a ``(patient_id, timestamp, variable, value)`` table.

    ``medians`` should come from the training split; when omitted they are
    computed from ``events``. Forward fill falls back to the median for
    leading gaps and for variables never observed for a patient. Variables
    with no observed value anywhere cannot be imputed and their rows are
    dropped with a warning.
    """
    policy = ImputationPolicy(policy)
    out = events.copy()
    out["value"] = pd.to_numeric(out["value"], errors="coerce")
    if medians is None:
        medians = out.groupby("variable")["value"].median().dropna().to_dict()

    if policy is ImputationPolicy.DROP:
        return out[out["value"].notna()]

    if policy is ImputationPolicy.FORWARD_FILL:
        ordered = out.sort_values(["patient_id", "timestamp"], kind="stable")
        filled = ordered.groupby(["patient_id", "variable"], sort=False)["value"].ffill()
        out["value"] = filled.reindex(out.index)

    missing = out["value"].isna()
    if missing.any():
        out.loc[missing, "value"] = out.loc[missing, "variable"].map(medians)
    unresolved = out["value"].isna()
    if unresolved.any():
        names = sorted(out.loc[unresolved, "variable"].astype(str).unique())
        warnings.warn(f"no observed values to impute variables {names}; dropping those events", stacklevel=2)
        out = out[~unresolved]
    return out


# --- filtering --------------------------------------------------------------

_OPERATORS = {
    "==": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "in": lambda a, b: a in b,
    "not in": lambda a, b: a not in b,
}

DERIVED_ATTRIBUTES = {
    "visits": lambda r: r.n_visits,
    "n_visits": lambda r: r.n_visits,
    "outcome": lambda r: r.outcome,
    "n_labels": lambda r: len(r.labels),
    "n_codes": lambda r: sum(len(v) for v in r.visits),
}


def _coerce(a: Any, b: Any) -> tuple[Any, Any]:
    if isinstance(b, (int, float)) and not isinstance(a, (int, float)):
        try:
            return float(a), b
        except (TypeError, ValueError):
            return a, b
    return a, b


def _normalize_filter(spec) -> tuple[str, str, Any]:
    if isinstance(spec, Mapping):
        return spec["attribute"], spec["operator"], spec["value"]
    attribute, op, value = spec
    return attribute, op, value


def evaluate_predicate(record: PatientRecord, attribute: str, op: str, value: Any) -> bool:
    if attribute in DERIVED_ATTRIBUTES:
        actual = DERIVED_ATTRIBUTES[attribute](record)
    elif attribute in record.static:
        actual = record.static[attribute]
    else:
        return False
    if op not in _OPERATORS:
        raise ValueError(f"unknown operator {op!r}")
    actual, value = _coerce(actual, value)
    return bool(_OPERATORS[op](actual, value))


def filter_cohort(cohort: Cohort, filters: Sequence) -> Cohort:
    """Keep records satisfying every ``(attribute, operator, value)`` predicate."""
    filters = [_normalize_filter(f) for f in filters]
    if not filters:
        return cohort
    known = set(DERIVED_ATTRIBUTES)
    vocab = cohort.vocabulary
    for i in vocab.section_range("static"):
        known.add(vocab.codes[i][len(STATIC_PREFIX):].partition("=")[0])
    for attribute, op, _ in filters:
        if attribute not in known:
            raise KeyError(f"unknown filter attribute {attribute!r}")
        if op not in _OPERATORS:
            raise ValueError(f"unknown operator {op!r}")
    kept = [r for r in cohort.records if all(evaluate_predicate(r, *f) for f in filters)]
    return Cohort(tuple(kept), cohort.vocabulary, cohort.provenance)


# --- tables -> cohort -------------------------------------------------------

@dataclass
class LabDiscretizer:
    """Per-variable quantile edges and medians, fitted once on training events."""

    edges: dict[str, list[float]]
    medians: dict[str, float]

    @classmethod
    def fit(cls, lab_events: pd.DataFrame, n_bins: int) -> LabDiscretizer:
        values = pd.to_numeric(lab_events["value"], errors="coerce")
        edges = {}
        medians = {}
        for variable, vals in values.groupby(lab_events["variable"]):
            observed = vals.dropna()
            if observed.empty:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                edges[str(variable)] = build_bin_edges(observed.tolist(), n_bins)
            medians[str(variable)] = float(observed.median())
        return cls(edges, medians)

    def tokens(self, lab_events: pd.DataFrame) -> pd.Series:
        return pd.Series(
            [lab_token(v, discretize_lab(x, self.edges[v])) for v, x in zip(lab_events["variable"], lab_events["value"])],
            index=lab_events.index,
            dtype=object,
        )


def split_lab_and_code_events(events: pd.DataFrame) -> tuple[pd.DataFrame, pd.DataFrame]:
    """A variable is a lab when every non-missing value is numeric; otherwise
    its values are code strings."""
    numeric = pd.to_numeric(events["value"], errors="coerce")
    present = events["value"].notna() & (events["value"].astype(str).str.strip() != "")
    non_numeric = present & numeric.isna()
    code_vars = set(events.loc[non_numeric, "variable"])
    is_code = events["variable"].isin(code_vars)
    return events[~is_code].copy(), events[is_code & present].copy()


def cohort_from_tables(
    events: pd.DataFrame,
    static: pd.DataFrame,
    config: PreprocessConfig | None = None,
    train_ids: Iterable[str] | None = None,
) -> Cohort:
    """Assemble a Cohort from an events table and a static-attributes table.

    ``events`` columns: ``patient_id, timestamp, variable, value`` and an
    optional ``visit_id`` (defaults to one visit per distinct timestamp).
    ``static`` columns: ``patient_id``, the sensitive attribute, the outcome
    column, an optional ``;``-separated labels column and any other attributes.
    Lab bins and medians are fitted on ``train_ids`` only when given.
    """
    config = config or PreprocessConfig()
    events = events.copy()
    events["patient_id"] = events["patient_id"].astype(str)
    visit_key = "visit_id" if "visit_id" in events.columns else "timestamp"

    labs, codes = split_lab_and_code_events(events)
    fit_rows = labs if train_ids is None else labs[labs["patient_id"].isin({str(x) for x in train_ids})]
    discretizer = LabDiscretizer.fit(fit_rows, config.n_lab_bins)
    labs = labs[labs["variable"].astype(str).isin(discretizer.edges)]
    labs = labs.assign(variable=labs["variable"].astype(str))
    labs = impute_missing(labs, config.imputation_policy, discretizer.medians)
    labs = labs.assign(token=discretizer.tokens(labs))
    codes = codes.assign(token=codes["value"].astype(str).str.strip())
    columns = list(dict.fromkeys(["patient_id", visit_key, "timestamp", "token"]))
    tokens = pd.concat([labs[columns], codes[columns]])
    tokens = tokens.sort_values(["patient_id", "timestamp"], kind="stable")

    visits_by_patient: dict[str, list[frozenset[str]]] = {}
    for (pid, _), chunk in tokens.groupby(["patient_id", visit_key], sort=False):
        visits_by_patient.setdefault(pid, []).append(frozenset(chunk["token"]))

    attr = config.sensitive_attribute
    static = static.copy()
    static["patient_id"] = static["patient_id"].astype(str)
    if attr not in static.columns:
        raise KeyError(f"static table lacks sensitive attribute column {attr!r}")
    records = []
    skip = {"patient_id", config.outcome_column, config.labels_column}
    for row in static.to_dict("records"):
        pid = row["patient_id"]
        visits = visits_by_patient.get(pid, [])
        if not visits:
            logger.info("dropping patient %s with no visits", pid)
            continue
        if config.max_visits is not None:
            visits = visits[-config.max_visits:]
        attrs = {k: str(v) for k, v in row.items() if k not in skip and not pd.isna(v)}
        attrs[attr] = group_ethnicity(attrs.get(attr, "Others"), config.ethnicity_grouping)
        raw_labels = row.get(config.labels_column)
        labels = frozenset(x for x in str(raw_labels).split(";") if x) if not pd.isna(raw_labels) else frozenset()
        outcome = int(row.get(config.outcome_column, 0) or 0)
        records.append(PatientRecord(pid, attrs, labels, tuple(visits), outcome))
    cohort = Cohort.from_records(records, config.min_code_count, attr)
    return filter_cohort(cohort, config.filters)


def preprocess_files(events_csv, static_csv, config: PreprocessConfig | None = None) -> Cohort:
    events = pd.read_csv(events_csv, dtype={"patient_id": str, "variable": str})
    static = pd.read_csv(static_csv, dtype={"patient_id": str})
    return cohort_from_tables(events, static, config)
