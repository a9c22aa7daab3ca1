from __future__ import annotations

import random

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsynth.preprocess import (
    ImputationPolicy,
    PreprocessConfig,
    build_bin_edges,
    cohort_from_tables,
    discretize_lab,
    evaluate_predicate,
    filter_cohort,
    group_ethnicity,
    impute_missing,
    preprocess_files,
)

import oracles
from conftest import random_cohort


# --- bin edges ----------------------------------------------------------------

def test_quantile_edges_one_to_hundred():
    edges = build_bin_edges(range(1, 101), 4)
    assert edges == pytest.approx([25.75, 50.5, 75.25], abs=1e-12)


def test_quantile_edges_match_oracle():
    rng = random.Random(0)
    values = [rng.gauss(0, 1) for _ in range(137)]
    srt = sorted(values)
    expected = [oracles.quantile_linear(srt, k / 7) for k in range(1, 7)]
    assert build_bin_edges(values, 7) == pytest.approx(expected, abs=1e-12)


def test_constant_sequence_single_bin():
    with pytest.warns(UserWarning, match="distinct"):
        assert build_bin_edges([3.0] * 20, 10) == []


def test_two_values_median_edge():
    assert build_bin_edges([0, 1], 2) == [0.5]


def test_discretize_tie_and_extremes():
    edges = [1.0, 2.0, 3.0]
    assert discretize_lab(-5.0, edges) == 0
    assert discretize_lab(2.0, edges) == 2
    assert discretize_lab(99.0, edges) == 3


def test_discretize_missing_rejected():
    with pytest.raises(ValueError, match="missing"):
        discretize_lab(float("nan"), [1.0])


def test_uniform_samples_fill_bins_evenly():
    rng = np.random.default_rng(0)
    values = rng.uniform(size=1000)
    edges = build_bin_edges(values, 10)
    bins = np.bincount([discretize_lab(v, edges) for v in values], minlength=10) / 1000
    assert np.all(np.abs(bins - 0.1) <= 0.03)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_property_discretization_monotone(values, a, b):
    with np.errstate(all="ignore"):
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            edges = build_bin_edges(values, 5)
    lo, hi = min(a, b), max(a, b)
    assert discretize_lab(lo, edges) <= discretize_lab(hi, edges)
    assert edges == sorted(edges)


# --- imputation -----------------------------------------------------------------

def events(values, pid="p", var="hr"):
    return pd.DataFrame({"patient_id": pid, "timestamp": range(len(values)), "variable": var, "value": values})


def test_forward_fill_example():
    out = impute_missing(events([5, None, 7]), ImputationPolicy.FORWARD_FILL)
    assert out["value"].tolist() == [5, 5, 7]


def test_leading_missing_uses_median():
    out = impute_missing(events([None, 8, 4]), "FORWARD_FILL", medians={"hr": 6.0})
    assert out["value"].tolist() == [6, 8, 4]


def test_cohort_median_and_drop():
    assert impute_missing(events([1, None, 5]), "COHORT_MEDIAN", {"hr": 3.0})["value"].tolist() == [1, 3, 5]
    assert impute_missing(events([1, None, 5]), "DROP")["value"].tolist() == [1, 5]


def test_all_missing_variable_falls_back_to_median():
    df = pd.concat([events([None, None], pid="a"), events([4, 6], pid="b")], ignore_index=True)
    out = impute_missing(df, "FORWARD_FILL")
    assert out[out.patient_id == "a"]["value"].tolist() == [5, 5]


def test_random_missingness_fully_imputed_and_observed_kept():
    rng = np.random.default_rng(1)
    rows = []
    for p in range(30):
        for t in range(6):
            for var in ("hr", "bp"):
                rows.append((f"p{p}", t, var, None if rng.random() < 0.3 else float(rng.normal())))
    df = pd.DataFrame(rows, columns=["patient_id", "timestamp", "variable", "value"])
    for policy in ImputationPolicy:
        out = impute_missing(df, policy)
        assert out["value"].notna().all()
        observed = df["value"].notna()
        kept = out.index.intersection(df.index[observed])
        assert (out.loc[kept, "value"] == df.loc[kept, "value"]).all()


# --- filtering ------------------------------------------------------------------

def test_filter_removes_single_visit_record():
    cohort = random_cohort(30, seed=2)
    out = filter_cohort(cohort, [("visits", ">=", 2)])
    assert all(r.n_visits >= 2 for r in out)
    assert len(out) == sum(r.n_visits >= 2 for r in cohort)


def test_empty_filter_identity(small_cohort):
    assert filter_cohort(small_cohort, []) is small_cohort


def test_unknown_attribute_named(small_cohort):
    with pytest.raises(KeyError, match="nonexistent"):
        filter_cohort(small_cohort, [("nonexistent", "==", 1)])


def test_random_predicates_match_oracle_and_idempotent():
    cohort = random_cohort(80, seed=6)
    rng = random.Random(0)
    for _ in range(20):
        preds = []
        for _ in range(rng.randint(1, 3)):
            kind = rng.choice(["visits", "ethnicity", "outcome", "gender"])
            if kind == "visits":
                preds.append(("visits", rng.choice(["<", "<=", ">", ">=", "==", "!="]), rng.randint(1, 4)))
            elif kind == "outcome":
                preds.append(("outcome", "==", rng.randint(0, 1)))
            elif kind == "gender":
                preds.append(("gender", "!=", rng.choice("MF")))
            else:
                preds.append(("ethnicity", "in", rng.sample(["White", "Black", "Asian", "Others", "Hispanic"], 2)))
        ops = {"<": lambda a, b: a < b, "<=": lambda a, b: a <= b, ">": lambda a, b: a > b,
               ">=": lambda a, b: a >= b, "==": lambda a, b: a == b, "!=": lambda a, b: a != b, "in": lambda a, b: a in b}

        def value(r, attr):
            return {"visits": len(r.visits), "outcome": r.outcome}.get(attr, r.static.get(attr))

        expected = [r for r in cohort if all(ops[op](value(r, a), v) for a, op, v in preds)]
        out = filter_cohort(cohort, preds)
        assert list(out.records) == expected
        assert filter_cohort(out, preds).records == out.records


def test_evaluate_predicate_unknown_operator(small_cohort):
    with pytest.raises(ValueError):
        evaluate_predicate(small_cohort[0], "visits", "~", 1)


# --- tables -> cohort -------------------------------------------------------------

def test_group_ethnicity_default_rules():
    assert group_ethnicity("WHITE - RUSSIAN") == "White"
    assert group_ethnicity("HISPANIC OR LATINO") == "Hispanic"
    assert group_ethnicity("BLACK/AFRICAN AMERICAN") == "Black"
    assert group_ethnicity("ASIAN - CHINESE") == "Asian"
    assert group_ethnicity("UNKNOWN/NOT SPECIFIED") == "Others"
    assert group_ethnicity("X", {"X": "White"}) == "White"


def test_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(n_lab_bins=1)
    with pytest.raises(ValueError):
        PreprocessConfig(ethnicity_grouping={"a": " "})


def _tables():
    ev = pd.DataFrame(
        [
            ("1", 0, "dx", "d_401"), ("1", 0, "hr", 80), ("1", 1, "dx", "d_250"), ("1", 1, "hr", None),
            ("2", 0, "dx", "d_401"), ("2", 0, "hr", 120), ("3", 0, "dx", "d_250"), ("3", 0, "hr", 60),
        ],
        columns=["patient_id", "timestamp", "variable", "value"],
    )
    st_ = pd.DataFrame(
        [("1", "WHITE", 0, "ph1"), ("2", "BLACK/AFRICAN", 1, ""), ("3", "ASIAN", 0, None), ("4", "WHITE", 0, None)],
        columns=["patient_id", "ethnicity", "outcome", "labels"],
    )
    return ev, st_


def test_cohort_from_tables():
    ev, st_ = _tables()
    cohort = cohort_from_tables(ev, st_, PreprocessConfig(n_lab_bins=2, min_code_count=1))
    assert [r.patient_id for r in cohort] == ["1", "2", "3"]  # patient 4 has no events
    p1 = cohort[0]
    assert p1.static["ethnicity"] == "White" and p1.labels == frozenset({"ph1"})
    assert p1.n_visits == 2
    # second hr value is forward-filled from 80
    assert p1.visits[0] & {c for c in p1.visits[0] if c.startswith("lab:hr:")} == p1.visits[1] - {"d_250"}
    assert cohort[1].outcome == 1 and cohort[1].static["ethnicity"] == "Black"


def test_preprocess_files(tmp_path):
    ev, st_ = _tables()
    ev.to_csv(tmp_path / "events.csv", index=False)
    st_.to_csv(tmp_path / "static.csv", index=False)
    cohort = preprocess_files(tmp_path / "events.csv", tmp_path / "static.csv", PreprocessConfig(n_lab_bins=2, min_code_count=1))
    assert len(cohort) == 3
