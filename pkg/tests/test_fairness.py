from __future__ import annotations

import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fairsynth.downstream import PredictorConfig
from fairsynth.fairness import (
    Aggregation,
    FairnessConfig,
    FairnessObjective,
    FairnessReport,
    GroupLabeling,
    aggregate,
    di_loss,
    disparate_impact,
    downstream_feedback,
    fairness_report,
    feedback_loss,
    fo_loss,
    get_objective,
    register_objective,
    worst_tpr,
    wtpr_surrogate,
)
from fairsynth.splits import split
from fairsynth.toy import ToyCohortConfig, generate_toy_cohort

import oracles


def labeling(assignment, groups=("A", "B"), reference=None):
    return GroupLabeling(tuple(groups), np.asarray(assignment), reference)


# --- group labeling ------------------------------------------------------------

def test_reference_defaults_to_largest_group():
    g = GroupLabeling.from_values(["x", "y", "y", "z", "y", "x"])
    assert g.groups == ("y", "x", "z") and g.reference == "y"
    assert GroupLabeling.from_values(["x", "y"], reference_group="x").reference == "x"


def test_labeling_validation():
    with pytest.raises(ValueError):
        GroupLabeling((), np.zeros(0))
    with pytest.raises(ValueError):
        GroupLabeling(("A", "A"), np.zeros(2))
    with pytest.raises(ValueError):
        GroupLabeling(("A",), np.array([1]))
    with pytest.raises(ValueError):
        GroupLabeling(("A",), np.array([0]), "B")


# --- di_loss --------------------------------------------------------------------

def test_equal_rates_zero_loss():
    P = np.array([[0.9], [0.1], [0.8], [0.2]])
    assert float(di_loss(P, labeling([0, 0, 1, 1]))) == 0.0


def test_half_rate_example():
    # group A rate 0.2, reference B rate 0.4
    P = np.zeros((10, 1))
    P[0] = 0.9
    P[5:7] = 0.9
    g = labeling([0] * 5 + [1] * 5, reference="B")
    assert float(di_loss(P, g)) == pytest.approx(0.5, abs=1e-12)


def test_zero_reference_rate_caps_loss():
    P = np.array([[0.9], [0.1]])
    with pytest.warns(UserWarning, match="reference"):
        assert float(di_loss(P, labeling([0, 1], reference="B"))) == 1.0


def test_di_loss_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for trial in range(5):
        P = rng.uniform(size=(100, 30))
        assignment = rng.integers(0, 3, size=100)
        g = labeling(assignment, groups=("A", "B", "C"))
        expected = oracles.di_loss_hard(P.tolist(), assignment.tolist(), g.reference_index)
        assert float(di_loss(P, g)) == pytest.approx(expected, abs=1e-12)


def test_hard_and_soft_agree_away_from_threshold():
    rng = np.random.default_rng(1)
    for _ in range(20):
        P = rng.uniform(size=(60, 10))
        P = np.where(P < 0.5, P * 0.8, 0.6 + (P - 0.5) * 0.8)  # nothing inside [0.4, 0.6]
        g = labeling(rng.integers(0, 2, size=60))
        hard = float(di_loss(P, g))
        soft = float(di_loss(P, g, soft=True, temperature=0.01))
        assert abs(hard - soft) < 0.01


# --- fo_loss ----------------------------------------------------------------------

def test_single_group_is_zero():
    P = np.random.default_rng(2).uniform(size=(5, 3, 4))
    assert float(fo_loss(P, labeling([0] * 5, groups=("A",)), "di")) == 0.0


def test_dispatch_matches_di_loss():
    rng = np.random.default_rng(3)
    P = rng.uniform(size=(12, 6))
    g = labeling(rng.integers(0, 2, size=12))
    assert float(fo_loss(P, g, "di", soft=False)) == float(di_loss(P, g))


def test_unregistered_objective_lists_names():
    with pytest.raises(KeyError, match="di.*wtpr"):
        fo_loss(np.zeros((2, 2)), labeling([0, 1]), "nope")


def test_fo_loss_matches_per_group_accumulation_oracle():
    rng = np.random.default_rng(4)
    N, T, C = 20, 4, 5
    P = rng.uniform(0, 0.6, size=(N, T, C))
    M = rng.integers(0, 2, size=(N, T, C))
    assignment = rng.integers(0, 3, size=N)
    assignment[:3] = [0, 1, 2]
    g = labeling(assignment, groups=("A", "B", "C"))
    summed = [[sum(P[i, t, c] * M[i, t, c] for t in range(T)) for c in range(C)] for i in range(N)]
    expected = oracles.di_loss_hard(summed, assignment.tolist(), g.reference_index)
    assert float(fo_loss(P, g, "di", mask=M, soft=False)) == pytest.approx(expected, abs=1e-12)


def test_aggregation_modes():
    P = torch.tensor([[[0.2, 0.4], [0.6, 0.8]]], dtype=torch.float64)
    M = torch.tensor([[[1, 1], [1, 0]]], dtype=torch.float64)
    assert torch.allclose(aggregate(P, M, Aggregation.MASKED_SUM), torch.tensor([[0.8, 0.4]], dtype=torch.float64))
    assert torch.allclose(aggregate(P, M, "MASKED_MEAN"), torch.tensor([[0.4, 0.4]], dtype=torch.float64))


def test_registered_custom_objective():
    register_objective(FairnessObjective("mean_gap", lambda P, groups, **_: P.mean() * 0 + 0.25))
    assert float(fo_loss(np.ones((2, 1)), labeling([0, 1]), "mean_gap")) == 0.25
    assert get_objective("mean_gap").aggregation is Aggregation.MASKED_SUM


# --- disparate impact -----------------------------------------------------------

def test_disparate_impact_examples():
    g = labeling([0, 0, 1, 1])
    assert disparate_impact([1, 0, 1, 0], g) == 1.0
    g8 = labeling([0] * 4 + [1] * 4, reference="B")
    assert disparate_impact([1, 0, 0, 0, 1, 1, 0, 0], g8) == 0.5


def test_disparate_impact_zero_reference_is_nan():
    with pytest.warns(UserWarning, match="undefined"):
        assert np.isnan(disparate_impact([1, 0], labeling([0, 1], reference="B")))


def test_disparate_impact_matches_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pred = rng.integers(0, 2, size=50)
        assignment = rng.integers(0, 4, size=50)
        assignment[:4] = range(4)
        g = labeling(assignment, groups=("A", "B", "C", "D"))
        if pred[assignment == g.reference_index].sum() == 0:
            continue
        expected = oracles.disparate_impact(pred.tolist(), assignment.tolist(), g.reference_index)
        assert disparate_impact(pred, g) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 2)), min_size=3, max_size=40), st.integers(2, 4))
def test_property_di_scale_free_and_permutation_invariant(rows, k):
    pred = np.array([r[0] for r in rows])
    assignment = np.array([r[1] for r in rows])
    g = labeling(assignment, groups=("A", "B", "C"))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = disparate_impact(pred, g)
        dup = disparate_impact(np.tile(pred, k), labeling(np.tile(assignment, k), groups=("A", "B", "C")))
        perm = np.random.default_rng(k).permutation(len(pred))
        shuffled = disparate_impact(pred[perm], labeling(assignment[perm], groups=("A", "B", "C")))
    assert (np.isnan(base) and np.isnan(dup)) or base == pytest.approx(dup, abs=1e-12)
    assert (np.isnan(base) and np.isnan(shuffled)) or base == pytest.approx(shuffled, abs=1e-12)


# --- worst-case TPR ----------------------------------------------------------------

def test_worst_tpr_examples():
    y = np.ones(20, dtype=int)
    g = labeling([0] * 10 + [1] * 10)
    assert worst_tpr(y, y, g) == 1.0
    pred = np.array([1] * 8 + [0] * 2 + [1] * 5 + [0] * 5)
    assert worst_tpr(pred, y, g) == 0.5


def test_worst_tpr_no_eligible_group():
    with pytest.raises(ValueError, match="no group meets minimum positive count"):
        worst_tpr([1, 1], [1, 0], labeling([0, 1]), min_positives=5)


def test_worst_tpr_matches_confusion_oracle_and_lists_excluded():
    rng = np.random.default_rng(6)
    for _ in range(20):
        pred, y = rng.integers(0, 2, size=80), rng.integers(0, 2, size=80)
        assignment = rng.integers(0, 4, size=80)
        g = labeling(assignment, groups=("A", "B", "C", "D"))
        expected = oracles.worst_tpr(pred.tolist(), y.tolist(), assignment.tolist(), 8)
        if expected is None:
            continue
        assert worst_tpr(pred, y, g, min_positives=8) == pytest.approx(expected, abs=1e-12)
        report = fairness_report(pred, y, g, min_positives=8)
        assert report.wtpr == min(report.per_group_tpr.values())
        assert all(report.wtpr <= t for t in report.per_group_tpr.values())
        for name in report.excluded_groups:
            members = assignment == ("A", "B", "C", "D").index(name)
            assert y[members].sum() < 8


def test_report_json_round_trip():
    g = labeling([0, 0, 1, 1])
    report = fairness_report([1, 0, 1, 1], [1, 1, 1, 1], g, min_positives=1)
    d = report.to_dict()
    assert d["di"] == 2.0 and d["per_group_tpr"] == {"A": 0.5, "B": 1.0}
    assert d["n_per_group"] == {"A": 2, "B": 2} and '"wtpr": 0.5' in report.to_json()


# --- WTPR surrogate ---------------------------------------------------------------

def test_surrogate_zero_when_all_detected():
    P = np.full((6, 1), 0.99)
    y = np.ones((6, 1))
    assert float(wtpr_surrogate(P, y, labeling([0, 0, 0, 1, 1, 1]), temperature=0.01)) == pytest.approx(0.0, abs=1e-9)


def test_surrogate_approaches_hard_metric():
    rng = np.random.default_rng(7)
    P = np.where(rng.random(40) < 0.6, 0.95, 0.05)[:, None]
    y = rng.integers(0, 2, size=(40, 1))
    y[:4] = 1
    assignment = rng.integers(0, 2, size=40)
    assignment[:2] = [0, 1]
    g = labeling(assignment)
    hard = worst_tpr(P[:, 0] > 0.5, y[:, 0], g, min_positives=1)
    soft = float(wtpr_surrogate(P, y, g, temperature=1e-3))
    assert abs(soft - (1 - hard)) < 0.01


def test_surrogate_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(8)
    P = torch.rand(8, 1, generator=gen, dtype=torch.float64) * 0.6 + 0.2
    y = torch.tensor([[1], [1], [0], [1], [1], [1], [0], [1]], dtype=torch.float64)
    g = labeling([0, 0, 0, 0, 1, 1, 1, 1])
    fn = lambda p: wtpr_surrogate(p, y, g, temperature=0.2)  # noqa: E731
    x = P.clone().requires_grad_(True)
    fn(x).backward()
    numeric = torch.zeros_like(P)
    h = 1e-6
    for i in range(8):
        up, down = P.clone(), P.clone()
        up[i, 0] += h
        down[i, 0] -= h
        numeric[i, 0] = (fn(up) - fn(down)) / (2 * h)
    assert float((x.grad - numeric).norm() / numeric.norm()) < 1e-4


def test_objective_invariant_under_permutation():
    rng = np.random.default_rng(9)
    P = rng.uniform(size=(30, 3, 4))
    y = rng.integers(0, 2, size=(30, 3, 4))
    assignment = rng.integers(0, 2, size=30)
    perm = rng.permutation(30)
    for name in ("di", "wtpr"):
        a = fo_loss(P, labeling(assignment), name, labels=y, soft=True)
        b = fo_loss(P[perm], labeling(assignment[perm]), name, labels=y[perm], soft=True)
        assert float(a) == pytest.approx(float(b), abs=1e-12)


# --- downstream feedback ------------------------------------------------------------

def _report(di: float, wtpr: float) -> FairnessReport:
    return FairnessReport(di, wtpr, {}, {}, {})


def test_feedback_loss_definitions():
    assert feedback_loss(_report(1.0, 0.3), "di") == 0.0
    assert feedback_loss(_report(0.4, 1.0), "wtpr") == 0.0
    assert feedback_loss(_report(1.5, 0.25), "DI") == 0.5
    assert feedback_loss(_report(0.5, 0.25), "wtpr") == 0.75
    assert feedback_loss(_report(float("nan"), 0.25), "di") == 0.0
    with pytest.raises(ValueError):
        feedback_loss(_report(1.0, 1.0), "f1")


def test_downstream_feedback_reproducible():
    base = ToyCohortConfig()
    cohort = generate_toy_cohort(ToyCohortConfig(
        n_patients=600, seed=4, signal_strength=0.9, base_mortality={g: 0.4 for g in base.base_mortality}))
    synth, _, real_val = split(cohort, (0.5, 0.0, 0.5), seed=1)
    cfg = PredictorConfig(embed_dim=16, n_heads=2, epochs=10, learning_rate=1e-2, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # a defined DI and WTPR, no fallback
        for metric in ("di", "wtpr"):
            a = downstream_feedback(synth, real_val, cfg, metric, seed=3)
            b = downstream_feedback(synth, real_val, cfg, metric, seed=3)
            assert 0 <= a <= 1 and abs(a - b) <= 1e-9


def test_downstream_feedback_fails_open():
    cohort = generate_toy_cohort(ToyCohortConfig(n_patients=20, seed=4))
    with pytest.warns(UserWarning, match="downstream feedback failed"):
        assert downstream_feedback(cohort.subset([]), cohort) == 0.0


def test_fairness_config_validation():
    assert FairnessConfig().objective == "di" and FairnessConfig().temperature == 0.05
    with pytest.raises(KeyError):
        FairnessConfig(objective="nope")
    with pytest.raises(ValueError):
        FairnessConfig(targets="visits")
    with pytest.raises(ValueError):
        FairnessConfig(temperature=0)
