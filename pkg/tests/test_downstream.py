from __future__ import annotations

import csv
import dataclasses
import random

import numpy as np
import pytest
import torch

from fairsynth.data import Cohort, PatientRecord
from fairsynth.downstream import (
    PredictionResult,
    PredictorConfig,
    build_features,
    evaluate,
    f1_score,
    load_predictor,
    predict,
    predict_proba,
    save_predictor,
    train_predictor,
    write_predictions,
)

import oracles
from conftest import random_cohort, random_records

TINY = dict(embed_dim=16, n_heads=2, dropout=0.0)


@dataclasses.dataclass
class _Unvalidated:
    records: tuple
    vocabulary: object

    def __len__(self) -> int:
        return len(self.records)


def separable_cohort(n: int, seed: int) -> Cohort:
    """Outcome is 1 exactly when code d_000 appears in some visit."""
    records = [
        dataclasses.replace(r, outcome=int(any("d_000" in v for v in r.visits)))
        for r in random_records(n, seed=seed, n_codes=8)
    ]
    return Cohort.from_records(records, min_code_count=1)


@pytest.fixture(scope="module")
def separable():
    return separable_cohort(300, seed=21)


@pytest.fixture(scope="module")
def fitted(separable):
    return train_predictor(separable, None, PredictorConfig(**TINY, epochs=25, learning_rate=1e-2, seed=1))


# --- features -------------------------------------------------------------------

def test_single_visit_record_features():
    one = Cohort.from_records([PatientRecord("x", {"ethnicity": "White", "gender": "F"},
                                             frozenset({"ph0"}), (frozenset({"d_001", "lab:hr:1"}),))],
                              min_code_count=1)
    bundle = build_features(one)
    assert bundle.visits.shape[:2] == (1, 1) and bundle.visit_mask.tolist() == [[True]]
    cols = one.vocabulary.visit_indices
    on = {one.vocabulary.codes[cols[j]] for j in np.flatnonzero(bundle.visits[0, 0])}
    assert on == {"d_001", "lab:hr:1"}
    assert bundle.labels.tolist() == [[1]] and bundle.label_mask.all()
    assert bundle.demographics.shape == (1, 2) and bundle.demographic_mask.all()


def test_zero_visit_records_excluded_with_warning():
    records = random_records(40, seed=3)
    rng = random.Random(0)
    emptied = [dataclasses.replace(r, visits=()) if rng.random() < 0.25 else r for r in records]
    # Cohort rejects empty records, so a bare stand-in carries them here.
    vocab = Cohort.from_records(records, min_code_count=1).vocabulary
    cohort = _Unvalidated(tuple(emptied), vocab)
    expected = sum(r.n_visits >= 1 for r in emptied)
    assert expected < len(emptied)
    with pytest.warns(UserWarning, match="without visits excluded"):
        bundle = build_features(cohort)
    assert len(bundle) == expected
    assert bundle.patient_ids == [r.patient_id for r in emptied if r.n_visits]


def test_padding_mask_matches_lengths(small_cohort):
    bundle = build_features(small_cohort)
    assert bundle.visit_mask.sum(1).tolist() == [r.n_visits for r in small_cohort]
    assert bundle.visits[~bundle.visit_mask].sum() == 0


def test_padding_is_masked_out_of_attention(separable):
    model = train_predictor(separable, None, PredictorConfig(**TINY, seed=2))
    short = [i for i, r in enumerate(separable) if r.n_visits == 1][:1]
    long = [i for i, r in enumerate(separable) if r.n_visits == 4][:1]
    alone = predict_proba(model, separable.subset(short))[1]
    padded = predict_proba(model, separable.subset(short + long))[1]
    assert abs(alone[0] - padded[0]) < 1e-6


# --- training -------------------------------------------------------------------

def test_separable_cohort_reaches_high_train_f1(separable, fitted):
    results = predict(fitted, separable)
    f1 = f1_score([r.decision for r in results], [r.label for r in results])
    assert f1 >= 0.95


def test_same_seed_same_validation_loss():
    train = separable_cohort(120, seed=4)
    idx = list(range(len(train)))
    tr, va = train.subset(idx[:90]), train.subset(idx[90:])
    cfg = PredictorConfig(**{**TINY, "dropout": 0.1}, epochs=2, seed=7)
    a, b = train_predictor(tr, va, cfg), train_predictor(tr, va, cfg)
    assert abs(a.history[-1]["val_loss"] - b.history[-1]["val_loss"]) <= 1e-9


def test_shuffled_labels_give_chance_level_f1():
    cohort = separable_cohort(400, seed=5)
    rng = np.random.default_rng(0)
    shuffled_outcomes = rng.permutation([r.outcome for r in cohort])
    shuffled = Cohort(tuple(dataclasses.replace(r, outcome=int(y)) for r, y in zip(cohort, shuffled_outcomes)),
                      cohort.vocabulary)
    train, test = shuffled.subset(range(300)), shuffled.subset(range(300, 400))
    # long enough to memorize noise, so decisions are mixed rather than constant
    model = train_predictor(train, None, PredictorConfig(**TINY, epochs=30, learning_rate=1e-2, seed=3))
    results = predict(model, test)
    decisions = np.array([r.decision for r in results])
    labels = np.array([r.label for r in results])
    assert 0 < decisions.sum() < len(decisions)
    observed = f1_score(decisions, labels)
    # permutation null: same decisions against re-shuffled labels
    null = np.array([oracles.f1(decisions.tolist(), rng.permutation(labels).tolist()) for _ in range(500)])
    lo, hi = np.quantile(null, [0.005, 0.995])
    assert lo <= observed <= hi


def test_training_input_errors(small_cohort):
    with pytest.raises(ValueError, match="empty"):
        train_predictor(small_cohort.subset([]), None, PredictorConfig(**TINY))
    with pytest.raises(ValueError, match="share"):
        train_predictor(small_cohort, small_cohort.subset([0, 1]), PredictorConfig(**TINY))
    other = random_cohort(10, seed=77, n_codes=30)
    with pytest.raises(ValueError, match="vocabularies"):
        train_predictor(small_cohort, other, PredictorConfig(**TINY))


def test_config_validation():
    assert (PredictorConfig().embed_dim, PredictorConfig().learning_rate, PredictorConfig().batch_size) == (128, 1e-3, 64)
    with pytest.raises(ValueError):
        PredictorConfig(embed_dim=10, n_heads=3)
    with pytest.raises(ValueError):
        PredictorConfig(epochs=0)


# --- prediction -------------------------------------------------------------------

def test_zero_head_gives_half_and_negative_decisions(small_cohort):
    model = train_predictor(small_cohort, None, PredictorConfig(**TINY))
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    results = predict(model, small_cohort)
    assert len(results) == len(small_cohort)
    assert all(r.probability == 0.5 and r.decision == 0 for r in results)


def test_vocabulary_mismatch_rejected(fitted, small_cohort):
    with pytest.raises(ValueError, match="vocabulary"):
        predict(fitted, small_cohort)


def test_batch_partitioning_does_not_change_probabilities(fitted, separable):
    _, whole = predict_proba(fitted, separable, batch_size=512)
    _, pieces = predict_proba(fitted, separable, batch_size=7)
    assert np.max(np.abs(whole - pieces)) <= 1e-6


def test_results_carry_labels_and_groups(fitted, separable):
    results = predict(fitted, separable)
    assert [r.patient_id for r in results] == separable.patient_ids
    assert all(0 <= r.probability <= 1 and r.decision == int(r.probability > 0.5) for r in results)
    assert [r.group for r in results] == separable.group_values()


# --- evaluation -------------------------------------------------------------------

def _results(decisions, labels, groups):
    return [PredictionResult(f"p{i}", 0.9 if d else 0.1, int(d), int(y), g)
            for i, (d, y, g) in enumerate(zip(decisions, labels, groups))]


def test_f1_examples():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    assert f1_score([0, 0, 0], [1, 0, 1]) == 0.0
    with pytest.warns(UserWarning, match="no positive labels"):
        assert f1_score([1, 0], [0, 0]) == 0.0


def test_f1_matches_confusion_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d, y = rng.integers(0, 2, size=60), rng.integers(0, 2, size=60)
        y[0] = 1
        assert f1_score(d, y) == pytest.approx(oracles.f1(d.tolist(), y.tolist()), abs=1e-12)


def test_evaluate_combines_f1_and_fairness():
    rng = np.random.default_rng(2)
    d, y = rng.integers(0, 2, size=200), rng.integers(0, 2, size=200)
    groups = rng.choice(["A", "B", "C"], size=200).tolist()
    ev = evaluate(_results(d, y, groups), min_positives=5)
    ref = max(set(groups), key=lambda g: (groups.count(g), -"ABC".index(g)))
    assert ev.f1 == pytest.approx(oracles.f1(d.tolist(), y.tolist()))
    assert ev.di == pytest.approx(oracles.disparate_impact(d.tolist(), groups, ref))
    assert ev.wtpr == pytest.approx(oracles.worst_tpr(d.tolist(), y.tolist(), groups, 5))
    assert ev.n == 200 and set(ev.to_dict()) == {"f1", "di", "wtpr", "n", "fairness"}


def test_metrics_depend_only_on_decisions():
    rng = np.random.default_rng(3)
    d, y = rng.integers(0, 2, size=80), rng.integers(0, 2, size=80)
    groups = rng.choice(["A", "B"], size=80).tolist()
    base = _results(d, y, groups)
    jittered = [dataclasses.replace(r, probability=rng.uniform(0.51, 1) if r.decision else rng.uniform(0, 0.5))
                for r in base]
    assert evaluate(base).to_dict() == evaluate(jittered).to_dict()


def test_evaluate_empty_rejected():
    with pytest.raises(ValueError):
        evaluate([])


# --- files ------------------------------------------------------------------------

def test_prediction_csv(tmp_path, fitted, separable):
    results = predict(fitted, separable.subset(range(5)))
    write_predictions(results, tmp_path / "p.csv")
    rows = list(csv.DictReader((tmp_path / "p.csv").open()))
    assert list(rows[0]) == ["patient_id", "probability", "decision", "label", "group"]
    assert [float(r["probability"]) for r in rows] == [r.probability for r in results]


def test_predictor_checkpoint_round_trip(tmp_path, fitted, separable):
    save_predictor(fitted, tmp_path / "m.pt")
    back = load_predictor(tmp_path / "m.pt")
    assert np.array_equal(predict_proba(back, separable)[1], predict_proba(fitted, separable)[1])
    assert back.history == fitted.history
