"""Transformer mortality predictor and its evaluation.

Three feature streams (visit codes, phenotype labels, demographic tokens)
each pass through their own bidirectional transformer stack; the three
summary vectors are concatenated and mapped to a single logit.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Cohort, CodeVocabulary, label_token, static_token
from .fairness import FairnessReport, GroupLabeling, fairness_report
from .transformer import TransformerBlock, init_weights

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fairsynth-predictor/1"
THRESHOLD = 0.5


@dataclass
class PredictorConfig:
    embed_dim: int = 128
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 1
    n_heads: int = 4
    n_layers: int = 1
    dropout: float = 0.1
    max_visits: int = 64
    # Optional BCE weight on positive examples; None trains the plain loss.
    positive_weight: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if min(self.embed_dim, self.n_heads, self.n_layers, self.batch_size, self.epochs, self.max_visits) < 1:
            raise ValueError("predictor sizes must be positive")
        if self.learning_rate <= 0 or not 0 <= self.dropout < 1:
            raise ValueError("invalid learning rate or dropout")


@dataclass
class FeatureBundle:
    """Padded per-patient features; ``*_mask`` arrays are True on real entries.

    ``visits`` is ``(N, V, n_visit_codes)`` multi-hot over the medical and lab
    sections; ``labels`` and ``demographics`` hold 1-based token ids with 0 as
    padding.
    """

    visits: np.ndarray
    visit_mask: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    demographics: np.ndarray
    demographic_mask: np.ndarray
    outcome: np.ndarray
    groups: list[str]
    patient_ids: list[str]

    def __len__(self) -> int:
        return len(self.patient_ids)


def _padded(rows: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max([len(r) for r in rows] + [1])
    ids = np.zeros((len(rows), width), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, ids > 0


def build_features(cohort: Cohort, max_visits: int = 64) -> FeatureBundle:
    """Featurize every record with at least one visit; the most recent ``max_visits`` visits are kept."""
    vocab = cohort.vocabulary
    visit_cols = vocab.visit_indices
    column_of = {int(c): j for j, c in enumerate(visit_cols)}
    label_start = vocab.section_range("label").start
    static_start = vocab.section_range("static").start
    kept = [r for r in cohort.records if r.n_visits > 0]
    if len(kept) < len(cohort):
        warnings.warn(f"{len(cohort) - len(kept)} records without visits excluded", stacklevel=2)
    V = min(max([r.n_visits for r in kept] + [1]), max_visits)
    visits = np.zeros((len(kept), V, len(visit_cols)), dtype=np.float32)
    visit_mask = np.zeros((len(kept), V), dtype=bool)
    label_rows, demo_rows = [], []
    for i, record in enumerate(kept):
        for t, visit in enumerate(record.visits[-V:]):
            for code in visit:
                visits[i, t, column_of[vocab.index(code)]] = 1.0
            visit_mask[i, t] = True
        label_rows.append(sorted(vocab.index(label_token(x)) - label_start + 1 for x in record.labels))
        demo_rows.append(sorted(vocab.index(static_token(k, v)) - static_start + 1 for k, v in record.static.items()))
    labels, label_mask = _padded(label_rows)
    demographics, demographic_mask = _padded(demo_rows)
    attr = vocab.sensitive_attribute
    return FeatureBundle(
        visits=visits,
        visit_mask=visit_mask,
        labels=labels,
        label_mask=label_mask,
        demographics=demographics,
        demographic_mask=demographic_mask,
        outcome=np.array([r.outcome for r in kept], dtype=np.float32),
        groups=[r.static[attr] for r in kept],
        patient_ids=[r.patient_id for r in kept],
    )


class _Stream(nn.Module):
    """A learned summary token prepended to one feature sequence, then a bidirectional stack."""

    def __init__(self, embed_dim: int, n_heads: int, n_layers: int, dropout: float):
        super().__init__()
        self.summary = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(embed_dim, n_heads, 4 * embed_dim, dropout=dropout, causal=False) for _ in range(n_layers)
        )

    def forward(self, h: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B = h.shape[0]
        h = torch.cat([self.summary.expand(B, -1, -1), h], dim=1)
        mask = torch.cat([torch.ones(B, 1, dtype=torch.bool), mask], dim=1)
        for block in self.blocks:
            h = block(h, key_padding_mask=mask)
        return h[:, 0]


class PredictorModel(nn.Module):
    def __init__(self, vocab: CodeVocabulary, config: PredictorConfig):
        super().__init__()
        D = config.embed_dim
        self.vocab = vocab
        self.config = config
        self.visit_projection = nn.Linear(len(vocab.visit_indices), D)
        self.visit_position = nn.Embedding(config.max_visits, D)
        self.label_embedding = nn.Embedding(len(vocab.section_range("label")) + 1, D, padding_idx=0)
        self.demographic_embedding = nn.Embedding(len(vocab.section_range("static")) + 1, D, padding_idx=0)
        self.streams = nn.ModuleList(_Stream(D, config.n_heads, config.n_layers, config.dropout) for _ in range(3))
        self.head = nn.Linear(3 * D, 1)
        init_weights(self)
        self.history: list[dict] = []

    def forward(self, visits, visit_mask, labels, label_mask, demographics, demographic_mask) -> torch.Tensor:
        positions = torch.arange(visits.shape[1])
        v = self.visit_projection(visits) + self.visit_position(positions)
        summaries = [
            self.streams[0](v, visit_mask),
            self.streams[1](self.label_embedding(labels), label_mask),
            self.streams[2](self.demographic_embedding(demographics), demographic_mask),
        ]
        return self.head(torch.cat(summaries, dim=-1)).squeeze(-1)


def _tensors(bundle: FeatureBundle, idx) -> tuple[torch.Tensor, ...]:
    return (
        torch.as_tensor(bundle.visits[idx]),
        torch.as_tensor(bundle.visit_mask[idx]),
        torch.as_tensor(bundle.labels[idx]),
        torch.as_tensor(bundle.label_mask[idx]),
        torch.as_tensor(bundle.demographics[idx]),
        torch.as_tensor(bundle.demographic_mask[idx]),
    )


def _loss(model: PredictorModel, bundle: FeatureBundle, idx, pos_weight) -> torch.Tensor:
    logits = model(*_tensors(bundle, idx))
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(bundle.outcome[idx]), pos_weight=pos_weight)


def train_predictor(train: Cohort, val: Cohort | None, config: PredictorConfig | None = None) -> PredictorModel:
    """Train with Adam on BCE; deterministic given ``config.seed``.

    Per-epoch training and validation loss are kept in ``model.history``.
    """
    config = config or PredictorConfig()
    if len(train) == 0:
        raise ValueError("empty training set")
    if val is not None:
        if val.vocabulary.hash != train.vocabulary.hash:
            raise ValueError("train and validation vocabularies differ")
        overlap = set(train.patient_ids) & set(val.patient_ids)
        if overlap:
            raise ValueError(f"train and validation share {len(overlap)} patient ids, e.g. {sorted(overlap)[0]!r}")
    bundle = build_features(train, config.max_visits)
    if len(bundle) == 0:
        raise ValueError("empty training set")
    val_bundle = build_features(val, config.max_visits) if val is not None and len(val) else None
    pos_weight = None if config.positive_weight is None else torch.tensor(float(config.positive_weight))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PredictorModel(train.vocabulary, config)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        order_rng = torch.Generator().manual_seed(config.seed)
        for epoch in range(config.epochs):
            model.train()
            order = torch.randperm(len(bundle), generator=order_rng).numpy()
            total, count = 0.0, 0
            for start in range(0, len(bundle), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = _loss(model, bundle, idx, pos_weight)
                if not torch.isfinite(loss):
                    raise RuntimeError(f"predictor loss diverged at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * len(idx)
                count += len(idx)
            entry = {"epoch": epoch, "train_loss": total / count}
            if val_bundle is not None and len(val_bundle):
                model.eval()
                with torch.no_grad():
                    entry["val_loss"] = float(_loss(model, val_bundle, np.arange(len(val_bundle)), pos_weight))
            model.history.append(entry)
    model.eval()
    return model


@dataclass(frozen=True)
class PredictionResult:
    patient_id: str
    probability: float
    decision: int
    label: int
    group: str


@torch.no_grad()
def predict_proba(model: PredictorModel, cohort: Cohort, batch_size: int = 256) -> tuple[FeatureBundle, np.ndarray]:
    if cohort.vocabulary.hash != model.vocab.hash:
        raise ValueError("cohort vocabulary does not match the predictor")
    model.eval()
    bundle = build_features(cohort, model.config.max_visits)
    probs = np.zeros(len(bundle), dtype=np.float64)
    for start in range(0, len(bundle), batch_size):
        idx = np.arange(start, min(start + batch_size, len(bundle)))
        # Trim padding per batch so results do not depend on batch composition.
        logits = model(*_trim(_tensors(bundle, idx)))
        probs[idx] = torch.sigmoid(logits.double()).numpy()
    return bundle, probs


def _trim(tensors: tuple[torch.Tensor, ...]) -> tuple[torch.Tensor, ...]:
    visits, vmask, labels, lmask, demo, dmask = tensors
    v = max(int(vmask.sum(1).max()), 1)
    lw = max(int(lmask.sum(1).max()), 1)
    dw = max(int(dmask.sum(1).max()), 1)
    return visits[:, :v], vmask[:, :v], labels[:, :lw], lmask[:, :lw], demo[:, :dw], dmask[:, :dw]


def predict(model: PredictorModel, cohort: Cohort, batch_size: int = 256) -> list[PredictionResult]:
    """One result per patient with at least one visit; decision is ``probability > 0.5``."""
    bundle, probs = predict_proba(model, cohort, batch_size)
    return [
        PredictionResult(pid, float(p), int(p > THRESHOLD), int(y), g)
        for pid, p, y, g in zip(bundle.patient_ids, probs, bundle.outcome, bundle.groups)
    ]


@dataclass
class Evaluation:
    f1: float
    di: float
    wtpr: float
    n: int
    fairness: FairnessReport = field(repr=False, default=None)  # type: ignore[assignment]

    def to_dict(self) -> dict:
        out = {"f1": self.f1, "di": self.di, "wtpr": self.wtpr, "n": self.n}
        out = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in out.items()}
        out["fairness"] = self.fairness.to_dict() if self.fairness is not None else None
        return out


def f1_score(decisions, labels) -> float:
    pred = np.asarray(decisions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if not y.any():
        warnings.warn("no positive labels; F1 defined as 0", stacklevel=2)
        return 0.0
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return 2 * tp / (2 * tp + fp + fn)


def evaluate(
    results: Sequence[PredictionResult],
    min_positives: int = 5,
    reference_group: str | None = None,
    groups: Sequence[str] | None = None,
) -> Evaluation:
    """F1, DI and worst-group TPR from the decisions only."""
    if len(results) == 0:
        raise ValueError("no results to evaluate")
    decisions = np.array([r.decision for r in results])
    labels = np.array([r.label for r in results])
    values = [r.group for r in results]
    if groups is not None:
        groups = [g for g in groups if g in set(values)] + sorted(set(values) - set(groups))
    if reference_group is not None and reference_group not in values:
        reference_group = None
    labeling = GroupLabeling.from_values(values, groups=groups, reference_group=reference_group)
    report = fairness_report(decisions, labels, labeling, min_positives)
    return Evaluation(f1=f1_score(decisions, labels), di=report.di, wtpr=report.wtpr, n=len(results), fairness=report)


def write_predictions(results: Sequence[PredictionResult], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "probability", "decision", "label", "group"])
        for r in results:
            writer.writerow([r.patient_id, repr(r.probability), r.decision, r.label, r.group])


def save_predictor(model: PredictorModel, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocabulary": model.vocab.to_dict(),
        "vocabulary_hash": model.vocab.hash,
        "state_dict": model.state_dict(),
        "history": [dict(h) for h in model.history],
        "rng_state": torch.get_rng_state(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_predictor(path: str | Path) -> PredictorModel:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a predictor checkpoint")
    vocab = CodeVocabulary.from_dict(payload["vocabulary"])
    if vocab.hash != payload["vocabulary_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    model = PredictorModel(vocab, PredictorConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.history = list(payload["history"])
    model.eval()
    return model
