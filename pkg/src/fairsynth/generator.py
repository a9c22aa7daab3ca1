"""Hierarchical autoregressive EHR generator with a fairness-regularized loss.

A causal transformer decoder summarizes visits ``0..t``; a masked
(MADE-style) code head turns that summary plus the already-known codes of
visit ``t+1`` into per-code Bernoulli probabilities in vocabulary order.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import END_RECORD, Cohort, CodeVocabulary, Provenance, decode_matrix, encode_cohort
from .fairness import FairnessConfig, FairnessObjective, GroupLabeling, fo_loss, get_objective
from .transformer import TransformerBlock, init_weights, masked_attention  # noqa: F401  (re-export)

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
CHECKPOINT_FORMAT = "fairsynth-generator/1"


@dataclass
class GeneratorConfig:
    T_max: int = 8
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 128
    head_layers: int = 2
    learning_rate: float = 1e-4
    batch_size: int = 10
    sample_batch_size: int = 25
    lambda_: float = 1.2
    # Overrides the fairness section's objective when set.
    fairness_objective: str | None = None
    epochs: int = 1
    # Downstream feedback refresh period in epochs; 0 disables it.
    feedback_period: int = 0
    feedback_metric: str = "di"
    feedback_samples: int = 500
    # "actionable": optimize l_bce + lambda * (1 + l_df) * l_f.
    # "literal": optimize the branch value exactly (l_df carries no gradient).
    feedback_mode: str = "actionable"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if min(self.T_max - 2, self.n_layers, self.n_heads, self.embed_dim, self.head_layers,
               self.batch_size, self.sample_batch_size) < 1 or self.learning_rate <= 0:
            raise ValueError("all sizes must be positive and T_max >= 3")
        if self.feedback_mode not in ("actionable", "literal"):
            raise ValueError("feedback_mode must be 'actionable' or 'literal'")


class TrainingError(RuntimeError):
    """Training aborted; ``trace`` holds the rows recorded before the failure."""

    def __init__(self, message: str, trace: LossTrace | None = None):
        super().__init__(message)
        self.trace = trace


class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(torch.float32))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight * self.mask, self.bias)


class CodeHead(nn.Module):
    """Autoregressive head over ``[history (D), next-visit codes (C)]``.

    Output ``j`` sees the full history and codes ``< j`` only: the first layer
    connects code units strictly below the diagonal, later layers on and below.
    """

    def __init__(self, embed_dim: int, n_codes: int, n_layers: int = 2):
        super().__init__()
        D, C = embed_dim, n_codes
        width = D + C
        first = torch.zeros(width, width)
        first[:, :D] = 1
        first[D:, D:] = torch.tril(torch.ones(C, C), diagonal=-1)
        later = torch.zeros(width, width)
        later[:, :D] = 1
        later[D:, D:] = torch.tril(torch.ones(C, C))
        self.embed_dim = D
        self.layers = nn.ModuleList(
            [MaskedLinear(width, width, first)] + [MaskedLinear(width, width, later) for _ in range(n_layers - 1)]
        )

    def forward(self, h: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
        z = torch.cat([h, x_next], dim=-1)
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if i < len(self.layers) - 1:
                z = F.relu(z)
        return z[..., self.embed_dim:]


class GeneratorModel(nn.Module):
    def __init__(self, vocab: CodeVocabulary, config: GeneratorConfig):
        super().__init__()
        self.vocab = vocab
        self.config = config
        C, D = vocab.total_size, config.embed_dim
        self.visit_embedding = nn.Linear(C, D)
        self.position_embedding = nn.Embedding(config.T_max, D)
        self.blocks = nn.ModuleList(
            TransformerBlock(D, config.n_heads, 4 * D, causal=True) for _ in range(config.n_layers)
        )
        self.head = CodeHead(D, C, config.head_layers)
        init_weights(self)
        # Row-0 (start/label row) pool used to condition sampling; set by train().
        self.conditioning_rows = np.zeros((0, C), dtype=np.uint8)
        self.conditioning_groups = np.zeros(0, dtype=np.int64)

    def history(self, x: torch.Tensor) -> torch.Tensor:
        T = x.shape[-2]
        if T > self.config.T_max:
            raise ValueError(f"sequence length {T} exceeds T_max={self.config.T_max}")
        positions = torch.arange(T, device=x.device)
        h = self.visit_embedding(x) + self.position_embedding(positions)
        for block in self.blocks:
            h = block(h)
        return h

    def code_logits(self, h: torch.Tensor, x_next: torch.Tensor) -> torch.Tensor:
        return self.head(h, x_next)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``P[..., t, :]`` are probabilities for row ``t + 1`` given rows ``<= t``
        and the lower-indexed codes of row ``t + 1``. The last row is computed
        against an empty next row."""
        h = self.history(x)
        x_next = torch.cat([x[..., 1:, :], torch.zeros_like(x[..., :1, :])], dim=-2)
        return torch.sigmoid(self.code_logits(h, x_next))


def build_generator(vocab: CodeVocabulary, config: GeneratorConfig) -> GeneratorModel:
    """Construct a generator whose initial weights depend only on ``config.seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return GeneratorModel(vocab, config)


def forward(model: GeneratorModel, matrix) -> torch.Tensor:
    """Probabilities for one encoded record (``RecordMatrix`` or ``(T, C)`` array)."""
    values = getattr(matrix, "values", matrix)
    x = torch.as_tensor(np.asarray(values), dtype=next(model.parameters()).dtype)
    return model(x)


def bce_loss(P, targets, mask, eps: float = PROB_EPS) -> torch.Tensor:
    """Mean binary cross-entropy over positions where ``mask`` is set."""
    P = P if isinstance(P, torch.Tensor) else torch.as_tensor(np.asarray(P), dtype=torch.float64)
    y = torch.as_tensor(targets, dtype=P.dtype) if not isinstance(targets, torch.Tensor) else targets.to(P.dtype)
    m = torch.as_tensor(mask, dtype=P.dtype) if not isinstance(mask, torch.Tensor) else mask.to(P.dtype)
    if P.shape != y.shape or P.shape != m.shape:
        raise ValueError(f"shape mismatch: P {tuple(P.shape)}, targets {tuple(y.shape)}, mask {tuple(m.shape)}")
    p = P.clamp(eps, 1.0 - eps)
    elementwise = -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p))
    denom = m.sum()
    if float(denom) == 0.0:
        return (elementwise * m).sum()
    return (elementwise * m).sum() / denom


def total_loss(l_bce, l_f, l_df, lambda_: float):
    """``l_bce + lambda * l_df`` when the downstream deficit is positive, else ``l_bce + lambda * l_f``."""
    if lambda_ < 0:
        raise ValueError("lambda must be non-negative")
    if float(l_df) > 0:
        return l_bce + lambda_ * l_df
    return l_bce + lambda_ * l_f


@dataclass
class TraceRow:
    step: int
    epoch: int
    l_bce: float
    l_f: float
    l_df: float
    l_total: float


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows], dtype=float)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "l_bce", "l_f", "l_df", "l_total"])
            for r in self.rows:
                writer.writerow([r.step, repr(r.l_bce), repr(r.l_f), repr(r.l_df), repr(r.l_total)])


def target_columns(vocab: CodeVocabulary, targets: str) -> np.ndarray:
    if targets == "outcome":
        return np.array([vocab.expired_index])
    if targets == "codes":
        return vocab.visit_indices
    raise ValueError(f"unknown fairness targets {targets!r}")


def _group_labeling(cohort: Cohort, reference_group: str | None) -> GroupLabeling:
    values = cohort.group_values()
    labeling = GroupLabeling.from_values(values, groups=cohort.vocabulary.groups)
    reference = reference_group or labeling.reference
    return GroupLabeling(labeling.groups, labeling.assignment, reference)


def train(
    model: GeneratorModel,
    cohort: Cohort,
    config: GeneratorConfig | None = None,
    objective: FairnessObjective | str | None = None,
    fairness: FairnessConfig | None = None,
    feedback_cohort: Cohort | None = None,
    predictor_config=None,
) -> tuple[GeneratorModel, LossTrace]:
    """Minimize the composite loss with Adam; deterministic given ``config.seed``.

    ``objective`` defaults to ``config.fairness_objective``, then ``fairness.objective``. With
    ``lambda == 0`` the fairness loss is still evaluated for the trace but does
    not touch the gradients. When ``feedback_period > 0`` and a real
    validation cohort is supplied, the downstream deficit ``l_df`` is refreshed
    after every ``feedback_period`` epochs.
    """
    config = config or model.config
    fairness = fairness or FairnessConfig()
    lam = float(config.lambda_)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if objective is None:
        objective = config.fairness_objective or fairness.objective
    objective = get_objective(objective) if objective is not None else None
    if cohort.vocabulary.hash != model.vocab.hash:
        raise ValueError("cohort vocabulary does not match the generator")
    if len(cohort) == 0:
        raise ValueError("empty cohort")

    values_np, mask_np = encode_cohort(cohort, config.T_max)
    values = torch.as_tensor(values_np, dtype=torch.float32)
    mask = torch.as_tensor(mask_np, dtype=torch.float32)
    groups = _group_labeling(cohort, fairness.reference_group)
    cols = torch.as_tensor(target_columns(cohort.vocabulary, fairness.targets))
    model.conditioning_rows = values_np[:, 0].copy()
    model.conditioning_groups = groups.assignment.copy()

    shuffle = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    trace = LossTrace()
    l_df = 0.0
    N = len(cohort)
    step = 0
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(N, generator=shuffle)
        for batch_index, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start:start + config.batch_size]
            xb, mb = values[idx], mask[idx]
            P = model(xb)
            if not torch.isfinite(P).all():
                raise TrainingError(f"non-finite activations at epoch {epoch}, batch {batch_index}", trace)
            Pt, yt, mt = P[:, :-1], xb[:, 1:], mb[:, 1:]
            l_bce = bce_loss(Pt, yt, mt)
            l_f = l_bce.new_zeros(())
            if objective is not None:
                grad_ctx = torch.no_grad() if lam == 0 else contextlib.nullcontext()
                with grad_ctx:
                    l_f = fo_loss(
                        Pt[..., cols],
                        groups.subset(idx.numpy()),
                        objective,
                        mask=mt[..., cols],
                        labels=yt[..., cols],
                        soft=fairness.soft,
                        temperature=fairness.temperature,
                        min_positives=1,
                    )
            if objective is None or lam == 0:
                l_opt = l_bce
            elif config.feedback_mode == "literal":
                l_opt = total_loss(l_bce, l_f, l_df, lam)
            else:
                l_opt = l_bce + lam * (1.0 + l_df) * l_f
            if not torch.isfinite(l_opt):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {batch_index}", trace)
            optimizer.zero_grad()
            l_opt.backward()
            optimizer.step()
            b, f = l_bce.item(), l_f.item()
            trace.append(TraceRow(step, epoch, b, f, l_df, float(total_loss(b, f, l_df, lam))))
            step += 1
        if (
            config.feedback_period > 0
            and feedback_cohort is not None
            and objective is not None
            and (epoch + 1) % config.feedback_period == 0
        ):
            from .fairness import downstream_feedback

            model.eval()
            synth = sample_records(model, config.feedback_samples, seed=config.seed + epoch + 1)
            l_df = downstream_feedback(
                synth, feedback_cohort, predictor_config, config.feedback_metric, seed=config.seed, min_positives=fairness.min_positives
            )
            logger.info("epoch %d: downstream feedback l_df=%.4f", epoch, l_df)
            model.train()
    model.eval()
    return model, trace


# --- sampling ---------------------------------------------------------------

@torch.no_grad()
def _sample_batch(model: GeneratorModel, row0: torch.Tensor, gen: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Sample visit rows code by code until END_RECORD; the last row is forced to end."""
    vocab = model.vocab
    B, C = row0.shape
    T = model.config.T_max
    x = torch.zeros(B, T, C)
    x[:, 0] = row0
    done = torch.zeros(B, dtype=torch.bool)
    hit_horizon = torch.zeros(B, dtype=torch.bool)
    columns = [int(j) for j in vocab.generatable_indices]
    for t in range(T - 1):
        h = model.history(x[:, : t + 1])[:, t]
        row = torch.zeros(B, C)
        if t == T - 2:
            hit_horizon = ~done
            row[:, END_RECORD] = 1.0
        else:
            for j in columns:
                p = torch.sigmoid(model.code_logits(h, row)[:, j])
                row[:, j] = torch.bernoulli(p, generator=gen)
                if j == END_RECORD and bool(row[:, END_RECORD].all()):
                    break
            ended = row[:, END_RECORD].bool()
            row[ended] = 0.0
            row[ended, END_RECORD] = 1.0
        row[done] = 0.0
        x[:, t + 1] = row
        done |= row[:, END_RECORD].bool()
        if bool(done.all()):
            break
    return x, hit_horizon


@torch.no_grad()
def sample_records(
    model: GeneratorModel,
    n: int,
    vocab: CodeVocabulary | None = None,
    group_conditioning: Mapping[str, float] | None = None,
    seed: int = 0,
    batch_size: int | None = None,
    id_prefix: str = "synth",
    max_rounds: int = 10,
) -> Cohort:
    """Draw ``n`` synthetic records.

    Row 0 is copied from the training pool, either uniformly (the empirical
    distribution) or by first drawing a group from ``group_conditioning``.
    Records that end before any visit are dropped and re-drawn for up to
    ``max_rounds`` rounds; records that reach the horizon are flagged truncated.
    """
    vocab = vocab or model.vocab
    if vocab.hash != model.vocab.hash:
        raise ValueError("vocabulary does not match the generator")
    if n < 0:
        raise ValueError("n must be non-negative")
    if len(model.conditioning_rows) == 0:
        raise ValueError("generator has no conditioning pool; train it first")
    batch_size = batch_size or model.config.sample_batch_size
    rng = np.random.default_rng([seed, 0x5A3])
    rows0 = model.conditioning_rows
    if group_conditioning is not None:
        groups = list(group_conditioning)
        probs = np.array([group_conditioning[g] for g in groups], dtype=float)
        if (probs < 0).any() or probs.sum() <= 0:
            raise ValueError("group_conditioning probabilities must be non-negative with a positive sum")
        probs = probs / probs.sum()
        unknown = [g for g in groups if g not in vocab.groups]
        if unknown:
            raise ValueError(f"group_conditioning names groups absent from the vocabulary: {unknown}")
        members = {
            g: np.flatnonzero(model.conditioning_groups == vocab.groups.index(g)) for g in groups
        }
        if any(len(m) == 0 for m in members.values()):
            raise ValueError("group_conditioning names a group absent from the training pool")

    model.eval()
    records = []
    dropped = truncated = 0
    next_id = 0
    batch_counter = 0
    for _ in range(max_rounds):
        need = n - len(records)
        if need <= 0:
            break
        if group_conditioning is None:
            picks = rng.integers(0, len(rows0), size=need)
        else:
            drawn = rng.choice(len(groups), size=need, p=probs)
            picks = np.array([rng.choice(members[groups[k]]) for k in drawn], dtype=np.int64)
        produced = 0
        for start in range(0, need, batch_size):
            chunk = picks[start:start + batch_size]
            gen = torch.Generator().manual_seed(int(np.random.SeedSequence([seed, batch_counter]).generate_state(1)[0]))
            batch_counter += 1
            x, horizon = _sample_batch(model, torch.as_tensor(rows0[chunk], dtype=torch.float32), gen)
            x_np = x.numpy().astype(np.uint8)
            for i in range(len(chunk)):
                pid = f"{id_prefix}-{seed}-{next_id:06d}"
                next_id += 1
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    record = decode_matrix(x_np[i], vocab, patient_id=pid, provenance=Provenance.SYNTHETIC.value)
                if record.n_visits == 0:
                    dropped += 1
                    continue
                if bool(horizon[i]):
                    truncated += 1
                    record = replace(record, truncated=True)
                records.append(record)
                produced += 1
        if produced == 0:
            break
    if dropped:
        warnings.warn(f"{dropped} sampled records had no visits and were dropped", stacklevel=2)
    if truncated:
        logger.info("%d sampled records reached the horizon and were truncated", truncated)
    return Cohort(tuple(records[:n]), vocab, Provenance.SYNTHETIC)


# --- checkpoints ------------------------------------------------------------

def parameter_hash(model: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def save_generator(model: GeneratorModel, path: str | Path) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocabulary": model.vocab.to_dict(),
        "vocabulary_hash": model.vocab.hash,
        "state_dict": model.state_dict(),
        "conditioning_rows": torch.as_tensor(model.conditioning_rows),
        "conditioning_groups": torch.as_tensor(model.conditioning_groups),
        "rng_state": torch.get_rng_state(),
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_generator(path: str | Path) -> GeneratorModel:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a generator checkpoint")
    vocab = CodeVocabulary.from_dict(payload["vocabulary"])
    if vocab.hash != payload["vocabulary_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    model = GeneratorModel(vocab, GeneratorConfig(**payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.conditioning_rows = payload["conditioning_rows"].numpy()
    model.conditioning_groups = payload["conditioning_groups"].numpy()
    model.eval()
    return model
