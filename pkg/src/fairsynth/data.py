"""Cohort data model: patient records, code vocabulary, binary record matrices
and the JSON-lines cohort file format."""

from __future__ import annotations

import enum
import hashlib
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

START_TOKEN = "[START]"
LABEL_VISIT_TOKEN = "[LABEL_VISIT]"
END_RECORD_TOKEN = "[END_RECORD]"
END_VISIT_TOKEN = "[END_VISIT]"
SPECIAL_TOKENS = (START_TOKEN, LABEL_VISIT_TOKEN, END_RECORD_TOKEN, END_VISIT_TOKEN)
START, LABEL_VISIT, END_RECORD, END_VISIT = range(4)

EXPIRED_TOKEN = "[EXPIRED]"
RARE_CODE = "[RARE]"
LAB_PREFIX = "lab:"
LABEL_PREFIX = "label:"
STATIC_PREFIX = "static:"

# Order matters: the code-level head predicts columns in index order, so the
# stop decision comes first and the outcome is predicted after the visit codes.
SECTION_ORDER = ("special", "medical", "lab", "outcome", "label", "static")
RESERVED_TOKENS = frozenset(SPECIAL_TOKENS) | {EXPIRED_TOKEN}


class Provenance(str, enum.Enum):
    REAL = "REAL"
    SYNTHETIC = "SYNTHETIC"
    MERGED = "MERGED"
    OVERSAMPLED = "OVERSAMPLED"


class CohortFormatError(ValueError):
    """Raised for malformed cohort or vocabulary files."""


def label_token(label: str) -> str:
    return LABEL_PREFIX + label


def static_token(attribute: str, value: str) -> str:
    return f"{STATIC_PREFIX}{attribute}={value}"


def visit_section(code: str) -> str:
    return "lab" if code.startswith(LAB_PREFIX) else "medical"


@dataclass(frozen=True)
class PatientRecord:
    """One patient: static attributes, phenotype labels and ordered visits.

    Visits hold code strings (medical codes, or ``lab:``-prefixed discretized
    lab tokens). ``outcome`` is the mortality flag (1 = expired).
    """

    patient_id: str
    static: Mapping[str, str]
    labels: frozenset[str] = frozenset()
    visits: tuple[frozenset[str], ...] = ()
    outcome: int = 0
    provenance: str = Provenance.REAL.value
    truncated: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "patient_id", str(self.patient_id))
        object.__setattr__(self, "static", {str(k): str(v) for k, v in dict(self.static).items()})
        object.__setattr__(self, "labels", frozenset(str(x) for x in self.labels))
        visits = tuple(frozenset(str(c) for c in v) for v in self.visits)
        if any(len(v) == 0 for v in visits):
            raise ValueError(f"record {self.patient_id!r} has an empty visit")
        object.__setattr__(self, "visits", visits)
        if int(self.outcome) not in (0, 1):
            raise ValueError(f"outcome must be 0 or 1, got {self.outcome!r}")
        object.__setattr__(self, "outcome", int(self.outcome))
        object.__setattr__(self, "provenance", Provenance(self.provenance).value)

    @property
    def n_visits(self) -> int:
        return len(self.visits)

    def group(self, attribute: str) -> str:
        return self.static[attribute]


@dataclass(frozen=True)
class CodeVocabulary:
    """Bijective token <-> index map with disjoint section ranges.

    Sections are stored as half-open ``[start, end)`` ranges and laid out in
    :data:`SECTION_ORDER`. Token strings are namespaced so that a phenotype
    label can never collide with a medical code.
    """

    codes: tuple[str, ...]
    sections: Mapping[str, tuple[int, int]]
    sensitive_attribute: str = "ethnicity"

    def __post_init__(self) -> None:
        object.__setattr__(self, "codes", tuple(self.codes))
        object.__setattr__(self, "sections", {k: (int(a), int(b)) for k, (a, b) in dict(self.sections).items()})
        if len(set(self.codes)) != len(self.codes):
            raise ValueError("vocabulary codes must be unique")
        if tuple(self.codes[:4]) != SPECIAL_TOKENS or self.sections.get("special") != (0, 4):
            raise ValueError("vocabulary must start with the four special tokens")
        covered = 0
        for name in SECTION_ORDER:
            if name not in self.sections:
                raise ValueError(f"missing section {name!r}")
            start, end = self.sections[name]
            if start != covered or end < start:
                raise ValueError(f"section {name!r} is not contiguous")
            covered = end
        if covered != len(self.codes):
            raise ValueError("sections do not cover the vocabulary")

    @cached_property
    def code_to_index(self) -> dict[str, int]:
        return {code: i for i, code in enumerate(self.codes)}

    @property
    def index_to_code(self) -> tuple[str, ...]:
        return self.codes

    @property
    def total_size(self) -> int:
        return len(self.codes)

    def section_range(self, name: str) -> range:
        start, end = self.sections[name]
        return range(start, end)

    def section_of(self, index: int) -> str:
        for name in SECTION_ORDER:
            start, end = self.sections[name]
            if start <= index < end:
                return name
        raise IndexError(index)

    def __contains__(self, token: str) -> bool:
        return token in self.code_to_index

    def index(self, token: str) -> int:
        return self.code_to_index[token]

    @cached_property
    def expired_index(self) -> int:
        return self.code_to_index[EXPIRED_TOKEN]

    @cached_property
    def visit_indices(self) -> np.ndarray:
        """Indices of medical and lab tokens (what a visit may contain)."""
        return np.arange(self.sections["medical"][0], self.sections["lab"][1])

    @cached_property
    def generatable_indices(self) -> np.ndarray:
        """Columns the generator predicts for visit rows."""
        return np.concatenate([[END_RECORD, END_VISIT], self.visit_indices, list(self.section_range("outcome"))])

    @cached_property
    def generatable_mask(self) -> np.ndarray:
        mask = np.zeros(self.total_size, dtype=bool)
        mask[self.generatable_indices] = True
        return mask

    @cached_property
    def groups(self) -> tuple[str, ...]:
        """Sensitive-attribute values in vocabulary order."""
        prefix = static_token(self.sensitive_attribute, "")
        return tuple(c[len(prefix):] for c in self.codes[slice(*self.sections["static"])] if c.startswith(prefix))

    @cached_property
    def group_indices(self) -> np.ndarray:
        return np.array([self.code_to_index[static_token(self.sensitive_attribute, g)] for g in self.groups], dtype=np.int64)

    def canonical_code(self, code: str) -> str:
        """Map a visit code to its vocabulary token, pooling unknown codes into RARE."""
        if code in self.code_to_index:
            return code
        rare = LAB_PREFIX + RARE_CODE if visit_section(code) == "lab" else RARE_CODE
        if rare in self.code_to_index:
            return rare
        raise KeyError(f"unknown code {code!r}")

    def canonical_label(self, label: str) -> str:
        if label_token(label) in self.code_to_index:
            return label
        if label_token(RARE_CODE) in self.code_to_index:
            return RARE_CODE
        raise KeyError(f"unknown label {label!r}")

    def to_dict(self) -> dict:
        return {
            "codes": list(self.codes),
            "sections": {name: list(self.sections[name]) for name in SECTION_ORDER},
            "sensitive_attribute": self.sensitive_attribute,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> CodeVocabulary:
        try:
            return cls(
                codes=tuple(payload["codes"]),
                sections={k: tuple(v) for k, v in payload["sections"].items()},
                sensitive_attribute=payload.get("sensitive_attribute", "ethnicity"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CohortFormatError(f"invalid vocabulary: {exc}") from exc

    @cached_property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def write(self, path: str | Path, **extra) -> None:
        payload = self.to_dict()
        payload.update(extra)
        Path(path).write_text(json.dumps(payload, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> CodeVocabulary:
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CohortFormatError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(payload)


def _ranked(counts: Counter, min_count: int, rare: str | None) -> list[str]:
    kept = [c for c, n in counts.items() if n >= min_count and c != rare]
    kept.sort(key=lambda c: (-counts[c], c))
    pooled = rare is not None and (rare in counts or any(n < min_count for n in counts.values()))
    if pooled:
        kept.append(rare)
    return kept


def build_vocabulary(
    records: Iterable[PatientRecord],
    min_code_count: int = 5,
    sensitive_attribute: str = "ethnicity",
) -> CodeVocabulary:
    """Build a deterministic vocabulary from raw records.

    Codes seen fewer than ``min_code_count`` times are pooled into one RARE
    token per section (medical, lab, label). Static tokens are never pooled so
    every sensitive group keeps its own token.
    """
    records = list(records)
    if not records:
        raise ValueError("empty cohort")
    medical: Counter = Counter()
    lab: Counter = Counter()
    labels: Counter = Counter()
    static: Counter = Counter()
    for record in records:
        if sensitive_attribute not in record.static:
            raise ValueError(f"record {record.patient_id!r} lacks sensitive attribute {sensitive_attribute!r}")
        for visit in record.visits:
            for code in visit:
                if code in RESERVED_TOKENS:
                    raise ValueError(f"reserved token {code!r} used as a visit code")
                (lab if visit_section(code) == "lab" else medical)[code] += 1
        labels.update(label_token(x) for x in record.labels)
        static.update(static_token(k, v) for k, v in record.static.items())

    blocks = {
        "special": list(SPECIAL_TOKENS),
        "medical": _ranked(medical, min_code_count, RARE_CODE),
        "lab": _ranked(lab, min_code_count, LAB_PREFIX + RARE_CODE),
        "outcome": [EXPIRED_TOKEN],
        "label": _ranked(labels, min_code_count, label_token(RARE_CODE)),
        "static": _ranked(static, 1, None),
    }
    codes: list[str] = []
    sections = {}
    for name in SECTION_ORDER:
        sections[name] = (len(codes), len(codes) + len(blocks[name]))
        codes.extend(blocks[name])
    return CodeVocabulary(tuple(codes), sections, sensitive_attribute)


def canonicalize_record(record: PatientRecord, vocab: CodeVocabulary) -> PatientRecord:
    """Rewrite rare codes and labels to their section RARE tokens."""
    visits = tuple(frozenset(vocab.canonical_code(c) for c in v) for v in record.visits)
    labels = frozenset(vocab.canonical_label(x) for x in record.labels)
    if visits == record.visits and labels == record.labels:
        return record
    return replace(record, visits=visits, labels=labels)


def validate_record(record: PatientRecord, vocab: CodeVocabulary) -> None:
    if record.n_visits < 1:
        raise ValueError(f"record {record.patient_id!r} has no visits")
    group = record.static.get(vocab.sensitive_attribute)
    if group is None or group not in vocab.groups:
        raise ValueError(f"record {record.patient_id!r} has no valid {vocab.sensitive_attribute!r} group")
    for visit in record.visits:
        for code in visit:
            if code not in vocab.code_to_index or vocab.section_of(vocab.index(code)) not in ("medical", "lab"):
                raise KeyError(f"unknown code {code!r}")
    for label in record.labels:
        if label_token(label) not in vocab.code_to_index:
            raise KeyError(f"unknown label {label!r}")
    for key, value in record.static.items():
        if static_token(key, value) not in vocab.code_to_index:
            raise KeyError(f"unknown static token {static_token(key, value)!r}")


@dataclass(frozen=True)
class Cohort:
    records: tuple[PatientRecord, ...]
    vocabulary: CodeVocabulary
    provenance: Provenance = Provenance.REAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "provenance", Provenance(self.provenance))
        for record in self.records:
            validate_record(record, self.vocabulary)

    @classmethod
    def from_records(
        cls,
        records: Iterable[PatientRecord],
        min_code_count: int = 5,
        sensitive_attribute: str = "ethnicity",
        provenance: Provenance = Provenance.REAL,
    ) -> Cohort:
        records = list(records)
        vocab = build_vocabulary(records, min_code_count, sensitive_attribute)
        return cls(tuple(canonicalize_record(r, vocab) for r in records), vocab, provenance)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[PatientRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> PatientRecord:
        return self.records[i]

    def subset(self, indices: Sequence[int], provenance: Provenance | None = None) -> Cohort:
        return Cohort(tuple(self.records[i] for i in indices), self.vocabulary, provenance or self.provenance)

    def group_values(self) -> list[str]:
        attr = self.vocabulary.sensitive_attribute
        return [r.static[attr] for r in self.records]

    @property
    def patient_ids(self) -> list[str]:
        return [r.patient_id for r in self.records]


@dataclass(frozen=True, eq=False)
class RecordMatrix:
    """Binary ``(T_max, C_total)`` encoding of one record plus its loss mask."""

    values: np.ndarray
    mask: np.ndarray
    patient_id: str = ""
    provenance: str = Provenance.REAL.value

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def encode_record(record: PatientRecord, vocab: CodeVocabulary, T_max: int) -> RecordMatrix:
    """Encode a record; row 0 is the start/label row, visits follow, then END_RECORD.

    The mask covers the generatable columns of every visit row and only the
    END_RECORD bit of the terminating row.
    """
    k = record.n_visits
    if k > T_max - 2:
        raise ValueError(f"record exceeds horizon: {k} visits > T_max - 2 = {T_max - 2}")
    C = vocab.total_size
    values = np.zeros((T_max, C), dtype=np.uint8)
    mask = np.zeros((T_max, C), dtype=np.uint8)
    values[0, START] = 1
    for key, value in record.static.items():
        values[0, vocab.index(static_token(key, value))] = 1
    for label in record.labels:
        values[0, vocab.index(label_token(label))] = 1
    generatable = vocab.generatable_mask
    for t, visit in enumerate(record.visits, start=1):
        for code in visit:
            values[t, vocab.index(code)] = 1
        values[t, END_VISIT] = 1
        mask[t, generatable] = 1
    if record.outcome:
        values[k, vocab.expired_index] = 1
    values[k + 1, END_RECORD] = 1
    mask[k + 1, END_RECORD] = 1
    return RecordMatrix(values, mask, record.patient_id, record.provenance)


def decode_matrix(
    matrix: RecordMatrix | np.ndarray,
    vocab: CodeVocabulary,
    patient_id: str | None = None,
    provenance: str | None = None,
) -> PatientRecord:
    """Inverse of :func:`encode_record`.

    Reading stops at the first END_RECORD row; empty visit rows are dropped.
    A matrix without END_RECORD is read to the horizon and flagged truncated.
    """
    if isinstance(matrix, RecordMatrix):
        values = matrix.values
        patient_id = matrix.patient_id if patient_id is None else patient_id
        provenance = matrix.provenance if provenance is None else provenance
    else:
        values = np.asarray(matrix)
    values = values != 0
    T = values.shape[0]
    ends = np.flatnonzero(values[1:, END_RECORD])
    truncated = len(ends) == 0
    end = T if truncated else int(ends[0]) + 1
    if truncated:
        warnings.warn(f"record {patient_id!r} has no END_RECORD row; truncated at horizon", stacklevel=2)

    codes = vocab.codes
    visit_cols = vocab.visit_indices
    visits = []
    outcome = 0
    for t in range(1, end):
        row = values[t]
        if row[vocab.expired_index]:
            outcome = 1
        visit = frozenset(codes[i] for i in visit_cols[row[visit_cols]])
        if visit:
            visits.append(visit)

    static: dict[str, str] = {}
    labels = set()
    for i in np.flatnonzero(values[0]):
        token = codes[i]
        if token.startswith(STATIC_PREFIX):
            key, _, value = token[len(STATIC_PREFIX):].partition("=")
            static[key] = value
        elif token.startswith(LABEL_PREFIX):
            labels.add(token[len(LABEL_PREFIX):])
    return PatientRecord(
        patient_id=patient_id or "",
        static=static,
        labels=frozenset(labels),
        visits=tuple(visits),
        outcome=outcome,
        provenance=provenance or Provenance.SYNTHETIC.value,
        truncated=truncated,
    )


def encode_cohort(cohort: Cohort, T_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack encoded records into ``(N, T_max, C)`` value and mask arrays."""
    N, C = len(cohort), cohort.vocabulary.total_size
    values = np.zeros((N, T_max, C), dtype=np.uint8)
    mask = np.zeros((N, T_max, C), dtype=np.uint8)
    for i, record in enumerate(cohort.records):
        m = encode_record(record, cohort.vocabulary, T_max)
        values[i], mask[i] = m.values, m.mask
    return values, mask


# --- cohort files -----------------------------------------------------------

def vocabulary_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name.rsplit(".", 1)[0] + ".vocab.json")


def record_to_json(record: PatientRecord) -> str:
    payload = {
        "patient_id": record.patient_id,
        "static": dict(sorted(record.static.items())),
        "labels": sorted(record.labels),
        "visits": [sorted(v) for v in record.visits],
        "outcome": record.outcome,
        "provenance": record.provenance,
    }
    return json.dumps(payload, ensure_ascii=False)


def record_from_json(line: str) -> PatientRecord:
    payload = json.loads(line)
    if not isinstance(payload, dict):
        raise ValueError("record must be a JSON object")
    missing = {"patient_id", "static", "labels", "visits", "outcome"} - payload.keys()
    if missing:
        raise ValueError(f"missing keys {sorted(missing)}")
    return PatientRecord(
        patient_id=payload["patient_id"],
        static=payload["static"],
        labels=frozenset(payload["labels"]),
        visits=tuple(frozenset(v) for v in payload["visits"]),
        outcome=payload["outcome"],
        provenance=payload.get("provenance", Provenance.REAL.value),
    )


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write records as JSON lines plus a ``<stem>.vocab.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in cohort.records:
            fh.write(record_to_json(record) + "\n")
    cohort.vocabulary.write(vocabulary_path(path), provenance=cohort.provenance.value)


def read_cohort(
    path: str | Path,
    vocabulary: CodeVocabulary | None = None,
    min_code_count: int = 1,
    sensitive_attribute: str = "ethnicity",
) -> Cohort:
    """Read a JSON-lines cohort.

    The vocabulary comes from the argument, else the sidecar file, else it is
    built from the records. With a known vocabulary every code must be present.
    """
    path = Path(path)
    sidecar = vocabulary_path(path)
    provenance = Provenance.REAL
    if vocabulary is None and sidecar.exists():
        vocabulary = CodeVocabulary.read(sidecar)
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        provenance = Provenance(meta.get("provenance", Provenance.REAL.value))

    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = record_from_json(line)
            except (ValueError, TypeError, AttributeError) as exc:
                raise CohortFormatError(f"{path}: line {lineno}: malformed record ({exc})") from exc
            if vocabulary is not None:
                try:
                    validate_record(record, vocabulary)
                except (KeyError, ValueError) as exc:
                    msg = exc.args[0] if exc.args else str(exc)
                    raise CohortFormatError(f"{path}: line {lineno}: {msg}") from exc
            records.append(record)
    if vocabulary is None:
        if not records:
            raise CohortFormatError(f"{path}: empty cohort")
        return Cohort.from_records(records, min_code_count, sensitive_attribute, provenance)
    return Cohort(tuple(records), vocabulary, provenance)
