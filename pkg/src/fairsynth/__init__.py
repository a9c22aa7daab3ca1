"""Fairness-optimized synthetic EHR generation and augmentation."""

from .data import Cohort, CodeVocabulary, PatientRecord, Provenance, decode_matrix, encode_record, read_cohort, write_cohort

__all__ = [
    "Cohort",
    "CodeVocabulary",
    "PatientRecord",
    "Provenance",
    "decode_matrix",
    "encode_record",
    "read_cohort",
    "write_cohort",
]
__version__ = "0.1.0"
