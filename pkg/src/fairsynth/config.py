"""Single-document pipeline configuration (YAML or JSON).

Top-level sections: ``preprocess``, ``simulate``, ``generator``, ``fairness``,
``predictor``, ``curation`` and ``experiment``. Every key is optional; unknown
keys are rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .downstream import PredictorConfig
from .fairness import FairnessConfig
from .generator import GeneratorConfig
from .preprocess import ImputationPolicy, PreprocessConfig
from .toy import ToyCohortConfig

DATA_DIR_ENV = "FAIRSYNTH_DATA_DIR"
SECTIONS = ("preprocess", "simulate", "generator", "fairness", "predictor", "curation", "experiment")
ALIASES = {"lambda": "lambda_"}


def from_mapping(cls, mapping: Mapping[str, Any] | None, section: str = ""):
    """Instantiate dataclass ``cls`` from a mapping, honoring key aliases."""
    mapping = dict(mapping or {})
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        name = ALIASES.get(key, key)
        if name not in names:
            where = f"{section}." if section else ""
            raise ValueError(f"unknown config key {where}{key}")
        kwargs[name] = value
    return cls(**kwargs)


def _plain(value):
    if dataclasses.is_dataclass(value):
        return to_mapping(value)
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    return value


def to_mapping(obj) -> dict:
    """Plain-data view of a config dataclass, using public key names."""
    return {("lambda" if f.name == "lambda_" else f.name): _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def config_hash(obj) -> str:
    payload = to_mapping(obj) if dataclasses.is_dataclass(obj) else obj
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class CurationSection:
    strategy: str = "REAL_ONLY"
    n_real: int = 1000
    n_synth: int = 0
    seed: int = 0
    oversample_target: dict | None = None


@dataclass
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    simulate: ToyCohortConfig = field(default_factory=ToyCohortConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    curation: CurationSection = field(default_factory=CurationSection)
    experiment: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> PipelineConfig:
        """Copy with every section's seed replaced."""
        return dataclasses.replace(
            self,
            simulate=dataclasses.replace(self.simulate, seed=seed),
            generator=dataclasses.replace(self.generator, seed=seed),
            predictor=dataclasses.replace(self.predictor, seed=seed),
            curation=dataclasses.replace(self.curation, seed=seed),
            experiment={**self.experiment, "seed": seed},
        )

    def experiment_config(self):
        from .experiment import ExperimentConfig

        exp = from_mapping(ExperimentConfig, self.experiment, "experiment")
        return dataclasses.replace(exp, generator=self.generator, fairness=self.fairness, predictor=self.predictor)


def parse_config(document: Mapping[str, Any] | None) -> PipelineConfig:
    document = dict(document or {})
    unknown = set(document) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    pre = dict(document.get("preprocess") or {})
    if "imputation_policy" in pre:
        pre["imputation_policy"] = ImputationPolicy(pre["imputation_policy"])
    return PipelineConfig(
        preprocess=from_mapping(PreprocessConfig, pre, "preprocess"),
        simulate=from_mapping(ToyCohortConfig, document.get("simulate"), "simulate"),
        generator=from_mapping(GeneratorConfig, document.get("generator"), "generator"),
        fairness=from_mapping(FairnessConfig, document.get("fairness"), "fairness"),
        predictor=from_mapping(PredictorConfig, document.get("predictor"), "predictor"),
        curation=from_mapping(CurationSection, document.get("curation"), "curation"),
        experiment=dict(document.get("experiment") or {}),
    )


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a YAML/JSON config file (JSON is valid YAML); ``None`` gives defaults."""
    if path is None:
        return PipelineConfig()
    text = Path(path).read_text()
    document = yaml.safe_load(text) if text.strip() else {}
    if document is not None and not isinstance(document, Mapping):
        raise ValueError(f"{path}: config must be a mapping of sections")
    return parse_config(document)


def resolve_data_path(path: str | Path) -> Path:
    """Relative data paths resolve against ``$FAIRSYNTH_DATA_DIR`` when it is set."""
    path = Path(path)
    root = os.environ.get(DATA_DIR_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path
