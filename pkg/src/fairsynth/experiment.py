"""Seeded, resumable experiment grids and fairness-weight sweeps.

Every random choice is derived from ``(config.seed, run index, purpose)``.
Trained generators and finished cells are cached under ``out_dir`` so an
interrupted run picks up where it stopped.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import warnings
import zlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import CurationSpec, Strategy, curate
from .config import config_hash, to_mapping
from .data import Cohort, read_cohort, record_to_json
from .downstream import PredictorConfig, evaluate, predict, train_predictor
from .fairness import FairnessConfig, GroupLabeling
from .generator import GeneratorConfig, GeneratorModel, build_generator, load_generator, parameter_hash, save_generator, train
from .splits import split
from .toy import ToyCohortConfig, generate_toy_cohort

logger = logging.getLogger(__name__)

METRICS = ("f1", "di", "wtpr")
CSV_COLUMNS = ("strategy", "n_real", "n_synth", "metric", "mean", "sd")


def derive_seed(config_seed: int, run: int, purpose: str) -> int:
    state = np.random.SeedSequence([int(config_seed), int(run), zlib.crc32(purpose.encode())]).generate_state(1)
    return int(state[0] % (2**31 - 1))


@dataclass
class ExperimentConfig:
    grid: list = field(default_factory=lambda: [[2500, 2500]])
    strategies: list = field(default_factory=lambda: [s.value for s in Strategy])
    lambda_: float = 1.2
    feedback_metric: str = "di"
    n_seeds: int = 5
    split_ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int = 0
    oversample_target: dict | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def __post_init__(self) -> None:
        self.grid = [[int(a), int(b)] for a, b in self.grid]
        self.strategies = [Strategy(s).value for s in self.strategies]
        self.split_ratios = [float(r) for r in self.split_ratios]
        if abs(sum(self.split_ratios) - 1.0) > 1e-9 or len(self.split_ratios) != 3:
            raise ValueError("split ratios must be three numbers summing to 1")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        if self.lambda_ < 0:
            raise ValueError("lambda must be non-negative")
        if not self.grid or not self.strategies:
            raise ValueError("grid and strategies must be non-empty")


@dataclass
class Cell:
    strategy: str
    n_real: int
    n_synth: int
    lambda_: float | None = None

    @property
    def key(self) -> str:
        lam = "" if self.lambda_ is None else f"_lam{self.lambda_:g}"
        return f"{self.strategy}_{self.n_real}_{self.n_synth}{lam}"


@dataclass
class CellSummary:
    strategy: str
    n_real: int
    n_synth: int
    lambda_: float | None
    seeds: list[int]
    values: dict[str, list[float | None]]
    mean: dict[str, float | None]
    sd: dict[str, float | None]
    failures: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_real": self.n_real,
            "n_synth": self.n_synth,
            "lambda": self.lambda_,
            "seeds": self.seeds,
            "metrics": {m: {"mean": self.mean[m], "sd": self.sd[m], "values": self.values[m]} for m in METRICS},
            "failures": self.failures,
        }


def mean_sd(values: Sequence[float | None]) -> tuple[float | None, float | None]:
    """Mean and sample SD over the finite values; a single value has SD 0."""
    finite = [float(v) for v in values if v is not None and math.isfinite(v)]
    if not finite:
        return None, None
    mean = float(np.mean(finite))
    sd = float(np.std(finite, ddof=1)) if len(finite) > 1 else 0.0
    return mean, sd


@dataclass
class MetricsReport:
    kind: str
    cells: list[CellSummary]
    config_hash: str
    config_seed: int
    runs: list[int]
    artifacts: dict[str, str] = field(default_factory=dict)

    def cell(self, strategy: str, n_real: int | None = None, n_synth: int | None = None, lambda_: float | None = None) -> CellSummary:
        for c in self.cells:
            if (
                c.strategy == Strategy(strategy).value
                and (n_real is None or c.n_real == n_real)
                and (n_synth is None or c.n_synth == n_synth)
                and (lambda_ is None or c.lambda_ == lambda_)
            ):
                return c
        raise KeyError(f"no cell for {strategy} {n_real} {n_synth} {lambda_}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "config_seed": self.config_seed,
            "runs": self.runs,
            "cells": [c.to_dict() for c in self.cells],
            "artifacts": dict(sorted(self.artifacts.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        sweep = self.kind == "sweep"
        writer.writerow((("lambda",) if sweep else ()) + CSV_COLUMNS)
        for c in self.cells:
            for m in METRICS:
                row = [c.strategy, c.n_real, c.n_synth, m, _fmt(c.mean[m]), _fmt(c.sd[m])]
                writer.writerow(([f"{c.lambda_:g}"] if sweep else []) + row)
        return buffer.getvalue()

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        validate_report(self.to_dict())
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.to_csv())
        json_path.write_text(self.to_json())
        return csv_path, json_path


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(float(x))


def report_schema() -> dict:
    return json.loads(resources.files("fairsynth").joinpath("schemas/report_schema.json").read_text())


def validate_report(payload: dict) -> None:
    import jsonschema

    jsonschema.validate(payload, report_schema())


def cohort_hash(cohort: Cohort) -> str:
    digest = hashlib.sha256(cohort.vocabulary.hash.encode())
    for record in cohort.records:
        digest.update(record_to_json(record).encode())
    return digest.hexdigest()


def load_source(source) -> Cohort:
    if isinstance(source, Cohort):
        return source
    if isinstance(source, ToyCohortConfig):
        return generate_toy_cohort(source)
    if isinstance(source, (str, Path)):
        return read_cohort(source)
    raise TypeError(f"unsupported data source {type(source).__name__}")


class _Runner:
    """Shared state for one experiment or sweep: splits, generators, cell cache."""

    def __init__(self, config: ExperimentConfig, cohort: Cohort, out_dir: Path | None, resume: bool, cache: dict | None):
        self.config = config
        self.cohort = cohort
        self.out_dir = out_dir
        self.resume = resume
        self.cache = cache if cache is not None else {}
        counts = GroupLabeling.from_cohort(cohort)
        self.reference = config.fairness.reference_group or counts.reference
        self.group_order = list(counts.groups)
        self.data_hash = cohort_hash(cohort)
        self.config_key = config_hash({"config": to_mapping(config), "data": self.data_hash})[:16]
        self.artifacts: dict[str, str] = {"data": self.data_hash}
        self._splits: dict[int, tuple[Cohort, Cohort, Cohort]] = {}

    def run_seeds(self) -> list[int]:
        return list(range(self.config.n_seeds))

    def splits(self, run: int) -> tuple[Cohort, Cohort, Cohort]:
        if run not in self._splits:
            seed = derive_seed(self.config.seed, run, "split")
            self._splits[run] = split(self.cohort, self.config.split_ratios, seed)
        return self._splits[run]

    def generator(self, run: int, lambda_: float) -> GeneratorModel:
        gcfg = dataclasses.replace(
            self.config.generator,
            lambda_=float(lambda_),
            feedback_metric=self.config.feedback_metric,
            seed=derive_seed(self.config.seed, run, "generator"),
        )
        fcfg = dataclasses.replace(self.config.fairness, reference_group=self.reference)
        key = hashlib.sha256(
            json.dumps([self.data_hash, to_mapping(gcfg), to_mapping(fcfg), self.config.split_ratios,
                        derive_seed(self.config.seed, run, "split")], sort_keys=True).encode()
        ).hexdigest()[:16]
        name = f"generator_lam{lambda_:g}_run{run}"
        if key in self.cache:
            model = self.cache[key]
        else:
            path = self.out_dir / "generators" / f"{key}.pt" if self.out_dir else None
            if path is not None and path.exists():
                model = load_generator(path)
            else:
                train_split, val, _ = self.splits(run)
                model = build_generator(self.cohort.vocabulary, gcfg)
                feedback = val if gcfg.feedback_period > 0 else None
                model, trace = train(model, train_split, gcfg, fairness=fcfg, feedback_cohort=feedback,
                                     predictor_config=self.config.predictor)
                if path is not None:
                    save_generator(model, path)
                    trace.to_csv(path.with_suffix(".trace.csv"))
            self.cache[key] = model
        self.artifacts[name] = parameter_hash(model)
        return model

    def run_cell(self, cell: Cell, run: int) -> dict:
        path = self.out_dir / "cells" / self.config_key / f"{cell.key}_run{run}.json" if self.out_dir else None
        if path is not None and self.resume and path.exists():
            return json.loads(path.read_text())
        seed = derive_seed(self.config.seed, run, f"curate:{cell.n_real}:{cell.n_synth}")
        try:
            train_split, val, test = self.splits(run)
            strategy = Strategy(cell.strategy)
            plain = fair = None
            if strategy is Strategy.REAL_SYNTH:
                plain = self.generator(run, 0.0)
            elif strategy is Strategy.REAL_FAIRSYNTH:
                fair = self.generator(run, cell.lambda_ if cell.lambda_ is not None else self.config.lambda_)
            n_synth = cell.n_synth if strategy in (Strategy.REAL_SYNTH, Strategy.REAL_FAIRSYNTH) else 0
            data = curate(CurationSpec(strategy, cell.n_real, n_synth, seed), train_split, plain, fair,
                          oversample_target=self.config.oversample_target)
            pcfg = dataclasses.replace(self.config.predictor, seed=derive_seed(self.config.seed, run, "predictor"))
            model = train_predictor(data, val, pcfg)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ev = evaluate(predict(model, test), self.config.fairness.min_positives, self.reference, self.group_order)
            result = {"run": run, "seed": seed, "metrics": {m: _finite(getattr(ev, m)) for m in METRICS}, "error": None,
                      "predictor": parameter_hash(model), "fairness": ev.fairness.to_dict()}
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
            logger.warning("cell %s run %d failed: %s", cell.key, run, exc)
            result = {"run": run, "seed": seed, "metrics": {m: None for m in METRICS},
                      "error": f"{type(exc).__name__}: {exc}", "predictor": None}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
        return result

    def summarize(self, cell: Cell, results: list[dict]) -> CellSummary:
        values = {m: [r["metrics"][m] for r in results] for m in METRICS}
        stats = {m: mean_sd(values[m]) for m in METRICS}
        for r in results:
            if r.get("predictor"):
                self.artifacts[f"predictor_{cell.key}_run{r['run']}"] = r["predictor"]
        return CellSummary(
            strategy=cell.strategy,
            n_real=cell.n_real,
            n_synth=cell.n_synth,
            lambda_=cell.lambda_,
            seeds=[r["seed"] for r in results],
            values=values,
            mean={m: stats[m][0] for m in METRICS},
            sd={m: stats[m][1] for m in METRICS},
            failures=[{"run": r["run"], "error": r["error"]} for r in results if r["error"]],
        )

    def execute(self, kind: str, cells: list[Cell]) -> MetricsReport:
        results: dict[str, list[dict]] = {c.key: [] for c in cells}
        for run in self.run_seeds():
            for cell in cells:
                results[cell.key].append(self.run_cell(cell, run))
        summaries = [self.summarize(c, results[c.key]) for c in cells]
        return MetricsReport(kind, summaries, config_hash(self.config), self.config.seed, self.run_seeds(), self.artifacts)


def _finite(x: float) -> float | None:
    return float(x) if x is not None and math.isfinite(x) else None


def run_experiment(
    config: ExperimentConfig,
    source,
    out_dir: str | Path | None = None,
    resume: bool = True,
    cache: dict | None = None,
) -> MetricsReport:
    """Every grid cell x strategy x seed: curate, train the predictor, evaluate on the test split.

    ``λ`` only affects REAL_FAIRSYNTH; REAL_SYNTH always uses a generator trained with ``λ = 0``.
    """
    cohort = load_source(source)
    runner = _Runner(config, cohort, Path(out_dir) if out_dir else None, resume, cache)
    cells = []
    for n_real, n_synth in config.grid:
        for strategy in config.strategies:
            synthetic = strategy in (Strategy.REAL_SYNTH.value, Strategy.REAL_FAIRSYNTH.value)
            lam = config.lambda_ if strategy == Strategy.REAL_FAIRSYNTH.value else None
            cells.append(Cell(strategy, n_real, n_synth if synthetic else 0, lam))
    report = runner.execute("grid", cells)
    if out_dir:
        report.write(out_dir, "report")
    return report


def lambda_sweep(
    config: ExperimentConfig,
    lambda_values: Sequence[float],
    source,
    out_dir: str | Path | None = None,
    resume: bool = True,
    cache: dict | None = None,
) -> MetricsReport:
    """REAL_FAIRSYNTH for each fairness weight and grid cell; one generator per (λ, seed)."""
    if len(lambda_values) == 0:
        raise ValueError("at least one lambda value is required")
    cohort = load_source(source)
    runner = _Runner(config, cohort, Path(out_dir) if out_dir else None, resume, cache)
    cells = [
        Cell(Strategy.REAL_FAIRSYNTH.value, n_real, n_synth, float(lam))
        for lam in lambda_values
        for n_real, n_synth in config.grid
    ]
    report = runner.execute("sweep", cells)
    if out_dir:
        report.write(out_dir, "sweep")
    return report
