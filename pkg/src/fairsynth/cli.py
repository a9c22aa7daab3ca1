"""Command-line entry point: ``fairsynth <subcommand> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .augment import CurationSpec, curate
from .config import PipelineConfig, load_config, resolve_data_path
from .data import read_cohort, write_cohort
from .downstream import evaluate, load_predictor, predict, save_predictor, train_predictor, write_predictions
from .experiment import lambda_sweep, run_experiment
from .generator import build_generator, load_generator, sample_records, save_generator, train
from .preprocess import preprocess_files
from .toy import generate_toy_cohort

logger = logging.getLogger("fairsynth")


def _data(path: str):
    return read_cohort(resolve_data_path(path))


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_preprocess(args, config: PipelineConfig) -> None:
    cohort = preprocess_files(resolve_data_path(args.events), resolve_data_path(args.static), config.preprocess)
    write_cohort(cohort, _out(args) / "cohort.jsonl")
    print(f"wrote {len(cohort)} records to {args.out}/cohort.jsonl")


def cmd_simulate(args, config: PipelineConfig) -> None:
    cohort = generate_toy_cohort(config.simulate)
    write_cohort(cohort, _out(args) / "cohort.jsonl")
    print(f"wrote {len(cohort)} records to {args.out}/cohort.jsonl")


def cmd_train_generator(args, config: PipelineConfig) -> None:
    gcfg = config.generator
    if args.lam is not None:
        gcfg = dataclasses.replace(gcfg, lambda_=args.lam)
    cohort = _data(args.data)
    feedback = _data(args.feedback_data) if args.feedback_data else None
    model = build_generator(cohort.vocabulary, gcfg)
    model, trace = train(model, cohort, gcfg, fairness=config.fairness, feedback_cohort=feedback,
                         predictor_config=config.predictor)
    out = _out(args)
    save_generator(model, out / "generator.pt")
    trace.to_csv(out / "loss_trace.csv")
    print(f"trained {len(trace)} steps; final l_bce={trace.rows[-1].l_bce:.4f}")


def cmd_sample(args, config: PipelineConfig) -> None:
    model = load_generator(resolve_data_path(args.generator))
    conditioning = json.loads(args.group_conditioning) if args.group_conditioning else None
    cohort = sample_records(model, args.n, group_conditioning=conditioning, seed=config.generator.seed)
    write_cohort(cohort, _out(args) / "synthetic.jsonl")
    print(f"wrote {len(cohort)} synthetic records to {args.out}/synthetic.jsonl")


def cmd_curate(args, config: PipelineConfig) -> None:
    section = config.curation
    spec = CurationSpec(args.strategy or section.strategy, args.n_real or section.n_real,
                        args.n_synth if args.n_synth is not None else section.n_synth, section.seed)
    plain = load_generator(resolve_data_path(args.generator_plain)) if args.generator_plain else None
    fair = load_generator(resolve_data_path(args.generator_fair)) if args.generator_fair else None
    cohort = curate(spec, _data(args.data), plain, fair, oversample_target=section.oversample_target)
    write_cohort(cohort, _out(args) / "curated.jsonl")
    print(f"wrote {len(cohort)} records ({spec.strategy.value}) to {args.out}/curated.jsonl")


def cmd_train_predictor(args, config: PipelineConfig) -> None:
    model = train_predictor(_data(args.train), _data(args.val) if args.val else None, config.predictor)
    out = _out(args)
    save_predictor(model, out / "predictor.pt")
    (out / "history.json").write_text(json.dumps(model.history, indent=1) + "\n")
    print(f"trained predictor; history: {model.history[-1]}")


def cmd_evaluate(args, config: PipelineConfig) -> None:
    model = load_predictor(resolve_data_path(args.predictor))
    results = predict(model, _data(args.data))
    metrics = evaluate(results, config.fairness.min_positives, config.fairness.reference_group)
    out = _out(args)
    write_predictions(results, out / "predictions.csv")
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"F1={metrics.f1:.4f} DI={metrics.di:.4f} WTPR={metrics.wtpr:.4f}")


def _source(args, config: PipelineConfig):
    return resolve_data_path(args.data) if args.data else config.simulate


def cmd_experiment(args, config: PipelineConfig) -> None:
    report = run_experiment(config.experiment_config(), _source(args, config), args.out, resume=args.resume)
    sys.stdout.write(report.to_csv())


def cmd_sweep(args, config: PipelineConfig) -> None:
    report = lambda_sweep(config.experiment_config(), args.lambdas, _source(args, config), args.out, resume=args.resume)
    sys.stdout.write(report.to_csv())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON config document")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--resume", action="store_true", help="skip cells already completed under --out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fairsynth", description="Fairness-optimized synthetic EHR pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="build a cohort from event and static CSV tables")
    p.add_argument("--events", required=True, help="long-format events CSV")
    p.add_argument("--static", required=True, help="per-patient static attributes CSV")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("simulate", parents=[common], help="write a biased toy cohort")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train-generator", parents=[common], help="train a generator on a cohort")
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="lam", type=float, help="fairness weight (overrides the config)")
    p.add_argument("--feedback-data", help="real validation cohort for downstream feedback")
    p.set_defaults(func=cmd_train_generator)

    p = sub.add_parser("sample", parents=[common], help="sample synthetic records from a generator")
    p.add_argument("--generator", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--group-conditioning", help='JSON map group -> probability, e.g. \'{"Black": 0.5, "White": 0.5}\'')
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("curate", parents=[common], help="build one augmented training pool")
    p.add_argument("--data", required=True, help="real pool cohort")
    p.add_argument("--strategy", choices=["REAL_ONLY", "REAL_OVERSAMPLE", "REAL_SYNTH", "REAL_FAIRSYNTH"])
    p.add_argument("--n-real", type=int)
    p.add_argument("--n-synth", type=int)
    p.add_argument("--generator-plain")
    p.add_argument("--generator-fair")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("train-predictor", parents=[common], help="train the mortality predictor")
    p.add_argument("--train", required=True)
    p.add_argument("--val")
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("evaluate", parents=[common], help="predict and score a test cohort")
    p.add_argument("--predictor", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", parents=[common], help="run the strategy x grid x seed experiment")
    p.add_argument("--data", help="cohort file; defaults to the simulate section")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("sweep", parents=[common], help="sweep the fairness weight for REAL_FAIRSYNTH")
    p.add_argument("--data", help="cohort file; defaults to the simulate section")
    p.add_argument("--lambdas", type=float, nargs="+", default=[0.5, 1.0, 1.2, 1.5])
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_seed(args.seed)
        args.func(args, config)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
