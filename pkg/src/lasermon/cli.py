"""Command-line entry point (``lasermon``).

Exit codes: 0 success, 2 validation error, 3 training divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import hpo, pipeline
from .dataset import SyntheticConfig, generate_synthetic, iter_synthetic, load_dataset, write_dataset
from .errors import LasermonError, StudyFailed, TrainingDiverged, ValidationError
from .features import write_feature_matrix

log = logging.getLogger("lasermon")

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
RUN_TARGETS = {
    "params-only": ("params_only",),
    "full": ("params_plus_sensors",),
    "reduced": ("reduced",),
    "all": pipeline.EXPERIMENTS,
}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # registered on the main parser and on every subcommand so flags work in either position
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="run config JSON (or a run_manifest.json)")
    p.add_argument("--seed", type=int, default=d(None), help="seed for data generation and the run")
    p.add_argument("--out", default=d("lasermon_out"), help="output directory")
    p.add_argument("--threads", type=int, default=d(1), help="worker threads")
    p.add_argument("--dataset", default=d(None), help="on-disk dataset instead of synthetic data")
    p.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lasermon", parents=[_global_flags(False)],
        description="Surface-roughness models from laser parameters and photodiode features.",
    )
    common = [_global_flags(True)]
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=common, help="write a synthetic dataset")
    g.add_argument("--experiments-per-technique", type=int)
    g.add_argument("--samples", type=int, help="samples per experiment")
    g.add_argument("--noise-scale", type=float)
    g.add_argument("--trace-length", type=int)

    e = sub.add_parser("extract", parents=common, help="write the feature-matrix CSV")
    e.add_argument("--output", help="CSV path (default <out>/features.csv)")

    r = sub.add_parser("run", parents=common, help="run experiments and write reports")
    r.add_argument("target", choices=sorted(RUN_TARGETS))
    r.add_argument("--settings", help="comma-separated subset of " + ",".join(pipeline.SETTINGS))
    r.add_argument("--n-trials", type=int, help="TPE trials per study (0 = fixed architectures)")
    r.add_argument("--space", help="search-space JSON file")
    r.add_argument("--shared-arch", action="store_true", default=None,
                   help="one architecture for all six settings")
    r.add_argument("--top-k", type=int)
    r.add_argument("--permutations", type=int, help="Shapley permutations per explained row")
    r.add_argument("--svg", action="store_true", default=None, help="also draw scatter SVGs")

    a = sub.add_parser("ablate", parents=common, help="test R2 against the number of sensor features")
    a.add_argument("--k", type=_int_list, default=None, help="e.g. 5,10,20,50,100")
    a.add_argument("--model", choices=("mlp", "dt", "rf", "et"))
    a.add_argument("--settings")

    rep = sub.add_parser("report", parents=common, help="rebuild markdown tables from results.json")
    rep.add_argument("--svg", action="store_true", help="draw scatter SVGs from the CSVs")
    return parser


def resolve_config(args: argparse.Namespace) -> pipeline.RunConfig:
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        try:
            config = pipeline.RunConfig.from_dict(doc)
        except (TypeError, KeyError, AttributeError) as exc:
            raise ValidationError(f"bad config {args.config}: {exc}") from exc
    else:
        config = pipeline.RunConfig()
    changes = {}
    if args.dataset:
        changes.update(dataset=args.dataset, synthetic=None)
    if args.seed is not None:
        changes["seed"] = args.seed
        synthetic = changes.get("synthetic", config.synthetic)
        if synthetic is not None:
            changes["synthetic"] = replace(synthetic, seed=args.seed)
    if getattr(args, "settings", None):
        changes["settings"] = tuple(s.strip() for s in args.settings.split(","))
        unknown = set(changes["settings"]) - set(pipeline.SETTINGS)
        if unknown:
            raise ValidationError(f"unknown settings {sorted(unknown)}")
    for arg, key in (("n_trials", "hpo_trials"), ("top_k", "top_k"),
                     ("permutations", "permutations"), ("shared_arch", "shared_arch"),
                     ("svg", "svg"), ("model", "ablation_model")):
        value = getattr(args, arg, None)
        if value is not None:
            changes[key] = value
    if getattr(args, "k", None):
        changes["ablation_k"] = tuple(args.k)
    if getattr(args, "space", None):
        changes["space"] = hpo.SearchSpace.from_json(Path(args.space).read_text(encoding="utf-8"))
    return replace(config, **changes) if changes else config


def _synthetic_config(args, config: pipeline.RunConfig) -> SyntheticConfig:
    base = config.synthetic or SyntheticConfig()
    changes = {k: v for k, v in (
        ("experiments_per_technique", getattr(args, "experiments_per_technique", None)),
        ("samples_per_experiment", getattr(args, "samples", None)),
        ("noise_scale", getattr(args, "noise_scale", None)),
        ("trace_length", getattr(args, "trace_length", None)),
    ) if v is not None}
    return replace(base, **changes)


def cmd_generate(args, config: pipeline.RunConfig) -> None:
    synthetic = _synthetic_config(args, config)
    synthetic.validate()
    experiments = generate_synthetic(synthetic)
    write_dataset(experiments, args.out)
    Path(args.out, "synthetic_config.json").write_text(
        json.dumps(synthetic.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    n = sum(len(e.samples) for e in experiments)
    print(f"wrote {len(experiments)} experiments, {n} samples to {args.out}")


def cmd_extract(args, config: pipeline.RunConfig) -> None:
    if config.dataset is not None:
        samples = (s for e in load_dataset(config.dataset) for s in e.samples)
    else:
        samples = (d.sample for d in iter_synthetic(config.synthetic))
    path = Path(args.output) if args.output else Path(args.out) / "features.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = write_feature_matrix(path, samples, config.bands)
    print(f"wrote {rows} rows to {path}")


def _print_tables(outputs: pipeline.RunOutputs) -> None:
    for name, table in outputs.tables.items():
        print(f"\n{name}\n")
        print(pipeline.table_markdown(table))


def cmd_run(args, config: pipeline.RunConfig) -> None:
    experiments = RUN_TARGETS[args.target]
    ablation = args.target == "all" and bool(config.ablation_k)
    full_run = None
    if "params_plus_sensors" not in experiments:
        full_run = pipeline.load_full_run(args.out, config)
        if full_run is None:
            log.info("no matching full models in %s; training them first", args.out)
    outputs = pipeline.run_experiments(config, experiments, args.threads, ablation,
                                       full_run=full_run)
    pipeline.emit_reports(outputs, args.out)
    _print_tables(outputs)


def cmd_ablate(args, config: pipeline.RunConfig) -> None:
    outputs = pipeline.run_experiments(config, ("reduced",), args.threads, True,
                                       full_run=pipeline.load_full_run(args.out, config))
    pipeline.emit_reports(outputs, args.out)
    print("k,technique,test_r2")
    for p in outputs.ablation:
        print(f"{p.k},{p.setting},{p.test_r2:.4f}")


def cmd_report(args, config: pipeline.RunConfig) -> None:
    out = Path(args.out)
    path = out / "results.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found; run an experiment first")
    doc = json.loads(path.read_text(encoding="utf-8"))
    for name, reports in pipeline.tables_from_results(doc).items():
        rows = {r.setting: pipeline.SettingOutcome(r, [], [], []) for r in reports}
        text = pipeline.table_markdown(pipeline.ResultsTable(name, rows))
        (out / f"table_{name}.md").write_text(text, encoding="utf-8")
        print(f"\n{name}\n\n{text}")
        if args.svg:
            for r in reports:
                csv_path = out / name / f"scatter_{r.setting}.csv"
                if csv_path.is_file():
                    title = f"{pipeline.DISPLAY[r.setting]} ({pipeline.LABELS[r.setting]})"
                    csv_path.with_suffix(".svg").write_text(
                        pipeline.scatter_svg(csv_path, title), encoding="utf-8")


COMMANDS = {
    "generate": cmd_generate,
    "extract": cmd_extract,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except (TrainingDiverged, StudyFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (LasermonError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
