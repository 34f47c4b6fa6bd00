"""Command-line entry point: one subcommand per pipeline stage plus an all-in-one run."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import save_sample_set
from .errors import ValidationError
from .pipeline import STAGES, PipelineConfig, PipelineRun, StageFailure, run_pipeline, standard_pipeline_config, write_json
from .relabel import FEATURE_MODES
from .robustness import DEFAULT_PROTOCOLS, robustness_suite
from .synthetic import ScenarioConfig, generate_synthetic, standard_fixture_config

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


def _global_flags(default) -> argparse.ArgumentParser:
    # the same flags are accepted before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=default, help="pipeline config JSON (defaults to the standard fixture settings)")
    p.add_argument("--seed", type=int, default=default, help="override the run seed")
    p.add_argument("--out", default=default, help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tasgen", parents=[_global_flags(None)], description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = _global_flags(argparse.SUPPRESS)

    gen = sub.add_parser("generate", parents=[common], help="write a synthetic sample set")
    gen.add_argument("--scenario", default="standard", help="'standard' or a scenario JSON path")
    gen.add_argument("--format", default="single_json", choices=("single_json", "csv_dir"))

    for stage in STAGES[1:]:
        sp = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage on an existing run directory")
        if stage == "relabel":
            sp.add_argument("--mode", choices=FEATURE_MODES, default=None, help="classifier feature mode")
            sp.add_argument("--subdir", default="relabel")
    rob = sub.add_parser("robustness", parents=[common], help="score degraded inputs with the trained models")
    rob.add_argument("--protocols", nargs="+", default=list(DEFAULT_PROTOCOLS))
    sub.add_parser("report", parents=[common], help="render plots and an HTML summary")
    pipe = sub.add_parser("pipeline", parents=[common], help="ingest through evaluate in one go")
    pipe.add_argument("--stages", nargs="+", choices=STAGES, default=list(STAGES))
    return parser


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config) if args.config else standard_pipeline_config()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["output_dir"] = args.out
    return replace(cfg, **updates) if updates else cfg


def _generate(args) -> int:
    scenario = standard_fixture_config() if args.scenario == "standard" else ScenarioConfig.from_json(args.scenario)
    seed = args.seed if args.seed is not None else scenario.seed
    out = Path(args.out or "tasgen_data")
    ss = generate_synthetic(scenario, seed=seed)
    target = out / ("sample_set.json" if args.format == "single_json" else "samples")
    save_sample_set(ss, target, args.format)
    write_json(out / "scenario.json", scenario.to_dict())
    print(target)
    return EXIT_OK


def dispatch(args) -> int:
    if args.command == "generate":
        return _generate(args)
    cfg = load_config(args)
    if args.command == "pipeline":
        report = run_pipeline(cfg, tuple(s for s in STAGES if s in args.stages))
        if report is not None:
            print(json.dumps({k: getattr(report, k) for k in ("f1_a", "f1_s", "oa", "kappa")}, sort_keys=True))
        return EXIT_OK
    if args.command == "report":
        from .report import emit_plots

        result = emit_plots(cfg.output_dir)
        for w in result.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(result.index)
        return EXIT_OK
    run = PipelineRun(cfg)
    if args.command == "robustness":
        for desc, rep, err in robustness_suite(run, tuple(args.protocols)):
            print(f"{desc}\t{'error: ' + err if err else f'f1_a={rep.f1_a:.4f}'}")
        return EXIT_OK
    if args.command == "relabel":
        try:
            paths = run.stage_relabel(args.mode, args.subdir)
        except Exception as exc:
            raise StageFailure("relabel", exc) from exc
        run._record("relabel" if args.subdir == "relabel" else f"relabel:{args.subdir}", paths)
        return EXIT_OK
    run.run_stage(args.command)
    if args.command == "evaluate":
        rep = run.report()
        print(json.dumps({k: getattr(rep, k) for k in ("f1_a", "f1_s", "oa", "kappa")}, sort_keys=True))
    return EXIT_OK


def exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageFailure) else exc
    return EXIT_VALIDATION if isinstance(cause, ValidationError) else EXIT_RUNTIME


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return dispatch(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
