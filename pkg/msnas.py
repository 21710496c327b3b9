#!/usr/bin/env python3
"""
msnas - Multi-Step Model Selection Harness

Subcommands:
    gen      generate a synthetic H/Z -> tau tau dataset
    run      model selection runs (darts, spos or grid) over seeds x v1
    reopt    grid search with and without re-optimization, plus a v1 sweep
    scaling  wall time against the number of candidates per task
    gp       GP validity of a saved run (or fit and cache the GPs)
    report   re-render selections and charts from existing tables

A JSON file given with --config mirrors the flags (keys are the flag names
with dashes replaced by underscores, plus optional "selection", "gp" and
"generator" objects); flags given on the command line take precedence.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 run failure.
"""

from typing import Any, Dict, List, Optional
import argparse
import json
import logging
import sys

from dataset_store import DatasetFormatError, load_dataset
from datagen import GeneratorConfig, generate_dataset
from harness import (ConfigError, ExperimentConfig, ensure_gps, evaluate_saved_run, prepare_dataset,
                     reopt_study, run_method_experiment, scaling_experiment)
from report import emit_report, emit_scaling_report, rebuild_report
from run_metrics import RunMetrics

logger = logging.getLogger("msnas")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUN = 4

# flag dest -> ExperimentConfig field
EXPERIMENT_FIELDS = {
    "data": "data_dir",
    "out": "out_dir",
    "v1": "v1_list",
    "seeds": "seeds",
    "dummies": "include_dummies",
    "replicas": "replicas",
    "workers": "workers",
    "n_events": "n_events",
    "repeats": "repeats",
    "scaling_methods": "scaling_methods",
    "fit_max_points": "fit_max_points",
    "save_models": "save_models",
    "selection": "selection",
    "gp": "gp",
}


def parse_list(value: str, cast):
    try:
        return [cast(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid list: {value}")


def float_list(value: str) -> List[float]:
    return parse_list(value, float)


def int_list(value: str) -> List[int]:
    return parse_list(value, int)


def str_list(value: str) -> List[str]:
    return parse_list(value, str.strip)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='msnas',
        description='Multi-step model selection: DARTS, SPOS and grid search on synthetic tau pairs'
    )
    parser.add_argument('--config', type=str, help='JSON file mirroring the flags')
    parser.add_argument('--verbose', action='store_true', help='Debug logging (per-epoch losses)')
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Generate a dataset')
    gen.add_argument('--n-events', type=int, help='Number of events (default: 10000)')
    gen.add_argument('--seed', type=int, help='Generator seed (default: 0)')
    gen.add_argument('--out', type=str, help='Dataset directory')
    gen.add_argument('--workers', type=int, help='Generator threads (default: 1)')

    def experiment_flags(p, method_choice: bool = False):
        p.add_argument('--data', type=str, help='Dataset directory')
        p.add_argument('--out', type=str, help='Report directory (default: results)')
        p.add_argument('--seeds', type=int_list, help='Comma-separated seeds (default: 0,1,2,3,4)')
        p.add_argument('--v1', type=float_list, help='Comma-separated Task1 weights')
        p.add_argument('--workers', type=int, help='Concurrent runs (default: 1)')
        p.add_argument('--n-events', type=int, help='Use only the first N events of every split')
        if method_choice:
            p.add_argument('--method', choices=['darts', 'spos', 'grid'], help='Selection method')
            p.add_argument('--dummies', action='store_true', default=None,
                           help='Add Zeros/Noise candidates (darts only)')
            p.add_argument('--save-models', action='store_true', default=None,
                           help='Keep post-trained pairs under OUT/models/<run_id>')

    run = sub.add_parser('run', help='Model selection runs')
    experiment_flags(run, method_choice=True)

    reopt = sub.add_parser('reopt', help='Re-optimization study')
    experiment_flags(reopt)

    scaling = sub.add_parser('scaling', help='Scalability study')
    experiment_flags(scaling)
    scaling.add_argument('--replicas', type=int_list, help='Comma-separated replica counts k')
    scaling.add_argument('--repeats', type=int, help='Timed repeats per (method, k)')
    scaling.add_argument('--scaling-methods', type=str_list, help='Subset of darts,spos,grid')

    gp = sub.add_parser('gp', help='GP validity of a saved run')
    gp.add_argument('--data', type=str, help='Dataset directory')
    gp.add_argument('--run', type=str,
                    help='Run id of a run made with --save-models (runs are not saved by default)')
    gp.add_argument('--out', type=str, help='Report directory holding models/ (default: results)')
    gp.add_argument('--n-events', type=int, help='Use only the first N events of every split')

    report = sub.add_parser('report', help='Re-render report charts')
    report.add_argument('--out', type=str, help='Report directory (default: results)')
    return parser


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON format in {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def merged_settings(args: argparse.Namespace, file_settings: Dict[str, Any]) -> Dict[str, Any]:
    """File values overridden by every flag given on the command line."""
    settings = dict(file_settings)
    for key, value in vars(args).items():
        if key in ('config', 'verbose', 'command') or value is None:
            continue
        settings[key] = value
    return settings


def experiment_config(settings: Dict[str, Any], method: str) -> ExperimentConfig:
    data = {"method": method}
    for key, field_name in EXPERIMENT_FIELDS.items():
        if key in settings:
            data[field_name] = settings[key]
    if not data.get("data_dir"):
        raise ConfigError("A dataset directory is required (--data)")
    return ExperimentConfig.from_dict(data)


def cmd_gen(settings: Dict[str, Any]) -> int:
    generator = dict(settings.get("generator", {}))
    for key in ("n_events", "seed"):
        if key in settings:
            generator[key] = settings[key]
    if not settings.get("out"):
        raise ConfigError("An output directory is required (--out)")
    try:
        cfg = GeneratorConfig.from_dict(generator)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid generator settings: {e}") from e
    dataset = generate_dataset(cfg, settings["out"], workers=int(settings.get("workers", 1)))
    print(f"Wrote {len(dataset)} events to {settings['out']} (sha256 {dataset.checksum})")
    return EXIT_OK


def _finish(reports, metrics: RunMetrics, out_dir: str) -> int:
    emit_report(reports, out_dir)
    metrics.export(out_dir)
    failed = [r for r in reports if not r.ok]
    for r in failed:
        logger.error(f"Run {r.run_id} (seed={r.seed}, v1={r.v1}, {r.method}) ended with {r.status}")
    logger.info(f"{len(reports) - len(failed)}/{len(reports)} rows succeeded; report in {out_dir}")
    return EXIT_RUN if failed else EXIT_OK


def cmd_run(settings: Dict[str, Any]) -> int:
    cfg = experiment_config(settings, settings.get("method", "darts"))
    dataset = load_dataset(cfg.data_dir)
    metrics = RunMetrics()
    reports = run_method_experiment(cfg, dataset, metrics)
    return _finish(reports, metrics, cfg.out_dir)


def cmd_reopt(settings: Dict[str, Any]) -> int:
    cfg = experiment_config(settings, "reopt-study")
    dataset = load_dataset(cfg.data_dir)
    metrics = RunMetrics()
    reports = reopt_study(cfg, dataset, metrics)
    return _finish(reports, metrics, cfg.out_dir)


def cmd_scaling(settings: Dict[str, Any]) -> int:
    cfg = experiment_config(settings, "scaling")
    dataset = load_dataset(cfg.data_dir)
    metrics = RunMetrics()
    result = scaling_experiment(cfg, dataset, metrics)
    metrics.export(cfg.out_dir)
    if not result.timings:
        logger.error("scaling: every timed run failed")
        return EXIT_RUN
    emit_scaling_report(result, cfg.out_dir)
    for (method, n_events), fit in sorted(result.fits.items()):
        print(f"{method:14s} {n_events:7d} events: C={fit.C:.4g} a={fit.a:.3f} residual={fit.residual:.3g}")
    return EXIT_OK


def cmd_gp(settings: Dict[str, Any]) -> int:
    cfg = experiment_config(settings, "gp-validity")
    dataset = load_dataset(cfg.data_dir)
    if settings.get("run"):
        result = evaluate_saved_run(cfg, dataset, settings["run"])
    else:
        dataset = prepare_dataset(cfg, dataset)
        gps = ensure_gps(dataset, cfg.data_dir, cfg.gp_config())
        result = {"dataset_sha256": dataset.checksum, "gps": [gp.hyperparameters() for gp in gps]}
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_report(settings: Dict[str, Any]) -> int:
    written = rebuild_report(settings.get("out", "results"))
    for name in sorted(written):
        print(written[name])
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "run": cmd_run,
    "reopt": cmd_reopt,
    "scaling": cmd_scaling,
    "gp": cmd_gp,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    try:
        settings = merged_settings(args, load_config_file(args.config))
        return COMMANDS[args.command](settings)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (DatasetFormatError, FileNotFoundError) as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_RUN


if __name__ == '__main__':
    sys.exit(main())
