"""
Command-line entry point: python -m src.cli <subcommand> ...
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.services import experiment_service as harness
from src.services.datagen import load_dataset
from src.services.experiment_config import ExperimentConfig
from src.utils.config import get_settings, setup_logging
from src.utils.errors import ConfigError, DatasetFormatError, ProxyDeconfoundError, ReportError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2


def _seed(args, config: Optional[ExperimentConfig]) -> int:
    if args.seed is not None:
        return args.seed
    return config.seeds[0] if config is not None else 0


def cmd_gen(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    path = harness.generate_to_directory(config, _seed(args, config), args.out, args.setting)
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    dataset = load_dataset(args.data) if args.data else None
    paths = harness.train_to_directory(config, _seed(args, config), args.out, args.setting, dataset)
    for name, path in paths.items():
        print(f"{name} = {path}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    model = harness.load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    frame = harness.estimate(model, dataset, args.samples, _seed(args, None))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format=harness.REPORT_FLOAT_FORMAT)
    if "ite" in frame:
        print(f"ate = {frame['ite'].mean():.6g}")
    print(out)
    return EXIT_OK


def cmd_score(args) -> int:
    estimates = pd.read_csv(args.estimates)
    scores = harness.score_estimates(estimates, load_dataset(args.data))
    for key, value in scores.items():
        print(f"{key} = {value:.6g}" if isinstance(value, float) else f"{key} = {value}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    out = Path(args.out) if args.out else Path(get_settings().report_dir) / config.name
    result = harness.run(config, out, jobs=args.jobs, no_clamp=args.no_clamp, seeds=args.seed)
    sys.stdout.write(harness.format_summary(result.summary))
    print(f"report = {result.paths['report']}")
    if result.rows and result.failed == len(result.rows):
        logger.error("every row of the run failed; see the status column of %s", result.paths["report"])
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_summarize(args) -> int:
    summary = harness.summarize(args.reports, args.out)
    sys.stdout.write(harness.format_summary(summary))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxy-deconfound",
        description="Treatment-effect estimation with deep structural equations over proxy variables",
    )
    parser.add_argument("--log-level", default=None, help="Override PROXY_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a dataset directory from a config")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--setting", help="Setting section to apply (default: the first)")
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="Train the config's deep models and write checkpoints")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--setting")
    train.add_argument("--data", help="Dataset directory to train on instead of generating one")
    train.add_argument("--out", required=True)
    train.set_defaults(func=cmd_train)

    est = sub.add_parser("estimate", help="Per-row ITEs (or per-SNP effects) from a checkpoint")
    est.add_argument("--checkpoint", required=True)
    est.add_argument("--data", required=True)
    est.add_argument("--seed", type=int)
    est.add_argument("--samples", type=int, default=100, help="Monte-Carlo samples per row")
    est.add_argument("--out", required=True, help="CSV file to write")
    est.set_defaults(func=cmd_estimate)

    score = sub.add_parser("score", help="Score an estimates CSV against a dataset's truth")
    score.add_argument("--estimates", required=True)
    score.add_argument("--data", required=True)
    score.set_defaults(func=cmd_score)

    run = sub.add_parser("run", help="Run a full experiment and write report + summary")
    run.add_argument("--config", required=True)
    run.add_argument("--out")
    run.add_argument("--jobs", type=int)
    run.add_argument("--seed", type=int, action="append", help="Restrict to this seed (repeatable)")
    run.add_argument("--no-clamp", action="store_true", help="Disable propensity clamping")
    run.set_defaults(func=cmd_run)

    summ = sub.add_parser("summarize", help="Aggregate report files into mean (sem) tables")
    summ.add_argument("reports", nargs="+")
    summ.add_argument("--out")
    summ.set_defaults(func=cmd_summarize)

    serve = sub.add_parser("serve", help="Start the HTTP API")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (ConfigError, ReportError, DatasetFormatError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (ProxyDeconfoundError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
