"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 bad configuration,
3 solver non-convergence or a non-finite model evaluation.
"""

from __future__ import annotations

import argparse
import logging
import sys

from neural_mcmc.errors import ConfigError, ConvergenceError, EvaluationError, NeuralMCMCError
from neural_mcmc.pipeline.config import load_config
from neural_mcmc.pipeline.run import STAGES, Pipeline, StageError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

COMMANDS = {
    "generate-data": ("generate",),
    "train-vae": ("train-vae",),
    "train-cnf": ("encode", "train-cnf"),
    "sample": ("sample",),
    "diagnose": ("diagnose",),
    "pipeline": STAGES,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neural-mcmc", description="Surrogate-likelihood MCMC for a Darcy inverse problem.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, stages in COMMANDS.items():
        p = sub.add_parser(name, help="run stages: " + ", ".join(stages))
        p.add_argument("--config", help="key = value configuration file (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--out", help="run directory (overrides io.out)")
        p.add_argument("--force", action="store_true", help="rerun stages even when cached")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _exit_code(exc: BaseException) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, (ConvergenceError, EvaluationError, FloatingPointError)):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.io.out = args.out
        pipeline = Pipeline(cfg)
        summary = pipeline.run(COMMANDS[args.command], force=args.force)
    except (NeuralMCMCError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    if summary is not None:
        print(f"status: {summary['status']}")
        print(f"median relative error (mean field): {summary['relative_error']['mean']['median']:.4f}")
        print(f"median relative error (MAP): {summary['relative_error']['map']['median']:.4f}")
        print(f"log-likelihood gap: {summary['separation']['gap']:.2f}")
    print(f"outputs in {pipeline.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
