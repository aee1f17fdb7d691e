#cli.py
import argparse
import asyncio
import logging
from typing import Optional, Sequence

from config.experiment import load_experiment
from config.settings import settings
from src.exceptions.custom_exceptions import LagDRException
from src.services.oracle import max_residuals
from src.services.sweep import SweepService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lagdr",
        description="Lag-aware doubly robust off-policy evaluation and learning",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML experiment config with [synth], [nuisance], [train], [sweep] sections")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config entry (repeatable)",
    )
    common.add_argument("--out", help=f"output directory (default: {settings.OUTPUT_DIR})")
    common.add_argument("--jobs", type=int, help="parallel replication workers")
    common.add_argument("--seed", type=int, help="data seed (fold seed for 'estimate')")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("synth-ope", parents=[common], help="OPE Monte Carlo sweep on the synthetic benchmark")
    commands.add_parser("synth-opl", parents=[common], help="OPL Monte Carlo sweep on the synthetic benchmark")
    estimate = commands.add_parser("estimate", parents=[common], help="run all estimators on a dataset CSV")
    estimate.add_argument("--data", required=True, help="dataset CSV")
    estimate.add_argument("--policy", required=True, help="target policy spec (JSON)")
    check = commands.add_parser("oracle-check", parents=[common], help="exact identity suite over finite environments")
    check.add_argument("--fixtures", default=settings.ORACLE_FIXTURES_DIR, help="directory of JSON fixtures")
    check.add_argument("--random-seeds", type=int, default=100, help="random environments to check in addition")
    return parser


def _service(args: argparse.Namespace) -> SweepService:
    overrides = list(args.overrides)
    if args.seed is not None and args.command != "estimate":
        overrides.append(f"synth.data_seed={args.seed}")
    config = load_experiment(args.config, overrides)
    explicit = config.sweep.model_fields_set
    output_dir = args.out or (config.sweep.output_dir if "output_dir" in explicit else settings.OUTPUT_DIR)
    jobs = args.jobs or (config.sweep.jobs if "jobs" in explicit else settings.JOBS)
    return SweepService(config, output_dir=output_dir, jobs=jobs)


async def synth_ope(args: argparse.Namespace) -> int:
    service = _service(args)
    await service.cmd_synth_ope()
    return EXIT_OK


async def synth_opl(args: argparse.Namespace) -> int:
    service = _service(args)
    await service.cmd_synth_opl()
    return EXIT_OK


async def estimate(args: argparse.Namespace) -> int:
    service = _service(args)
    run = await service.cmd_estimate(args.data, args.policy, seed=args.seed or 0)
    for report in run.reports:
        print(f"{report.estimator_name:>10}  {report.value: .6f}  se {report.se:.6f}  "
              f"[{report.ci_low: .6f}, {report.ci_high: .6f}]  ess {report.ess:.1f}")
    for name, reason in run.refused.items():
        print(f"{name:>10}  refused: {reason}")
    return EXIT_OK


async def oracle_check(args: argparse.Namespace) -> int:
    service = _service(args)
    results = await service.cmd_oracle_check(args.fixtures, args.random_seeds)
    for check, residual in max_residuals(results).items():
        print(f"{check:>24}  max residual {residual:.3e}")
    failed = [result for result in results if not result.passed]
    expected = sum(result.expected_fail for result in results)
    print(f"{len(results)} checks, {len(failed)} failed, {expected} expected-fail")
    return EXIT_CHECK_FAILED if failed else EXIT_OK


HANDLERS = {
    "synth-ope": synth_ope,
    "synth-opl": synth_opl,
    "estimate": estimate,
    "oracle-check": oracle_check,
}


async def dispatch(args: argparse.Namespace) -> int:
    try:
        return await HANDLERS[args.command](args)
    except LagDRException as e:
        logger.error(f"{args.command} failed: {e.detail}")
        return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return asyncio.run(dispatch(args))
