"""Command-line entry point.

    iplpmb run --config rules/scenario.yaml --filter ipl --runs 20 --out runs/ipl
    iplpmb compare runs/ek runs/ipl
    iplpmb quadratic

Exit codes: 0 success, 1 quadratic-example check failed, 2 config error,
3 every run diverged, 4 missing manifest.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from slam.config import Settings, apply_overrides, get_settings, load_scenario
from slam.demo import format_report, run_quadratic_example
from slam.errors import MissingManifest, ScenarioConfigError
from slam.linearization import Linearizer
from slam.reporting import compare_runs, format_comparison, write_run_outputs
from slam.simulation import run_monte_carlo

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_NO_MANIFEST = 4


def _setup_logging(settings: Settings) -> None:
    log_dir = Path(settings.LOGS_DIR)
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.StreamHandler(),  # Console output
            logging.FileHandler(log_dir / "slam.log", encoding="utf-8"),
        ],
    )


def cmd_run(args: argparse.Namespace, settings: Settings) -> int:
    try:
        scenario = load_scenario(args.config or settings.SCENARIO_PATH)
        scenario = apply_overrides(scenario, seed=args.seed, gamma=args.gamma, linearizer=args.filter)
    except ScenarioConfigError as e:
        logger.error(f"Config error: {e}")
        print(json.dumps({"ok": False, "error": str(e)}))
        return EXIT_CONFIG

    out_dir = Path(args.out or Path(settings.OUT_DIR) / scenario.filter.linearizer.value)
    workers = args.workers if args.workers is not None else settings.WORKERS
    record_timing = settings.RECORD_TIMING and not args.no_timing

    results = run_monte_carlo(scenario, args.runs, workers=workers, record_timing=record_timing)
    manifest = write_run_outputs(out_dir, scenario, results)

    failed = sum(r.diverged for r in results)
    print(json.dumps({"ok": failed < len(results), "manifest": manifest.as_posix(), "failed_runs": failed}))
    if failed == len(results):
        logger.error(f"All {failed} runs diverged")
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, settings: Settings) -> int:
    try:
        rows = compare_runs(args.dir_a, args.dir_b, out_dir=args.out)
    except MissingManifest as e:
        logger.error(str(e))
        print(json.dumps({"ok": False, "error": str(e)}))
        return EXIT_NO_MANIFEST
    print(format_comparison(rows))
    return EXIT_OK


def cmd_quadratic(args: argparse.Namespace, settings: Settings) -> int:
    report = run_quadratic_example()
    print(format_report(report))
    if not report.passed:
        logger.error(f"IPLF KL {report.kl_iplf:.4f} is not below EKF KL {report.kl_ekf:.4f}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iplpmb", description="PMB SLAM simulator with EK / IPL linearization")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="Run Monte Carlo experiments")
    run.add_argument("--config", help="Scenario YAML (default: SLAM_SCENARIO_PATH)")
    run.add_argument("--filter", choices=[lin.value for lin in Linearizer], help="Linearizer override")
    run.add_argument("--runs", type=int, default=1, help="Number of Monte Carlo runs")
    run.add_argument("--seed", type=int, help="Base seed override")
    run.add_argument("--gamma", type=int, help="Number of best data associations override")
    run.add_argument("--out", help="Output directory (default: SLAM_OUT_DIR/<filter>)")
    run.add_argument("--workers", type=int, help="Parallel worker processes (default: SLAM_WORKERS)")
    run.add_argument("--no-timing", action="store_true", help="Write zeros in the wall-clock columns")
    run.set_defaults(handler=cmd_run)

    cmp_ = sub.add_parser("compare", help="Compare two run directories")
    cmp_.add_argument("dir_a")
    cmp_.add_argument("dir_b")
    cmp_.add_argument("--out", help="Directory for comparison.csv and comparison_steps.csv")
    cmp_.set_defaults(handler=cmd_compare)

    quad = sub.add_parser("quadratic", help="Scalar quadratic example: EKF vs IPLF")
    quad.set_defaults(handler=cmd_quadratic)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "runs", 1) < 1:
        ap.error("--runs must be >= 1")
    settings = get_settings()
    _setup_logging(settings)
    return args.handler(args, settings)


if __name__ == "__main__":
    sys.exit(main())
