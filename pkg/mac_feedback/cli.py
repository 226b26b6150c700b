"""Command-line front end: evaluate, optimize, validate and sweep."""

import argparse
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
from joblib import Parallel, delayed
from pydantic import ValidationError
from scipy import linalg

from mac_feedback import __version__
from mac_feedback.covariance import CovTrajectory, run_deterministic
from mac_feedback.experiment_models import (
    ExperimentConfig,
    ReportEnvelope,
    ReportMeta,
    ScheduleFile,
    calculate_file_checksums,
    write_atomic,
)
from mac_feedback.experiment_parser import (
    expand_sweep,
    load_experiment_config,
    load_schedule,
    validation_problems,
)
from mac_feedback.model import (
    ConsistencyError,
    ControllerSchedule,
    InvalidInputError,
    ScheduleValidationError,
    SystemConfig,
)
from mac_feedback.optimize import (
    OptimizationReport,
    analytic_baselines,
    joint_optimize,
)
from mac_feedback.simulate import monte_carlo

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2

DEFAULT_OUT_DIR = "mac-feedback-results"
MIN_VALIDATION_SAMPLES = 1000
Z_THRESHOLD = 5.0

# Relative error added to the analytic terminal MSE before comparison; lets
# tests check that a wrong analytic value is reported as a failure.
CORRUPT_ANALYTIC_ENV = "MAC_FEEDBACK_CORRUPT_ANALYTIC"

POWER_MODES = {"inst": "instantaneous", "total": "total"}
COST_VARIANTS = {"sum": "sum_variance", "sum-sq": "sum_squared_variance"}

SWEEP_COLUMNS = [
    "horizon",
    "sigma_b_sq",
    "power",
    "best_cost",
    "zero_power",
    "repetition",
    "orthogonal",
    "passive",
    "no_feedback_repetition",
    "single_shot",
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mac-feedback",
        description="Linear feedback coding for the two-sender Gaussian MAC.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub, schedule: bool = False, seed: bool = False):
        sub.add_argument(
            "--config",
            type=Path,
            required=True,
            help="Config file (YAML or JSON) with a `system` section",
        )
        if schedule:
            sub.add_argument(
                "--schedule",
                type=Path,
                required=True,
                help="Schedule file (JSON, one entry per step)",
            )
        sub.add_argument(
            "--out",
            type=Path,
            default=None,
            help=f"Output directory (default: config out_dir, else {DEFAULT_OUT_DIR})",
        )
        sub.add_argument(
            "--power-mode",
            choices=sorted(POWER_MODES),
            default=None,
            help="Power constraint (default: config value, else inst)",
        )
        sub.add_argument(
            "--cost-variant",
            choices=sorted(COST_VARIANTS),
            default=None,
            help="Terminal cost (default: config value, else sum)",
        )
        if seed:
            sub.add_argument(
                "--seed",
                type=int,
                default=None,
                help="Random seed; required here or in the config file (no default)",
            )
            sub.add_argument(
                "--n-jobs",
                type=int,
                default=None,
                help="Parallel workers (default: config value, else 1)",
            )

    def add_search(sub):
        sub.add_argument(
            "--restarts",
            type=int,
            default=None,
            help="Optimisation restarts (default: config value, else 4)",
        )
        sub.add_argument(
            "--budget",
            type=int,
            default=None,
            help="Cost evaluations per restart (default: config value, else 2000)",
        )
        sub.add_argument(
            "--passive",
            action="store_true",
            default=None,
            help="Keep the receiver a passive relay (default: off)",
        )

    evaluate = commands.add_parser(
        "evaluate", help="Evaluate a schedule's covariance recursion"
    )
    add_common(evaluate, schedule=True)

    optimize = commands.add_parser("optimize", help="Search for a low-cost schedule")
    add_common(optimize, seed=True)
    add_search(optimize)

    validate = commands.add_parser(
        "validate", help="Monte Carlo check of a schedule's analytic covariances"
    )
    add_common(validate, schedule=True, seed=True)
    validate.add_argument(
        "--samples",
        type=int,
        default=None,
        help=f"Monte Carlo samples, at least {MIN_VALIDATION_SAMPLES} "
        "(default: config value, else 10000)",
    )

    sweep = commands.add_parser(
        "sweep", help="Optimise every point of the config's sweep grid"
    )
    add_common(sweep, seed=True)
    add_search(sweep)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = {
        "seed": getattr(args, "seed", None),
        "samples": getattr(args, "samples", None),
        "restarts": getattr(args, "restarts", None),
        "budget": getattr(args, "budget", None),
        "passive": getattr(args, "passive", None),
        "n_jobs": getattr(args, "n_jobs", None),
    }
    if args.power_mode:
        overrides["system.power_mode"] = POWER_MODES[args.power_mode]
    if args.cost_variant:
        overrides["system.cost_variant"] = COST_VARIANTS[args.cost_variant]
    return overrides


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    if args.out is not None:
        return args.out
    return Path(config.out_dir or DEFAULT_OUT_DIR)


def _require_seed(config: ExperimentConfig) -> int:
    if config.seed is None:
        raise ScheduleValidationError(["seed: pass --seed or set `seed` in the config"])
    return config.seed


def _write_report(
    out_dir: Path,
    name: str,
    command: str,
    body: Dict[str, Any],
    summary: List[str],
    inputs: Dict[str, Optional[Path]],
    started: float,
) -> Path:
    envelope = ReportEnvelope(
        meta=ReportMeta(
            generated_at=datetime.now(timezone.utc).isoformat(),
            wall_time_s=time.perf_counter() - started,
            version=__version__,
            command=command,
            inputs=calculate_file_checksums(inputs),
        ),
        body=body,
    )
    report_path = out_dir / f"{name}.json"
    write_atomic(report_path, envelope.dumps())
    write_atomic(out_dir / f"{name}.txt", "\n".join(summary) + "\n")
    return report_path


def _trajectory_body(
    schedule: ControllerSchedule, config: SystemConfig, trajectory: CovTrajectory
) -> Dict[str, Any]:
    return {
        "terminal_cost": trajectory.terminal_cost,
        "terminal_mse": trajectory.terminal_mse,
        "message_variances": trajectory.message_variances.tolist(),
        "achieved_powers": trajectory.achieved_powers.tolist(),
        "requested_powers": [list(p) for p in trajectory.requested_powers],
        "remaining_budgets": [
            list(schedule.remaining_budgets(config, t))
            for t in range(config.horizon)
        ],
        "innovation_variances": [
            step.innovation_var for step in trajectory.kalman_steps
        ],
    }


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = load_experiment_config(args.config, _overrides(args))
    system = config.system
    schedule = load_schedule(args.schedule, system)
    print(f"Evaluating {args.schedule} (T={system.horizon})")

    trajectory = run_deterministic(schedule, system)
    body = {
        "command": "evaluate",
        "system": system.model_dump(mode="json"),
        **_trajectory_body(schedule, system, trajectory),
        "analytic_baselines": analytic_baselines(system),
    }

    summary = [f"terminal cost: {trajectory.terminal_cost:.12g}"]
    for t, (v1, v2) in enumerate(trajectory.message_variances):
        p1, p2, pr = trajectory.achieved_powers[t]
        summary.append(
            f"  t={t}: var(m1)={v1:.6g} var(m2)={v2:.6g} "
            f"power=({p1:.4g}, {p2:.4g}, {pr:.4g})"
        )
    path = _write_report(
        _out_dir(args, config),
        "evaluate",
        "evaluate",
        body,
        summary,
        {"config": args.config, "schedule": args.schedule},
        started,
    )
    print("\n".join(summary))
    print(f"Report written to {path}")
    return EXIT_OK


def _baseline_table(report: OptimizationReport, system: SystemConfig) -> List[str]:
    lines = [
        f"best cost: {report.best_cost:.12g}",
        "baseline            cost        gain",
    ]
    for name, cost in report.baseline_costs.items():
        lines.append(f"  {name:<16}{cost:<12.6g}{report.improvement[name]:.6g}")
    for name, cost in analytic_baselines(system).items():
        lines.append(f"  {name:<16}{cost:<12.6g}(closed form)")
    return lines


def _optimize(config: ExperimentConfig, system: SystemConfig, warm_starts=()):
    return joint_optimize(
        system,
        restarts=config.restarts,
        seed=_require_seed(config),
        budget=config.budget,
        sweeps=config.sweeps,
        passive=config.passive,
        warm_starts=warm_starts,
        n_jobs=config.n_jobs,
    )


def cmd_optimize(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = load_experiment_config(args.config, _overrides(args))
    system = config.system
    _require_seed(config)
    print(
        f"Optimising T={system.horizon} with {config.restarts} restarts, "
        f"budget {config.budget}"
    )

    report = _optimize(config, system)
    schedule_file = ScheduleFile.from_schedule(report.best_schedule)
    body = {
        "command": "optimize",
        "system": system.model_dump(mode="json"),
        "seed": config.seed,
        "restarts": config.restarts,
        "budget": config.budget,
        "passive": config.passive,
        "best_cost": report.best_cost,
        "restart_costs": report.restart_costs,
        "cost_trace": report.cost_trace,
        "evaluations": report.evaluations,
        "baseline_costs": report.baseline_costs,
        "improvement": report.improvement,
        "analytic_baselines": analytic_baselines(system),
        "schedule": schedule_file.model_dump(mode="json"),
    }

    out_dir = _out_dir(args, config)
    write_atomic(out_dir / "schedule.json", schedule_file.dumps())
    summary = _baseline_table(report, system)
    path = _write_report(
        out_dir,
        "optimize",
        "optimize",
        body,
        summary,
        {"config": args.config},
        started,
    )
    print("\n".join(summary))
    print(f"Report written to {path}")
    return EXIT_OK


def _corrupted(analytic: CovTrajectory) -> CovTrajectory:
    shift = os.environ.get(CORRUPT_ANALYTIC_ENV)
    if not shift:
        return analytic
    return analytic.model_copy(
        update={"terminal_mse": analytic.terminal_mse * (1.0 + float(shift))}
    )


def cmd_validate(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = load_experiment_config(args.config, _overrides(args))
    system = config.system
    seed = _require_seed(config)
    if config.samples < MIN_VALIDATION_SAMPLES:
        raise ScheduleValidationError(
            [f"samples: need at least {MIN_VALIDATION_SAMPLES}, got {config.samples}"]
        )
    schedule = load_schedule(args.schedule, system)
    print(f"Validating {args.schedule} with {config.samples} samples (seed {seed})")

    analytic = _corrupted(run_deterministic(schedule, system))
    mc = monte_carlo(
        schedule, system, config.samples, seed, n_jobs=config.n_jobs, analytic=analytic
    )
    passed = mc.passed(Z_THRESHOLD)
    body = {
        "command": "validate",
        "system": system.model_dump(mode="json"),
        "threshold": Z_THRESHOLD,
        "passed": passed,
        **mc.model_dump(mode="json"),
    }
    verdict = "PASS" if passed else "FAIL"
    summary = [
        f"{verdict}: max |z| = {mc.max_abs_z:.3f} at {mc.max_abs_z_location}",
        f"  empirical MSE {mc.empirical_mse:.6g}, analytic {mc.analytic_mse:.6g}",
    ]
    path = _write_report(
        _out_dir(args, config),
        "validate",
        "validate",
        body,
        summary,
        {"config": args.config, "schedule": args.schedule},
        started,
    )
    print("\n".join(summary))
    print(f"Report written to {path}")
    return EXIT_OK if passed else EXIT_RUNTIME


def _sweep_group(config: ExperimentConfig, group) -> List[Dict[str, Any]]:
    """Optimise one chain of points, each warm-started from the previous optimum.

    The search may swap that start for its feedback-free copy (see expand_sweep).
    """
    rows = []
    previous = None
    for point, system in group:
        warm = [previous.best_schedule] if previous is not None else []
        report = _optimize(config.model_copy(update={"n_jobs": 1}), system, warm)
        closed = analytic_baselines(system)
        rows.append(
            {
                **point,
                "best_cost": report.best_cost,
                **report.baseline_costs,
                "no_feedback_repetition": closed["no_feedback_repetition"],
                "single_shot": closed["single_shot"],
            }
        )
        previous = report
    return rows


def cmd_sweep(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    config = load_experiment_config(args.config, _overrides(args))
    _require_seed(config)
    groups = expand_sweep(config)
    total = sum(len(group) for group in groups)
    print(f"Sweeping {total} grid points in {len(groups)} chains")

    chained = Parallel(n_jobs=config.n_jobs)(
        delayed(_sweep_group)(config, group) for group in groups
    )
    order = {
        tuple(point.values()): i
        for i, point in enumerate(config.sweep.points(config.system))
    }
    rows = sorted(
        (row for chain in chained for row in chain),
        key=lambda row: order[(row["horizon"], row["sigma_b_sq"], row["power"])],
    )

    table = pd.DataFrame(rows).reindex(columns=SWEEP_COLUMNS)
    out_dir = _out_dir(args, config)
    write_atomic(
        out_dir / "sweep.csv", table.to_csv(index=False, lineterminator="\n")
    )
    body = {
        "command": "sweep",
        "system": config.system.model_dump(mode="json"),
        "seed": config.seed,
        "rows": [
            {k: (None if pd.isna(v) else v) for k, v in row.items()}
            for row in table.to_dict(orient="records")
        ],
    }
    summary = [
        f"T={row['horizon']} sigma_b^2={row['sigma_b_sq']:g} P={row['power']:g}: "
        f"{row['best_cost']:.6g}"
        for row in rows
    ]
    path = _write_report(
        out_dir, "sweep", "sweep", body, summary, {"config": args.config}, started
    )
    print("\n".join(summary))
    print(f"Table written to {out_dir / 'sweep.csv'}; report {path}")
    return EXIT_OK


COMMANDS = {
    "evaluate": cmd_evaluate,
    "optimize": cmd_optimize,
    "validate": cmd_validate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ScheduleValidationError as e:
        for problem in e.problems:
            print(f"Error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as e:
        for problem in validation_problems(e, str(args.config)):
            print(f"Error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except InvalidInputError as e:
        print(f"Error: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConsistencyError, linalg.LinAlgError, FloatingPointError) as e:
        print(f"Error: numerical failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
