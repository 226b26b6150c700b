"""Loading of config and schedule files, and expansion of sweep grids."""

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import yaml
from pydantic import ValidationError

from mac_feedback.experiment_models import ExperimentConfig, ScheduleFile
from mac_feedback.model import ControllerSchedule, ScheduleValidationError, SystemConfig


def format_location(loc: Sequence[Union[str, int]]) -> str:
    """("steps", 2, "rho1") -> "steps[2].rho1"."""
    text = ""
    for part in loc:
        if isinstance(part, int):
            text += f"[{part}]"
        else:
            text += f".{part}" if text else str(part)
    return text


def validation_problems(error: ValidationError, source: str) -> List[str]:
    return [
        f"{source}:{format_location(item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    ]


def load_experiment_config(
    path: Path, overrides: Dict[str, Any] = None
) -> ExperimentConfig:
    """Read a config file and apply flag overrides.

    The merged document is validated once so every problem is reported
    together.
    """
    path = Path(path)
    try:
        return ExperimentConfig.from_file(path, overrides)
    except OSError as e:
        raise ScheduleValidationError([f"{path}: cannot read config ({e})"])
    except yaml.YAMLError as e:
        raise ScheduleValidationError([f"{path}: not valid YAML/JSON ({e})"])
    except ValidationError as e:
        raise ScheduleValidationError(validation_problems(e, path.name))
    except ValueError as e:
        raise ScheduleValidationError([f"{path}: {e}"])


def load_schedule(path: Path, config: SystemConfig) -> ControllerSchedule:
    """Read a schedule file and check it against the system it will run on."""
    path = Path(path)
    try:
        schedule = ScheduleFile.from_file(path).to_schedule()
    except OSError as e:
        raise ScheduleValidationError([f"{path}: cannot read schedule ({e})"])
    except json.JSONDecodeError as e:
        raise ScheduleValidationError([f"{path}: not valid JSON ({e})"])
    except ValidationError as e:
        raise ScheduleValidationError(validation_problems(e, path.name))
    except ValueError as e:
        raise ScheduleValidationError([f"{path}: {e}"])

    try:
        schedule.validate_for(config)
    except ScheduleValidationError as e:
        raise ScheduleValidationError([f"{path.name}:{p}" for p in e.problems])
    return schedule


def point_config(base: SystemConfig, point: Dict[str, float]) -> SystemConfig:
    """Apply one grid point: both feedback links and both sender budgets move together."""
    return SystemConfig(
        **{
            **base.model_dump(),
            "horizon": int(point["horizon"]),
            "sigma_b1_sq": float(point["sigma_b_sq"]),
            "sigma_b2_sq": float(point["sigma_b_sq"]),
            "P1": float(point["power"]),
            "P2": float(point["power"]),
        }
    )


def expand_sweep(
    config: ExperimentConfig,
) -> List[List[Tuple[Dict[str, float], SystemConfig]]]:
    """Group grid points that differ only in sigma_b^2, noisiest feedback first.

    Each point is warm-started from the previous optimum or, when cheaper,
    from its feedback-free copy. The feedback-free cost does not depend on
    sigma_b^2, so a cleaner point starts no worse than that copy scored at the
    noisier point. The optimum itself can still cost more where feedback was
    worth something at the noisier point.
    """
    points = config.sweep.points(config.system)
    if not points:
        raise ScheduleValidationError(["sweep: the grid has no points"])

    groups: Dict[Tuple[int, float], List[Dict[str, float]]] = {}
    for point in points:
        groups.setdefault((point["horizon"], point["power"]), []).append(point)

    expanded = []
    for members in groups.values():
        members = sorted(members, key=lambda p: -p["sigma_b_sq"])
        group = []
        for point in members:
            try:
                group.append((point, point_config(config.system, point)))
            except ValidationError as e:
                raise ScheduleValidationError(validation_problems(e, "sweep"))
        expanded.append(group)
    return expanded
