"""
Shared pytest fixtures for the numerical and CLI tests.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from mac_feedback.experiment_models import ScheduleFile
from mac_feedback.model import (
    CONTROLLER_DIM,
    ControllerParams,
    ControllerSchedule,
    PowerMode,
    SystemConfig,
)


def random_schedule(
    rng: np.random.Generator, config: SystemConfig, scale: float = 0.5
) -> ControllerSchedule:
    """Schedule with Gaussian parameters of the given scale, clipped to the box."""
    box = config.param_box

    def draw(*shape):
        return np.clip(scale * rng.standard_normal(shape), -box, box)

    def node(sender: bool) -> ControllerParams:
        return ControllerParams(
            a=draw(CONTROLLER_DIM, CONTROLLER_DIM),
            b=draw(CONTROLLER_DIM) if sender else None,
            c=draw(CONTROLLER_DIM),
        )

    horizon = config.horizon
    if config.power_mode is PowerMode.TOTAL:
        fractions = rng.dirichlet(np.ones(horizon), size=3)
        fractions /= fractions.sum(axis=1, keepdims=True)
    else:
        fractions = np.full((3, horizon), 1.0 / horizon)
    return ControllerSchedule(
        sender1=[node(True) for _ in range(horizon)],
        sender2=[node(True) for _ in range(horizon)],
        receiver=[node(False) for _ in range(horizon)],
        rho1=fractions[0].tolist(),
        rho2=fractions[1].tolist(),
        rhor=fractions[2].tolist(),
    )


def write_schedule(path: Path, schedule: ControllerSchedule) -> Path:
    path.write_text(ScheduleFile.from_schedule(schedule).dumps())
    return path


def write_config(path: Path, system: dict, **knobs) -> Path:
    path.write_text(json.dumps({"system": system, **knobs}, indent=2))
    return path


@pytest.fixture
def unit_config():
    """T = 1, unit priors, unit noise, unit powers."""
    return SystemConfig(horizon=1, sigma_f_sq=1.0)


@pytest.fixture
def no_feedback_config():
    """T = 2 with a silent receiver, so only sender-side structure matters."""
    return SystemConfig(horizon=2, sigma_f_sq=1.0, Pr=0.0)


@pytest.fixture
def repetition_config():
    """T = 4 with per-slot power 1 (P = 4 per sender)."""
    return SystemConfig(horizon=4, sigma_f_sq=1.0, P1=4.0, P2=4.0, Pr=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
