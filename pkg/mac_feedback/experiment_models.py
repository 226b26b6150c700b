"""Pydantic models for config, schedule and report files."""

import hashlib
import itertools
import json
import os
import tempfile
from pathlib import Path
from typing import Annotated, Any, Dict, List, Optional

import numpy as np
import yaml
from pydantic import AfterValidator, BaseModel, ConfigDict, Field

from mac_feedback.model import (
    CONTROLLER_DIM,
    ControllerParams,
    ControllerSchedule,
    SystemConfig,
)


def calculate_file_checksum(file_path: Path) -> str:
    """Calculate SHA256 checksum of a file."""
    if not file_path.exists():
        return ""

    sha256_hash = hashlib.sha256()
    with open(file_path, "rb") as f:
        for chunk in iter(lambda: f.read(4096), b""):
            sha256_hash.update(chunk)

    return f"sha256:{sha256_hash.hexdigest()}"


def calculate_file_checksums(file_paths: Dict[str, Optional[Path]]) -> Dict[str, str]:
    """Checksums of the named input files; missing entries are skipped."""
    return {
        name: calculate_file_checksum(Path(path))
        for name, path in file_paths.items()
        if path is not None
    }


def write_atomic(path: Path, text: str) -> None:
    """Write text next to its destination, then rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _matrix(value: List[List[float]]) -> List[List[float]]:
    shape = np.shape(value)
    if shape != (CONTROLLER_DIM, CONTROLLER_DIM):
        raise ValueError(f"expected a {CONTROLLER_DIM}x{CONTROLLER_DIM} matrix")
    return value


def _vector(value: Optional[List[float]]) -> Optional[List[float]]:
    if value is not None and len(value) != CONTROLLER_DIM:
        raise ValueError(f"expected {CONTROLLER_DIM} entries, got {len(value)}")
    return value


Matrix = Annotated[List[List[float]], AfterValidator(_matrix)]
Vector = Annotated[List[float], AfterValidator(_vector)]


class ScheduleStep(BaseModel):
    """One step of a schedule file; matrices are row-major nested lists."""

    model_config = ConfigDict(extra="forbid")

    a1: Matrix
    b1: Vector
    c1: Vector
    a2: Matrix
    b2: Vector
    c2: Vector
    ar: Matrix
    cr: Vector
    rho1: Optional[float] = None
    rho2: Optional[float] = None
    rhor: Optional[float] = None


def _rows(array: np.ndarray) -> List[Any]:
    return np.asarray(array, dtype=float).tolist()


class ScheduleFile(BaseModel):
    """JSON form of a ControllerSchedule."""

    model_config = ConfigDict(extra="forbid")

    steps: List[ScheduleStep] = Field(min_length=1)
    frozen_receiver: bool = False

    @classmethod
    def from_file(cls, path: Path) -> "ScheduleFile":
        with open(path) as f:
            raw_data = json.load(f)
        if not isinstance(raw_data, dict):
            raise ValueError("expected a JSON object")
        return cls(**raw_data)

    @classmethod
    def from_schedule(cls, schedule: ControllerSchedule) -> "ScheduleFile":
        steps = []
        for t in range(schedule.horizon):
            s1, s2, r = schedule.sender1[t], schedule.sender2[t], schedule.receiver[t]
            steps.append(
                ScheduleStep(
                    a1=_rows(s1.a),
                    b1=_rows(s1.b),
                    c1=_rows(s1.c),
                    a2=_rows(s2.a),
                    b2=_rows(s2.b),
                    c2=_rows(s2.c),
                    ar=_rows(r.a),
                    cr=_rows(r.c),
                    rho1=float(schedule.rho1[t]),
                    rho2=float(schedule.rho2[t]),
                    rhor=float(schedule.rhor[t]),
                )
            )
        return cls(steps=steps, frozen_receiver=schedule.frozen_receiver)

    def to_schedule(self) -> ControllerSchedule:
        """Missing power fractions default to the uniform split 1/T."""
        horizon = len(self.steps)

        def fraction(value: Optional[float]) -> float:
            return 1.0 / horizon if value is None else value

        return ControllerSchedule(
            sender1=[
                ControllerParams(a=s.a1, b=s.b1, c=s.c1) for s in self.steps
            ],
            sender2=[
                ControllerParams(a=s.a2, b=s.b2, c=s.c2) for s in self.steps
            ],
            receiver=[ControllerParams(a=s.ar, c=s.cr) for s in self.steps],
            rho1=[fraction(s.rho1) for s in self.steps],
            rho2=[fraction(s.rho2) for s in self.steps],
            rhor=[fraction(s.rhor) for s in self.steps],
            frozen_receiver=self.frozen_receiver,
        )

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2) + "\n"


class SweepGrid(BaseModel):
    """Axes of a parameter sweep; an empty axis keeps the base config's value."""

    model_config = ConfigDict(extra="forbid")

    horizon: List[int] = Field(default_factory=list)
    sigma_b_sq: List[float] = Field(default_factory=list)
    power: List[float] = Field(default_factory=list)

    @property
    def is_empty(self) -> bool:
        return not (self.horizon or self.sigma_b_sq or self.power)

    def points(self, base: SystemConfig) -> List[Dict[str, float]]:
        """Cartesian product of the axes, horizon outermost."""
        if self.is_empty:
            return []
        horizons = self.horizon or [base.horizon]
        feedback = self.sigma_b_sq or [base.sigma_b1_sq]
        powers = self.power or [base.P1]
        return [
            {"horizon": t, "sigma_b_sq": s, "power": p}
            for t, s, p in itertools.product(horizons, feedback, powers)
        ]


class ExperimentConfig(BaseModel):
    """A system plus the knobs of every command; CLI flags override these values."""

    model_config = ConfigDict(extra="forbid")

    system: SystemConfig
    seed: Optional[int] = Field(default=None, ge=0)
    samples: int = Field(default=10_000, ge=2)
    restarts: int = Field(default=4, ge=1)
    budget: int = Field(default=2000, ge=1)
    sweeps: int = Field(default=1, ge=1)
    passive: bool = False
    n_jobs: int = 1
    sweep: SweepGrid = Field(default_factory=SweepGrid)
    out_dir: Optional[str] = None

    @classmethod
    def from_file(
        cls, path: Path, overrides: Optional[Dict[str, Any]] = None
    ) -> "ExperimentConfig":
        """Load a YAML or JSON config document, then apply overrides.

        Overrides keyed ``system.<field>`` land in the embedded SystemConfig;
        None values are skipped.
        """
        with open(path) as f:
            raw_data = yaml.safe_load(f)
        if not isinstance(raw_data, dict):
            raise ValueError("expected a mapping at the top level")

        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key.startswith("system."):
                system = raw_data.setdefault("system", {})
                if isinstance(system, dict):
                    system[key.split(".", 1)[1]] = value
            else:
                raw_data[key] = value
        return cls(**raw_data)


class ReportMeta(BaseModel):
    """Run metadata kept apart from the deterministic body."""

    generated_at: str
    wall_time_s: float
    version: str
    command: str
    inputs: Dict[str, str] = Field(default_factory=dict)


class ReportEnvelope(BaseModel):
    meta: ReportMeta
    body: Dict[str, Any]

    def body_json(self) -> str:
        return json.dumps(self.body, indent=2, sort_keys=True)

    def dumps(self) -> str:
        document = {"meta": self.meta.model_dump(mode="json"), "body": self.body}
        return json.dumps(document, indent=2, sort_keys=True) + "\n"
