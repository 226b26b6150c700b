"""Domain types, state layout, power-normalised gains and system matrix assembly."""

from enum import Enum
from typing import Annotated, List, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_validator,
)
from scipy import linalg

# Dimension of every node's controller state u.
CONTROLLER_DIM = 3

SYMMETRY_TOL = 1e-8
NEGATIVE_EIG_TOL = 1e-8
RANK_TOL = 1e-10
DIRECTION_TOL = 1e-12


class InvalidInputError(ValueError):
    """A matrix or vector handed to the numerics is malformed."""


class ScheduleValidationError(ValueError):
    """A schedule or file failed validation; ``problems`` lists every location."""

    def __init__(self, problems: List[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConsistencyError(RuntimeError):
    """An internal numerical invariant broke (points at an assembly bug)."""


def _as_float_array(value):
    if isinstance(value, np.ndarray):
        return value.astype(float, copy=False)
    return np.asarray(value, dtype=float)


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float_array),
    PlainSerializer(
        lambda x: np.asarray(x).tolist(), return_type=list, when_used="json"
    ),
]


class PowerMode(str, Enum):
    INSTANTANEOUS = "instantaneous"
    TOTAL = "total"


class CostVariant(str, Enum):
    SUM_VARIANCE = "sum_variance"
    SUM_SQUARED_VARIANCE = "sum_squared_variance"


class IndexMap:
    """Fixed coordinates of the joint q-state and the receiver's p-state.

    q = (m1, m2, u1, u2, ur) has dimension 11; p appends the receiver's latest
    channel output yr at index 11. Noise columns are ordered (wb1, wb2, wf).
    """

    M1 = 0
    M2 = 1
    U1 = slice(2, 2 + CONTROLLER_DIM)
    U2 = slice(5, 5 + CONTROLLER_DIM)
    UR = slice(8, 8 + CONTROLLER_DIM)
    YR = 11
    Q_DIM = 11
    P_DIM = 12

    NOISE_B1 = 0
    NOISE_B2 = 1
    NOISE_F = 2
    NOISE_DIM = 3


class SystemConfig(BaseModel):
    """Channel, prior and power parameters of one coding problem."""

    model_config = ConfigDict(extra="forbid")

    horizon: int = Field(ge=1)
    sigma_f_sq: float = Field(gt=0)
    sigma_b1_sq: float = Field(default=1.0, ge=0)
    sigma_b2_sq: float = Field(default=1.0, ge=0)
    sigma_m1_sq: float = Field(default=1.0, ge=0)
    sigma_m2_sq: float = Field(default=1.0, ge=0)
    P1: float = Field(default=1.0, ge=0)
    P2: float = Field(default=1.0, ge=0)
    Pr: float = Field(default=1.0, ge=0)
    power_mode: PowerMode = PowerMode.INSTANTANEOUS
    cost_variant: CostVariant = CostVariant.SUM_VARIANCE
    param_box: float = Field(default=10.0, gt=0)

    @field_validator(
        "sigma_f_sq",
        "sigma_b1_sq",
        "sigma_b2_sq",
        "sigma_m1_sq",
        "sigma_m2_sq",
        "P1",
        "P2",
        "Pr",
        "param_box",
    )
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("must be finite")
        return value

    @property
    def noise_cov(self) -> np.ndarray:
        """W = diag(sigma_b1^2, sigma_b2^2, sigma_f^2) in noise-column order."""
        return np.diag([self.sigma_b1_sq, self.sigma_b2_sq, self.sigma_f_sq])

    @property
    def budgets(self) -> Tuple[float, float, float]:
        return self.P1, self.P2, self.Pr


class ControllerParams(BaseModel):
    """One node's update u' = a u + b m + c y at a single step (b is None at the receiver)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    a: FloatArray
    b: Optional[FloatArray] = None
    c: FloatArray

    @field_validator("a")
    @classmethod
    def _check_a(cls, value: np.ndarray) -> np.ndarray:
        if value.shape != (CONTROLLER_DIM, CONTROLLER_DIM):
            raise ValueError(f"expected a {CONTROLLER_DIM}x{CONTROLLER_DIM} matrix")
        if not np.all(np.isfinite(value)):
            raise ValueError("entries must be finite")
        return value

    @field_validator("b", "c")
    @classmethod
    def _check_vector(cls, value: Optional[np.ndarray]) -> Optional[np.ndarray]:
        if value is None:
            return value
        if value.shape != (CONTROLLER_DIM,):
            raise ValueError(f"expected a {CONTROLLER_DIM}-vector")
        if not np.all(np.isfinite(value)):
            raise ValueError("entries must be finite")
        return value

    @classmethod
    def zeros(cls, sender: bool = True) -> "ControllerParams":
        b = np.zeros(CONTROLLER_DIM) if sender else None
        return cls(
            a=np.zeros((CONTROLLER_DIM, CONTROLLER_DIM)),
            b=b,
            c=np.zeros(CONTROLLER_DIM),
        )

    @classmethod
    def hold(cls, sender: bool = True, sign: float = 1.0) -> "ControllerParams":
        """a = sign * I with nothing injected: the state is kept (or sign-flipped)."""
        params = cls.zeros(sender)
        params.a = sign * np.eye(CONTROLLER_DIM)
        return params

    def max_abs(self) -> float:
        parts = [np.abs(self.a).max(), np.abs(self.c).max()]
        if self.b is not None:
            parts.append(np.abs(self.b).max())
        return float(max(parts))


class ControllerSchedule(BaseModel):
    """Per-step controller parameters of both senders and the receiver.

    Power fractions are only meaningful in total-power mode; instantaneous mode
    always transmits P / T per slot regardless of what is stored here.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sender1: List[ControllerParams]
    sender2: List[ControllerParams]
    receiver: List[ControllerParams]
    rho1: List[float]
    rho2: List[float]
    rhor: List[float]
    frozen_receiver: bool = False

    @property
    def horizon(self) -> int:
        return len(self.sender1)

    @classmethod
    def uniform(
        cls,
        horizon: int,
        sender1: ControllerParams,
        sender2: ControllerParams,
        receiver: ControllerParams,
        frozen_receiver: bool = False,
    ) -> "ControllerSchedule":
        """Repeat the same parameters at every step with a uniform power split."""
        fractions = [1.0 / horizon] * horizon
        return cls(
            sender1=[sender1.model_copy(deep=True) for _ in range(horizon)],
            sender2=[sender2.model_copy(deep=True) for _ in range(horizon)],
            receiver=[receiver.model_copy(deep=True) for _ in range(horizon)],
            rho1=list(fractions),
            rho2=list(fractions),
            rhor=list(fractions),
            frozen_receiver=frozen_receiver,
        )

    def validate_for(self, config: SystemConfig) -> None:
        """Raise ScheduleValidationError naming every offending entry."""
        problems: List[str] = []
        horizon = config.horizon
        for name in ("sender1", "sender2", "receiver", "rho1", "rho2", "rhor"):
            length = len(getattr(self, name))
            if length != horizon:
                problems.append(f"{name}: has {length} steps, horizon is {horizon}")
        if problems:
            raise ScheduleValidationError(problems)

        for t in range(horizon):
            for name in ("sender1", "sender2", "receiver"):
                params = getattr(self, name)[t]
                is_sender = name != "receiver"
                if is_sender and params.b is None:
                    problems.append(f"steps[{t}].{name}.b: senders need b")
                if not is_sender and params.b is not None:
                    problems.append(f"steps[{t}].{name}.b: the receiver has no b")
                if params.max_abs() > config.param_box:
                    problems.append(
                        f"steps[{t}].{name}: entry magnitude {params.max_abs():.6g} "
                        f"exceeds box {config.param_box:g}"
                    )

        if config.power_mode is PowerMode.TOTAL:
            for name in ("rho1", "rho2", "rhor"):
                fractions = getattr(self, name)
                for t, value in enumerate(fractions):
                    if not np.isfinite(value) or value < 0:
                        problems.append(f"steps[{t}].{name}: fraction must be >= 0")
                total = float(np.sum(fractions))
                if abs(total - 1.0) > 1e-9:
                    problems.append(
                        f"steps[{horizon - 1}].{name}: fractions sum to {total:.12g}, "
                        "expected 1"
                    )
        if problems:
            raise ScheduleValidationError(problems)

    def slot_powers(self, config: SystemConfig, t: int) -> Tuple[float, float, float]:
        """Requested (P1_t, P2_t, Pr_t) at step t under the configured power mode."""
        if config.power_mode is PowerMode.INSTANTANEOUS:
            return tuple(budget / config.horizon for budget in config.budgets)
        return (
            self.rho1[t] * config.P1,
            self.rho2[t] * config.P2,
            self.rhor[t] * config.Pr,
        )

    def remaining_budgets(
        self, config: SystemConfig, t: int
    ) -> Tuple[float, float, float]:
        """xi_t = P * (1 - sum_{s<t} rho_s) for each node."""
        remaining = []
        for budget, name in zip(config.budgets, ("rho1", "rho2", "rhor")):
            if config.power_mode is PowerMode.INSTANTANEOUS:
                spent = t / config.horizon
            else:
                spent = float(np.sum(getattr(self, name)[:t]))
            remaining.append(budget * (1.0 - spent))
        return tuple(remaining)


class Gain(BaseModel):
    """Transmit row vector d with d Sigma_u d' = achieved_power."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    d: FloatArray
    achieved_power: float = Field(ge=0)


def _zero_gain() -> Gain:
    return Gain(d=np.zeros(CONTROLLER_DIM), achieved_power=0.0)


def compute_gain(sigma_u, power: float) -> Gain:
    """Power-normalise the fixed direction [1 1 1] against the state covariance.

    d = sqrt(P / 3) [1 1 1] Sigma_u^{-1/2} with the symmetric square root. A
    singular Sigma_u uses the pseudo-inverse square root and d is rescaled to
    the requested power; if [1 1 1] has no component in the range, d = 0.
    """
    sigma_u = np.asarray(sigma_u, dtype=float)
    if sigma_u.shape != (CONTROLLER_DIM, CONTROLLER_DIM):
        raise InvalidInputError(f"state covariance must be 3x3, got {sigma_u.shape}")
    if not np.all(np.isfinite(sigma_u)):
        raise InvalidInputError("state covariance has non-finite entries")
    if not np.isfinite(power) or power < 0:
        raise InvalidInputError(f"requested power must be >= 0, got {power}")

    scale = max(1.0, float(np.abs(sigma_u).max()))
    if np.abs(sigma_u - sigma_u.T).max() > SYMMETRY_TOL * scale:
        raise InvalidInputError("state covariance is not symmetric")
    sym = 0.5 * (sigma_u + sigma_u.T)

    trace = float(np.trace(sym))
    eigvals, eigvecs = linalg.eigh(sym)
    if eigvals[0] < -NEGATIVE_EIG_TOL * max(trace, 0.0):
        raise InvalidInputError(
            f"state covariance has negative eigenvalue {eigvals[0]:.3g}"
        )
    if trace <= 0 or power == 0:
        return _zero_gain()

    keep = eigvals > RANK_TOL * trace
    basis = eigvecs[:, keep]
    inv_sqrt = (basis / np.sqrt(eigvals[keep])) @ basis.T
    direction = np.ones(CONTROLLER_DIM) @ inv_sqrt

    # equals [1 1 1] Pi [1 1 1]' with Pi the projector onto the range
    raw_power = float(direction @ sym @ direction)
    if raw_power <= DIRECTION_TOL:
        return _zero_gain()

    d = direction * np.sqrt(power / raw_power)
    achieved = float(d @ sym @ d)
    return Gain(d=d, achieved_power=max(achieved, 0.0))


def place_sender_rows(
    A: np.ndarray,
    J: np.ndarray,
    rows: slice,
    message_col: int,
    params: ControllerParams,
    d_receiver: np.ndarray,
    noise_col: int,
) -> None:
    """u' = a u + b m + c (dr ur + wb) written into the rows of a sender block."""
    A[rows, message_col] = params.b
    A[rows, rows] = params.a
    A[rows, IndexMap.UR] = np.outer(params.c, d_receiver)
    J[rows, noise_col] = params.c


def assemble_joint_transition(
    schedule: ControllerSchedule,
    t: int,
    d1: np.ndarray,
    d2: np.ndarray,
    dr: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Build A^q_t (11x11) and J^q_t (11x3) from the primitive update equations."""
    A = np.zeros((IndexMap.Q_DIM, IndexMap.Q_DIM))
    J = np.zeros((IndexMap.Q_DIM, IndexMap.NOISE_DIM))
    A[IndexMap.M1, IndexMap.M1] = 1.0
    A[IndexMap.M2, IndexMap.M2] = 1.0

    place_sender_rows(
        A, J, IndexMap.U1, IndexMap.M1, schedule.sender1[t], dr, IndexMap.NOISE_B1
    )
    place_sender_rows(
        A, J, IndexMap.U2, IndexMap.M2, schedule.sender2[t], dr, IndexMap.NOISE_B2
    )

    # ur' = ar ur + cr (d1 u1 + d2 u2 + wf)
    receiver = schedule.receiver[t]
    A[IndexMap.UR, IndexMap.U1] = np.outer(receiver.c, d1)
    A[IndexMap.UR, IndexMap.U2] = np.outer(receiver.c, d2)
    A[IndexMap.UR, IndexMap.UR] = receiver.a
    J[IndexMap.UR, IndexMap.NOISE_F] = receiver.c

    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(J))):
        raise InvalidInputError(f"non-finite entry in the step {t} transition")
    return A, J


def init_joint_cov(config: SystemConfig) -> np.ndarray:
    """Covariance of q_0 with u1_0 = [m1, 0, 0], u2_0 = [m2, 0, 0], ur_0 = 0."""
    sigma = np.zeros((IndexMap.Q_DIM, IndexMap.Q_DIM))
    for message, block, variance in (
        (IndexMap.M1, IndexMap.U1, config.sigma_m1_sq),
        (IndexMap.M2, IndexMap.U2, config.sigma_m2_sq),
    ):
        seeded = block.start
        for i in (message, seeded):
            for j in (message, seeded):
                sigma[i, j] = variance
    return sigma
