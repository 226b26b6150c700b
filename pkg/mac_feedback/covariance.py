"""Covariance propagation, the receiver's Kalman recursion and a batch MMSE oracle.

Every quantity here is deterministic: the unconditional covariance of the
joint state and the receiver's conditional covariance depend only on the
schedule, never on realised channel outputs.
"""

from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from mac_feedback.model import (
    ConsistencyError,
    ControllerSchedule,
    CostVariant,
    FloatArray,
    Gain,
    IndexMap,
    SystemConfig,
    assemble_joint_transition,
    compute_gain,
    init_joint_cov,
    place_sender_rows,
)


class KalmanStep(BaseModel):
    """Prediction and gain used when the receiver conditions on one output."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    predicted_cov: FloatArray
    gain: FloatArray
    innovation_var: float


class CovTrajectory(BaseModel):
    """Deterministic covariance history of one schedule.

    ``joint_covs`` holds Sigma^q_0 .. Sigma^q_T; ``conditional_covs[t]`` and
    ``kalman_steps[t]`` belong to conditioning on yr_t, t = 0 .. T-1;
    ``p_transitions[t]`` maps p_t to p_{t+1} for t = 0 .. T-2.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    joint_covs: List[FloatArray]
    conditional_covs: List[FloatArray]
    gains1: List[Gain]
    gains2: List[Gain]
    gainsr: List[Gain]
    requested_powers: List[Tuple[float, float, float]]
    kalman_steps: List[KalmanStep]
    p_transitions: List[FloatArray]
    terminal_mse: float
    terminal_cost: float

    @property
    def horizon(self) -> int:
        return len(self.conditional_covs)

    @property
    def message_variances(self) -> np.ndarray:
        """(T, 2) array of Sigma^r_{t|t}(0,0) and (1,1)."""
        return np.array(
            [
                [cov[IndexMap.M1, IndexMap.M1], cov[IndexMap.M2, IndexMap.M2]]
                for cov in self.conditional_covs
            ]
        )

    @property
    def achieved_powers(self) -> np.ndarray:
        """(T, 3) array of achieved powers for sender 1, sender 2, receiver."""
        return np.array(
            [
                [g1.achieved_power, g2.achieved_power, gr.achieved_power]
                for g1, g2, gr in zip(self.gains1, self.gains2, self.gainsr)
            ]
        )


def _symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def propagate_joint(
    sigma_q: np.ndarray, A: np.ndarray, J: np.ndarray, config: SystemConfig
) -> np.ndarray:
    """Sigma^q_{t+1} = A Sigma A' + J W J'."""
    return _symmetrize(A @ sigma_q @ A.T + J @ config.noise_cov @ J.T)


def assemble_p_transition(
    schedule: ControllerSchedule,
    t: int,
    d1: np.ndarray,
    d2: np.ndarray,
    dr: np.ndarray,
    d1_next: np.ndarray,
    d2_next: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Build A^p_t (12x12) and J^p_t (12x3) for the receiver's augmented state.

    Noise columns are (wb1_t, wb2_t, wf_{t+1}). The receiver feeds yr_t into
    ur_{t+1} through coordinate 11, and the new output row uses the next
    step's gains.
    """
    A = np.zeros((IndexMap.P_DIM, IndexMap.P_DIM))
    J = np.zeros((IndexMap.P_DIM, IndexMap.NOISE_DIM))
    A[IndexMap.M1, IndexMap.M1] = 1.0
    A[IndexMap.M2, IndexMap.M2] = 1.0

    place_sender_rows(
        A, J, IndexMap.U1, IndexMap.M1, schedule.sender1[t], dr, IndexMap.NOISE_B1
    )
    place_sender_rows(
        A, J, IndexMap.U2, IndexMap.M2, schedule.sender2[t], dr, IndexMap.NOISE_B2
    )

    receiver = schedule.receiver[t]
    A[IndexMap.UR, IndexMap.UR] = receiver.a
    A[IndexMap.UR, IndexMap.YR] = receiver.c

    # yr_{t+1} = d1_{t+1} u1_{t+1} + d2_{t+1} u2_{t+1} + wf_{t+1}
    A[IndexMap.YR] = d1_next @ A[IndexMap.U1] + d2_next @ A[IndexMap.U2]
    J[IndexMap.YR] = d1_next @ J[IndexMap.U1] + d2_next @ J[IndexMap.U2]
    J[IndexMap.YR, IndexMap.NOISE_F] = 1.0
    return A, J


def _condition_on_output(predicted: np.ndarray) -> Tuple[np.ndarray, KalmanStep]:
    """Condition a p-state covariance on its own coordinate 11 (Joseph form)."""
    innovation = float(predicted[IndexMap.YR, IndexMap.YR])
    if not innovation > 0:
        raise ConsistencyError(f"innovation variance {innovation:.3g} is not positive")
    gain = predicted[:, IndexMap.YR] / innovation
    selector = np.zeros(IndexMap.P_DIM)
    selector[IndexMap.YR] = 1.0
    keep = np.eye(IndexMap.P_DIM) - np.outer(gain, selector)
    updated = _symmetrize(keep @ predicted @ keep.T)
    step = KalmanStep(predicted_cov=predicted, gain=gain, innovation_var=innovation)
    return updated, step


def kalman_update(
    sigma_tt: np.ndarray, A: np.ndarray, J: np.ndarray, config: SystemConfig
) -> Tuple[np.ndarray, KalmanStep]:
    """One predict/condition cycle: Sigma^r_{t|t} -> Sigma^r_{t+1|t+1}."""
    predicted = _symmetrize(A @ sigma_tt @ A.T + J @ config.noise_cov @ J.T)
    return _condition_on_output(predicted)


def receiver_prior(
    sigma_q0: np.ndarray, d1: np.ndarray, d2: np.ndarray, config: SystemConfig
) -> np.ndarray:
    """Covariance of p_0 = (q_0, yr_0) before any observation."""
    embed = np.zeros((IndexMap.P_DIM, IndexMap.Q_DIM))
    embed[: IndexMap.Q_DIM, : IndexMap.Q_DIM] = np.eye(IndexMap.Q_DIM)
    embed[IndexMap.YR, IndexMap.U1] = d1
    embed[IndexMap.YR, IndexMap.U2] = d2
    prior = embed @ sigma_q0 @ embed.T
    prior[IndexMap.YR, IndexMap.YR] += config.sigma_f_sq
    return _symmetrize(prior)


def terminal_value(v1: float, v2: float, variant: CostVariant) -> float:
    if variant is CostVariant.SUM_SQUARED_VARIANCE:
        return v1 * v1 + v2 * v2
    return v1 + v2


def _gains_at(
    schedule: ControllerSchedule, config: SystemConfig, t: int, sigma_q: np.ndarray
) -> Tuple[Gain, Gain, Gain]:
    p1, p2, pr = schedule.slot_powers(config, t)
    return (
        compute_gain(sigma_q[IndexMap.U1, IndexMap.U1], p1),
        compute_gain(sigma_q[IndexMap.U2, IndexMap.U2], p2),
        compute_gain(sigma_q[IndexMap.UR, IndexMap.UR], pr),
    )


def run_deterministic(
    schedule: ControllerSchedule, config: SystemConfig, validate: bool = True
) -> CovTrajectory:
    """Roll the covariance recursions forward over the whole horizon."""
    if validate:
        schedule.validate_for(config)
    horizon = config.horizon

    joint = [init_joint_cov(config)]
    gains = [_gains_at(schedule, config, 0, joint[0])]
    for t in range(horizon):
        A, J = assemble_joint_transition(schedule, t, *(g.d for g in gains[t]))
        joint.append(propagate_joint(joint[t], A, J, config))
        if t + 1 < horizon:
            gains.append(_gains_at(schedule, config, t + 1, joint[t + 1]))

    g1, g2, _ = gains[0]
    conditioned, step = _condition_on_output(
        receiver_prior(joint[0], g1.d, g2.d, config)
    )
    conditional = [conditioned]
    steps = [step]
    transitions = []
    for t in range(horizon - 1):
        now, nxt = gains[t], gains[t + 1]
        A_p, J_p = assemble_p_transition(
            schedule, t, now[0].d, now[1].d, now[2].d, nxt[0].d, nxt[1].d
        )
        conditioned, step = kalman_update(conditional[t], A_p, J_p, config)
        conditional.append(conditioned)
        steps.append(step)
        transitions.append(A_p)

    final = conditional[-1]
    v1 = float(final[IndexMap.M1, IndexMap.M1])
    v2 = float(final[IndexMap.M2, IndexMap.M2])
    return CovTrajectory(
        joint_covs=joint,
        conditional_covs=conditional,
        gains1=[g[0] for g in gains],
        gains2=[g[1] for g in gains],
        gainsr=[g[2] for g in gains],
        requested_powers=[schedule.slot_powers(config, t) for t in range(horizon)],
        kalman_steps=steps,
        p_transitions=transitions,
        terminal_mse=v1 + v2,
        terminal_cost=terminal_value(v1, v2, config.cost_variant),
    )


def batch_mmse_cov(schedule: ControllerSchedule, config: SystemConfig) -> np.ndarray:
    """Posterior covariance of (m1, m2) given yr_0 .. yr_{T-1}, computed in one shot.

    Every variable is tracked as an explicit linear combination of the
    primitive Gaussians (m1, m2 and the per-step noises wb1, wb2, wf), the
    joint covariance of messages and outputs is formed directly, and the
    messages are conditioned on all outputs at once.
    """
    horizon = config.horizon
    n_base = 2 + IndexMap.NOISE_DIM * horizon
    variances = np.concatenate(
        [
            [config.sigma_m1_sq, config.sigma_m2_sq],
            np.tile(np.diag(config.noise_cov), horizon),
        ]
    )

    coeff = np.zeros((IndexMap.Q_DIM, n_base))
    coeff[IndexMap.M1, 0] = 1.0
    coeff[IndexMap.M2, 1] = 1.0
    coeff[IndexMap.U1.start, 0] = 1.0
    coeff[IndexMap.U2.start, 1] = 1.0

    outputs = []
    for t in range(horizon):
        cov = _symmetrize((coeff * variances) @ coeff.T)
        g1, g2, gr = _gains_at(schedule, config, t, cov)
        noise_cols = 2 + IndexMap.NOISE_DIM * t + np.arange(IndexMap.NOISE_DIM)

        row = g1.d @ coeff[IndexMap.U1] + g2.d @ coeff[IndexMap.U2]
        row[noise_cols[IndexMap.NOISE_F]] += 1.0
        outputs.append(row)

        A, J = assemble_joint_transition(schedule, t, g1.d, g2.d, gr.d)
        fresh = np.zeros((IndexMap.NOISE_DIM, n_base))
        fresh[np.arange(IndexMap.NOISE_DIM), noise_cols] = 1.0
        coeff = A @ coeff + J @ fresh

    stacked = np.vstack([coeff[[IndexMap.M1, IndexMap.M2]], np.array(outputs)])
    joint = _symmetrize((stacked * variances) @ stacked.T)
    s_mm, s_my, s_yy = joint[:2, :2], joint[:2, 2:], joint[2:, 2:]
    try:
        weights = linalg.solve(s_yy, s_my.T, assume_a="pos")
    except linalg.LinAlgError:
        weights = linalg.pinvh(s_yy) @ s_my.T
    return _symmetrize(s_mm - s_my @ weights)
