"""Sampled runs of the coding scheme and Monte Carlo checks of the analytic covariances."""

from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field

from mac_feedback.covariance import CovTrajectory, run_deterministic
from mac_feedback.model import (
    ControllerSchedule,
    FloatArray,
    IndexMap,
    SystemConfig,
)

# Substream tags mixed into the seed so single runs and Monte Carlo chunks
# never share a generator.
SINGLE_STREAM = 0
MC_STREAM = 1
CHUNK_SIZE = 4096


class Trajectory(BaseModel):
    """One realised run: messages, controller states, channel symbols and estimates."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m1: float
    m2: float
    u1: FloatArray  # (T+1, 3)
    u2: FloatArray
    ur: FloatArray
    x1: FloatArray  # (T,)
    x2: FloatArray
    xr: FloatArray
    yr: FloatArray
    y1: FloatArray
    y2: FloatArray
    wf: FloatArray
    wb1: FloatArray
    wb2: FloatArray
    estimates: FloatArray  # (T, 12) conditional means of p_t
    m1_hat: float
    m2_hat: float

    @property
    def squared_error(self) -> float:
        return (self.m1_hat - self.m1) ** 2 + (self.m2_hat - self.m2) ** 2


class EstimatorState(BaseModel):
    """Receiver's conditional mean of p_t after seeing yr_0 .. yr_t."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    t: int
    mean: FloatArray

    @property
    def message_estimates(self) -> Tuple[float, float]:
        return float(self.mean[IndexMap.M1]), float(self.mean[IndexMap.M2])


class McReport(BaseModel):
    """Empirical moments of a Monte Carlo run next to their analytic values."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    n_samples: int = Field(ge=2)
    seed: int
    empirical_joint_covs: FloatArray  # (T+1, 11, 11)
    joint_cov_z: FloatArray
    empirical_powers: FloatArray  # (T, 3)
    analytic_powers: FloatArray
    power_z: FloatArray
    empirical_message_mse: FloatArray  # (2,)
    empirical_mse: float
    analytic_mse: float
    mse_z: float
    max_abs_z: float
    max_abs_z_location: str

    def passed(self, threshold: float = 5.0) -> bool:
        return bool(self.max_abs_z <= threshold)


def _noise_scales(config: SystemConfig) -> np.ndarray:
    """Standard deviations in draw order (wf, wb1, wb2)."""
    return np.sqrt([config.sigma_f_sq, config.sigma_b1_sq, config.sigma_b2_sq])


def _mean_updates(analytic: CovTrajectory) -> List[np.ndarray]:
    """(I - L_{t+1} C) A^p_t for every step after the first."""
    updates = []
    for step, transition in zip(analytic.kalman_steps[1:], analytic.p_transitions):
        keep = np.eye(IndexMap.P_DIM)
        keep[:, IndexMap.YR] -= step.gain
        updates.append(keep @ transition)
    return updates


def _simulate_block(
    schedule: ControllerSchedule,
    config: SystemConfig,
    analytic: CovTrajectory,
    rng: np.random.Generator,
    n: int,
    noise_free: bool = False,
) -> Dict[str, np.ndarray]:
    """Sample n independent runs at once, following the per-step event order.

    Senders transmit, the receiver observes yr_t, transmits its feedback
    (which depends only on yr_{0:t-1}), the senders observe it, every
    controller updates, and the estimator conditions on yr_t.
    """
    horizon = config.horizon
    messages = rng.standard_normal((n, 2)) * np.sqrt(
        [config.sigma_m1_sq, config.sigma_m2_sq]
    )
    noise = rng.standard_normal((n, horizon, 3)) * _noise_scales(config)
    if noise_free:
        noise = np.zeros_like(noise)

    m1, m2 = messages[:, 0], messages[:, 1]
    q = np.zeros((n, horizon + 1, IndexMap.Q_DIM))
    q[:, 0, IndexMap.M1] = m1
    q[:, 0, IndexMap.M2] = m2
    q[:, 0, IndexMap.U1.start] = m1
    q[:, 0, IndexMap.U2.start] = m2

    symbols = np.zeros((n, horizon, 3))
    outputs = np.zeros((n, horizon, 3))
    estimates = np.zeros((n, horizon, IndexMap.P_DIM))
    updates = _mean_updates(analytic)

    for t in range(horizon):
        u1 = q[:, t, IndexMap.U1]
        u2 = q[:, t, IndexMap.U2]
        ur = q[:, t, IndexMap.UR]
        wf, wb1, wb2 = noise[:, t, 0], noise[:, t, 1], noise[:, t, 2]

        x1 = u1 @ analytic.gains1[t].d
        x2 = u2 @ analytic.gains2[t].d
        xr = ur @ analytic.gainsr[t].d
        yr = x1 + x2 + wf
        y1 = xr + wb1
        y2 = xr + wb2
        symbols[:, t] = np.column_stack([x1, x2, xr])
        outputs[:, t] = np.column_stack([yr, y1, y2])

        g1, g2, gr = schedule.sender1[t], schedule.sender2[t], schedule.receiver[t]
        q[:, t + 1, IndexMap.M1] = m1
        q[:, t + 1, IndexMap.M2] = m2
        q[:, t + 1, IndexMap.U1] = u1 @ g1.a.T + np.outer(m1, g1.b) + np.outer(y1, g1.c)
        q[:, t + 1, IndexMap.U2] = u2 @ g2.a.T + np.outer(m2, g2.b) + np.outer(y2, g2.c)
        q[:, t + 1, IndexMap.UR] = ur @ gr.a.T + np.outer(yr, gr.c)

        gain = analytic.kalman_steps[t].gain
        if t == 0:
            estimates[:, 0] = np.outer(yr, gain)
        else:
            estimates[:, t] = estimates[:, t - 1] @ updates[t - 1].T + np.outer(
                yr, gain
            )

    return {
        "messages": messages,
        "noise": noise,
        "q": q,
        "symbols": symbols,
        "outputs": outputs,
        "estimates": estimates,
    }


def sample_trajectory(
    schedule: ControllerSchedule,
    config: SystemConfig,
    seed: int,
    index: int = 0,
    noise_free: bool = False,
    analytic: Optional[CovTrajectory] = None,
) -> Trajectory:
    """Draw one run from the substream identified by (seed, index).

    ``noise_free`` zeroes every channel noise draw while the gain and Kalman
    computations keep using the configured (positive) variances.
    """
    if analytic is None:
        analytic = run_deterministic(schedule, config)
    rng = np.random.default_rng([seed, SINGLE_STREAM, index])
    block = _simulate_block(schedule, config, analytic, rng, 1, noise_free)

    q = block["q"][0]
    estimates = block["estimates"][0]
    return Trajectory(
        m1=float(block["messages"][0, 0]),
        m2=float(block["messages"][0, 1]),
        u1=q[:, IndexMap.U1],
        u2=q[:, IndexMap.U2],
        ur=q[:, IndexMap.UR],
        x1=block["symbols"][0, :, 0],
        x2=block["symbols"][0, :, 1],
        xr=block["symbols"][0, :, 2],
        yr=block["outputs"][0, :, 0],
        y1=block["outputs"][0, :, 1],
        y2=block["outputs"][0, :, 2],
        wf=block["noise"][0, :, 0],
        wb1=block["noise"][0, :, 1],
        wb2=block["noise"][0, :, 2],
        estimates=estimates,
        m1_hat=float(estimates[-1, IndexMap.M1]),
        m2_hat=float(estimates[-1, IndexMap.M2]),
    )


def estimator_states(trajectory: Trajectory) -> List[EstimatorState]:
    return [
        EstimatorState(t=t, mean=mean) for t, mean in enumerate(trajectory.estimates)
    ]


def _moments(values: np.ndarray) -> Tuple[int, np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    return values.shape[0], mean, ((values - mean) ** 2).sum(axis=0)


def _merge(a, b):
    """Combine (count, mean, sum of squared deviations) of two disjoint samples."""
    n_a, mean_a, m2_a = a
    n_b, mean_b, m2_b = b
    n = n_a + n_b
    delta = mean_b - mean_a
    mean = mean_a + delta * (n_b / n)
    m2 = m2_a + m2_b + delta**2 * (n_a * n_b / n)
    return n, mean, m2


def _chunk_moments(
    schedule: ControllerSchedule,
    config: SystemConfig,
    analytic: CovTrajectory,
    seed: int,
    chunk_index: int,
    size: int,
) -> Dict[str, Tuple[int, np.ndarray, np.ndarray]]:
    rng = np.random.default_rng([seed, MC_STREAM, chunk_index])
    block = _simulate_block(schedule, config, analytic, rng, size)

    q = block["q"]
    errors = (block["estimates"][:, -1, :2] - block["messages"]) ** 2
    return {
        "joint": _moments(q[..., :, None] * q[..., None, :]),
        "power": _moments(block["symbols"] ** 2),
        "message_mse": _moments(errors),
        "mse": _moments(errors.sum(axis=1)),
    }


def _z_scores(moments, analytic) -> np.ndarray:
    n, mean, m2 = moments
    analytic = np.asarray(analytic, dtype=float)
    se = np.sqrt(m2 / (n - 1) / n)
    diff = np.asarray(mean - analytic, dtype=float)
    z = np.divide(diff, se, out=np.zeros_like(diff), where=se > 0)
    stuck = (se == 0) & (np.abs(diff) > 1e-12 * np.maximum(1.0, np.abs(analytic)))
    return np.where(stuck, np.inf, z)


def monte_carlo(
    schedule: ControllerSchedule,
    config: SystemConfig,
    n_samples: int,
    seed: int,
    n_jobs: int = 1,
    analytic: Optional[CovTrajectory] = None,
) -> McReport:
    """Compare sampled second moments against the deterministic recursions.

    Samples are split into chunks of CHUNK_SIZE, each drawn from the substream
    (seed, chunk index); chunk statistics are merged in chunk order, so the
    report is identical for any ``n_jobs``. Streams are keyed per chunk, not
    per trajectory: sample i of a run is not ``sample_trajectory(seed, i)``.
    """
    if n_samples < 2:
        raise ValueError("monte carlo needs at least 2 samples")
    if analytic is None:
        analytic = run_deterministic(schedule, config)

    sizes = [CHUNK_SIZE] * (n_samples // CHUNK_SIZE)
    if n_samples % CHUNK_SIZE:
        sizes.append(n_samples % CHUNK_SIZE)

    chunks = Parallel(n_jobs=n_jobs)(
        delayed(_chunk_moments)(schedule, config, analytic, seed, k, size)
        for k, size in enumerate(sizes)
    )
    merged = chunks[0]
    for chunk in chunks[1:]:
        merged = {key: _merge(merged[key], chunk[key]) for key in merged}

    joint_z = _z_scores(merged["joint"], np.array(analytic.joint_covs))
    power_z = _z_scores(merged["power"], analytic.achieved_powers)
    mse_z = float(_z_scores(merged["mse"], analytic.terminal_mse))

    candidates = [
        (float(np.abs(joint_z).max()), joint_z, "joint_cov"),
        (float(np.abs(power_z).max()), power_z, "power"),
        (abs(mse_z), None, "mse"),
    ]
    max_abs_z, where, label = max(candidates, key=lambda item: item[0])
    if where is not None:
        position = np.unravel_index(int(np.argmax(np.abs(where))), where.shape)
        label = f"{label}[{', '.join(str(int(i)) for i in position)}]"

    return McReport(
        n_samples=n_samples,
        seed=seed,
        empirical_joint_covs=merged["joint"][1],
        joint_cov_z=joint_z,
        empirical_powers=merged["power"][1],
        analytic_powers=analytic.achieved_powers,
        power_z=power_z,
        empirical_message_mse=merged["message_mse"][1],
        empirical_mse=float(merged["mse"][1]),
        analytic_mse=analytic.terminal_mse,
        mse_z=mse_z,
        max_abs_z=max_abs_z,
        max_abs_z_location=label,
    )
