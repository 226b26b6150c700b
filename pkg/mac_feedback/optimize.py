"""Search over controller schedules for the lowest terminal estimation cost.

The covariance state evolves deterministically, so the backward dynamic
program over (Sigma^q, Sigma^r) is equivalent to open-loop minimisation over
the parameter sequence. ``backward_sweep`` realises the backward recursion as
block-coordinate descent (t = T-1 .. 0); ``joint_optimize`` wraps it with a
cross-entropy search from several warm starts.
"""

import time
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg, optimize

from mac_feedback.covariance import run_deterministic, terminal_value
from mac_feedback.model import (
    CONTROLLER_DIM,
    ConsistencyError,
    ControllerParams,
    ControllerSchedule,
    FloatArray,
    InvalidInputError,
    PowerMode,
    ScheduleValidationError,
    SystemConfig,
)

# Per-step layout of the flat parameter vector.
_MATRIX = CONTROLLER_DIM * CONTROLLER_DIM
_FIELDS: List[Tuple[str, str, int]] = [
    ("sender1", "a", _MATRIX),
    ("sender1", "b", CONTROLLER_DIM),
    ("sender1", "c", CONTROLLER_DIM),
    ("sender2", "a", _MATRIX),
    ("sender2", "b", CONTROLLER_DIM),
    ("sender2", "c", CONTROLLER_DIM),
    ("receiver", "a", _MATRIX),
    ("receiver", "c", CONTROLLER_DIM),
]
STEP_PARAMS = sum(size for _, _, size in _FIELDS)  # 42
RECEIVER_OFFSET = STEP_PARAMS - _MATRIX - CONTROLLER_DIM  # 30
# Per-step slices of each node's (a, b, c) entries.
_NODE_SLICES = {
    "sender1": slice(0, RECEIVER_OFFSET // 2),
    "sender2": slice(RECEIVER_OFFSET // 2, RECEIVER_OFFSET),
    "receiver": slice(RECEIVER_OFFSET, STEP_PARAMS),
}
LOGITS_PER_STEP = 3
_FRACTIONS = ("rho1", "rho2", "rhor")
# Zero fractions pack to log(_ZERO_FRACTION); anything unpacked below
# _ZERO_CUTOFF is treated as an exact zero.
_ZERO_FRACTION = 1e-300
_ZERO_CUTOFF = 1e-280


class OptimizationReport(BaseModel):
    """Best schedule found together with the search history."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    best_schedule: ControllerSchedule
    best_theta: FloatArray
    best_cost: float
    cost_trace: List[float]
    restarts: int = 1
    restart_costs: List[float] = Field(default_factory=list)
    evaluations: int = 0
    wall_time_s: float = 0.0
    baseline_costs: Dict[str, float] = Field(default_factory=dict)

    @property
    def improvement(self) -> Dict[str, float]:
        """How far below each baseline the best cost sits."""
        return {
            name: cost - self.best_cost for name, cost in self.baseline_costs.items()
        }


def step_stride(config: SystemConfig) -> int:
    if config.power_mode is PowerMode.TOTAL:
        return STEP_PARAMS + LOGITS_PER_STEP
    return STEP_PARAMS


def param_count(config: SystemConfig) -> int:
    return step_stride(config) * config.horizon


def _softmax_columns(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=0))
    return shifted / shifted.sum(axis=0)


def pack_schedule(schedule: ControllerSchedule, config: SystemConfig) -> np.ndarray:
    """Flatten a schedule into the optimiser's parameter vector."""
    stride = step_stride(config)
    theta = np.zeros(param_count(config))
    for t in range(config.horizon):
        offset = t * stride
        for node, field, size in _FIELDS:
            value = getattr(getattr(schedule, node)[t], field)
            theta[offset : offset + size] = np.ravel(value)
            offset += size
    if config.power_mode is PowerMode.TOTAL:
        fractions = np.array([getattr(schedule, name) for name in _FRACTIONS]).T
        logits = np.log(np.maximum(fractions, _ZERO_FRACTION))
        logits -= logits.mean(axis=0)
        for t in range(config.horizon):
            start = t * stride + STEP_PARAMS
            theta[start : start + LOGITS_PER_STEP] = logits[t]
    return theta


def unpack_schedule(
    theta: np.ndarray, config: SystemConfig, frozen_receiver: bool = False
) -> ControllerSchedule:
    """Inverse of pack_schedule; total-mode logits become simplex fractions."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (param_count(config),):
        raise InvalidInputError(
            f"parameter vector has shape {theta.shape}, expected ({param_count(config)},)"
        )
    if not np.all(np.isfinite(theta)):
        bad = np.flatnonzero(~np.isfinite(theta)).tolist()
        raise InvalidInputError(f"non-finite parameter entries at {bad}")

    stride = step_stride(config)
    nodes: Dict[str, List[ControllerParams]] = {
        "sender1": [],
        "sender2": [],
        "receiver": [],
    }
    for t in range(config.horizon):
        offset = t * stride
        values: Dict[str, Dict[str, np.ndarray]] = {name: {} for name in nodes}
        for node, field, size in _FIELDS:
            chunk = theta[offset : offset + size].copy()
            if field == "a":
                chunk = chunk.reshape(CONTROLLER_DIM, CONTROLLER_DIM)
            values[node][field] = chunk
            offset += size
        for node in nodes:
            nodes[node].append(ControllerParams(**values[node]))

    if config.power_mode is PowerMode.TOTAL:
        logits = np.array(
            [
                theta[t * stride + STEP_PARAMS : (t + 1) * stride]
                for t in range(config.horizon)
            ]
        )
        fractions = _softmax_columns(logits)
        fractions[fractions < _ZERO_CUTOFF] = 0.0
        fractions /= fractions.sum(axis=0)
    else:
        fractions = np.full((config.horizon, LOGITS_PER_STEP), 1.0 / config.horizon)

    return ControllerSchedule(
        **nodes,
        rho1=fractions[:, 0].tolist(),
        rho2=fractions[:, 1].tolist(),
        rhor=fractions[:, 2].tolist(),
        frozen_receiver=frozen_receiver,
    )


def evaluate_cost(theta: np.ndarray, config: SystemConfig) -> float:
    """Terminal cost of the schedule encoded by theta."""
    schedule = unpack_schedule(theta, config)
    return run_deterministic(schedule, config).terminal_cost


def block_indices(
    t: int, config: SystemConfig, frozen_receiver: bool = False
) -> np.ndarray:
    """Entries of theta that belong to step t (its G_t and, in total mode, logits)."""
    start = t * step_stride(config)
    local = np.arange(step_stride(config))
    if frozen_receiver:
        receiver = (local >= RECEIVER_OFFSET) & (local < STEP_PARAMS)
        local = local[~receiver]
    return start + local


def frozen_mask(config: SystemConfig, frozen_receiver: bool) -> np.ndarray:
    mask = np.zeros(param_count(config), dtype=bool)
    if frozen_receiver:
        for t in range(config.horizon):
            start = t * step_stride(config)
            mask[start + RECEIVER_OFFSET : start + STEP_PARAMS] = True
    return mask


class _BudgetExhausted(Exception):
    pass


class _Objective:
    """Counts evaluations, enforces a budget and treats numerical failures as +inf."""

    def __init__(self, config: SystemConfig, limit: Optional[int] = None):
        self.config = config
        self.limit = limit
        self.evaluations = 0

    def remaining(self) -> Optional[int]:
        if self.limit is None:
            return None
        return self.limit - self.evaluations

    def __call__(self, theta: np.ndarray) -> float:
        if self.limit is not None and self.evaluations >= self.limit:
            raise _BudgetExhausted()
        self.evaluations += 1
        try:
            cost = evaluate_cost(theta, self.config)
        except (ConsistencyError, InvalidInputError, linalg.LinAlgError):
            return np.inf
        return cost if np.isfinite(cost) else np.inf


def _initial_simplex(x0: np.ndarray, box: float, step: float) -> np.ndarray:
    simplex = np.tile(x0, (x0.size + 1, 1))
    for i in range(x0.size):
        delta = step if x0[i] + step <= box else -step
        simplex[i + 1, i] += delta
    return simplex


def _sign_flips(
    theta: np.ndarray, t: int, config: SystemConfig, frozen_receiver: bool
) -> List[np.ndarray]:
    """Copies of theta with one node's update negated at step t.

    Negating (a, b, c) negates that node's next state exactly. The gain
    normalisation makes the cost flat on either side of such a flip, so local
    search inside the block cannot cross it.
    """
    start = t * step_stride(config)
    flips = []
    for node, local in _NODE_SLICES.items():
        if node == "receiver" and frozen_receiver:
            continue
        flipped = theta.copy()
        flipped[start + local.start : start + local.stop] *= -1.0
        flips.append(flipped)
    return flips


def _try_sign_flips(
    theta: np.ndarray,
    best: float,
    t: int,
    config: SystemConfig,
    objective: _Objective,
    frozen_receiver: bool,
) -> Tuple[np.ndarray, float, bool]:
    """Keep the cheapest single-node flip at step t; flags an exhausted budget."""
    try:
        for flipped in _sign_flips(theta, t, config, frozen_receiver):
            value = objective(flipped)
            if value < best:
                theta, best = flipped, value
    except _BudgetExhausted:
        return theta, best, True
    return theta, best, False


def _minimize_block(
    cost: Callable[[np.ndarray], float],
    x0: np.ndarray,
    box: float,
    method: str,
    budget: int,
    simplex_step: float,
) -> None:
    bounds = optimize.Bounds(-box, box)
    if method == "nelder-mead":
        optimize.minimize(
            cost,
            x0,
            method="Nelder-Mead",
            bounds=bounds,
            options={
                "maxfev": budget,
                "initial_simplex": _initial_simplex(x0, box, simplex_step),
                "adaptive": True,
                "xatol": 1e-10,
                "fatol": 1e-14,
            },
        )
    elif method == "fd-gradient":
        optimize.minimize(
            cost,
            x0,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxfun": budget, "finite_diff_rel_step": 1e-6},
        )
    else:
        raise ValueError(f"unknown inner method {method!r}")


def _sweep(
    theta0: np.ndarray,
    config: SystemConfig,
    objective: _Objective,
    sweeps: int,
    inner_budget: int,
    frozen_receiver: bool,
    method: str,
    simplex_step: float,
    verbose: bool,
) -> Tuple[np.ndarray, float, List[float]]:
    theta = np.array(theta0, dtype=float)
    best = objective(theta)
    trace = [best]
    if inner_budget <= 0:
        return theta, best, trace

    for sweep in range(sweeps):
        for t in reversed(range(config.horizon)):
            idx = block_indices(t, config, frozen_receiver)
            theta, best, exhausted = _try_sign_flips(
                theta, best, t, config, objective, frozen_receiver
            )
            if exhausted:
                trace.append(best)
                return theta, best, trace
            incumbent = {"cost": best, "x": theta[idx].copy()}
            block_limit = objective.evaluations + inner_budget
            if objective.limit is not None:
                block_limit = min(block_limit, objective.limit)

            def block_cost(z: np.ndarray) -> float:
                if objective.evaluations >= block_limit:
                    raise _BudgetExhausted()
                trial = theta.copy()
                trial[idx] = np.clip(z, -config.param_box, config.param_box)
                value = objective(trial)
                if value < incumbent["cost"]:
                    incumbent["cost"] = value
                    incumbent["x"] = trial[idx].copy()
                return value

            try:
                _minimize_block(
                    block_cost,
                    theta[idx].copy(),
                    config.param_box,
                    method,
                    inner_budget,
                    simplex_step,
                )
            except _BudgetExhausted:
                pass

            if incumbent["cost"] < best:
                theta[idx] = incumbent["x"]
                best = incumbent["cost"]
            trace.append(best)
            if verbose:
                print(f"  sweep {sweep + 1}, step {t}: cost {best:.10g}")
            if objective.remaining() is not None and objective.remaining() <= 0:
                return theta, best, trace
    return theta, best, trace


def backward_sweep(
    theta0: np.ndarray,
    config: SystemConfig,
    sweeps: int = 1,
    inner_budget: int = 200,
    frozen_receiver: bool = False,
    method: str = "nelder-mead",
    simplex_step: float = 0.5,
    verbose: bool = False,
) -> OptimizationReport:
    """Block-coordinate descent over G_t from the last step back to the first.

    Each block first tries negating each node's update, then is minimised
    with every other step held fixed. A block result is accepted only if it
    lowers the total cost, so the trace never rises. Entries of theta0 outside
    the parameter box are clipped onto it.
    """
    start = time.perf_counter()
    theta0 = np.asarray(theta0, dtype=float)
    if not np.all(np.isfinite(theta0)):
        raise InvalidInputError("initial parameters must be finite")
    theta0 = np.clip(theta0, -config.param_box, config.param_box)
    objective = _Objective(config)
    theta, best, trace = _sweep(
        theta0,
        config,
        objective,
        sweeps,
        inner_budget,
        frozen_receiver,
        method,
        simplex_step,
        verbose,
    )
    return OptimizationReport(
        best_schedule=unpack_schedule(theta, config, frozen_receiver),
        best_theta=theta,
        best_cost=best,
        cost_trace=trace,
        restart_costs=[best],
        evaluations=objective.evaluations,
        wall_time_s=time.perf_counter() - start,
    )


def repetition_schedule(config: SystemConfig) -> ControllerSchedule:
    """No feedback: both senders keep re-sending the seeded message, the receiver idles."""
    return ControllerSchedule.uniform(
        config.horizon,
        ControllerParams.hold(),
        ControllerParams.hold(),
        ControllerParams.zeros(sender=False),
    )


def orthogonal_schedule(config: SystemConfig) -> ControllerSchedule:
    """No feedback: sender 2 flips its sign every step so the two messages separate."""
    return ControllerSchedule.uniform(
        config.horizon,
        ControllerParams.hold(),
        ControllerParams.hold(sign=-1.0),
        ControllerParams.zeros(sender=False),
    )


def passive_baseline(config: SystemConfig) -> ControllerSchedule:
    """The receiver relays its last output: ar = 0, cr = e1, so ur_{t+1} = [yr_t, 0, 0]."""
    if config.Pr <= 0:
        raise ScheduleValidationError(["Pr: a passive relay needs transmit power > 0"])
    relay = ControllerParams(
        a=np.zeros((CONTROLLER_DIM, CONTROLLER_DIM)), c=np.eye(CONTROLLER_DIM)[0]
    )
    return ControllerSchedule.uniform(
        config.horizon,
        ControllerParams.hold(),
        ControllerParams.hold(),
        relay,
        frozen_receiver=True,
    )


def analytic_baselines(config: SystemConfig) -> Dict[str, float]:
    """Closed-form costs of the trivial strategies."""
    v1, v2 = config.sigma_m1_sq, config.sigma_m2_sq
    horizon = config.horizon
    slot1, slot2 = config.P1 / horizon, config.P2 / horizon

    def conditioned(variance, power, total):
        return variance * (1.0 - power / total) if total > 0 else variance

    repeat_total = slot1 + slot2 + config.sigma_f_sq / horizon
    single_total = config.P1 + config.P2 + config.sigma_f_sq
    variant = config.cost_variant
    return {
        "zero_power": terminal_value(v1, v2, variant),
        "no_feedback_repetition": terminal_value(
            conditioned(v1, slot1, repeat_total),
            conditioned(v2, slot2, repeat_total),
            variant,
        ),
        "single_shot": terminal_value(
            conditioned(v1, config.P1, single_total),
            conditioned(v2, config.P2, single_total),
            variant,
        ),
    }


def reference_costs(config: SystemConfig) -> Dict[str, float]:
    """Evaluated costs of the reference schedules the optimisers start from."""
    costs = {
        "zero_power": analytic_baselines(config)["zero_power"],
        "repetition": run_deterministic(
            repetition_schedule(config), config
        ).terminal_cost,
        "orthogonal": run_deterministic(
            orthogonal_schedule(config), config
        ).terminal_cost,
    }
    if config.Pr > 0:
        costs["passive"] = run_deterministic(
            passive_baseline(config), config
        ).terminal_cost
    return costs


def feedback_free(schedule: ControllerSchedule) -> ControllerSchedule:
    """The same schedule with both senders ignoring their feedback (c = 0).

    Its cost does not depend on the feedback noise.
    """

    def muted(params: List[ControllerParams]) -> List[ControllerParams]:
        return [
            p.model_copy(update={"c": np.zeros(CONTROLLER_DIM)}, deep=True)
            for p in params
        ]

    return schedule.model_copy(
        update={"sender1": muted(schedule.sender1), "sender2": muted(schedule.sender2)}
    )


def _cost_or_inf(schedule: ControllerSchedule, config: SystemConfig) -> float:
    try:
        return run_deterministic(schedule, config).terminal_cost
    except (ConsistencyError, InvalidInputError, linalg.LinAlgError):
        return np.inf


def _warm_starts(
    config: SystemConfig,
    passive: bool,
    extra: Sequence[ControllerSchedule],
) -> List[ControllerSchedule]:
    """Starting schedules in restart order.

    A caller-supplied start is replaced by its feedback-free copy when that
    copy is cheaper here. In passive mode every start gets the relay receiver.
    """
    relay = passive_baseline(config) if passive else None
    chosen = []
    for schedule in extra:
        if relay is not None:
            schedule = schedule.model_copy(
                update={"receiver": relay.receiver, "frozen_receiver": True}
            )
        muted = feedback_free(schedule)
        if _cost_or_inf(muted, config) < _cost_or_inf(schedule, config):
            schedule = muted
        chosen.append(schedule)
    if relay is not None:
        return [*chosen, relay]
    starts = [*chosen, repetition_schedule(config), orthogonal_schedule(config)]
    if config.Pr > 0:
        passive_start = passive_baseline(config)
        passive_start.frozen_receiver = False
        starts.append(passive_start)
    return starts


def _run_restart(
    config: SystemConfig,
    theta0: np.ndarray,
    frozen: np.ndarray,
    seed: int,
    restart: int,
    budget: int,
    sweeps: int,
    population: int,
    elite_fraction: float,
    init_std: float,
    smoothing: float,
    cem_fraction: float,
    passive: bool,
    verbose: bool,
) -> Tuple[np.ndarray, float, List[float], int]:
    rng = np.random.default_rng([seed, restart])
    box = config.param_box
    cem_budget = max(1, int(budget * cem_fraction))
    objective = _Objective(config, limit=cem_budget)

    best_theta = np.clip(theta0, -box, box)
    best_cost = objective(best_theta)
    for t in reversed(range(config.horizon)):
        best_theta, best_cost, exhausted = _try_sign_flips(
            best_theta, best_cost, t, config, objective, passive
        )
        if exhausted:
            break
    trace = [best_cost]
    mean = best_theta.copy()
    std = np.where(frozen, 0.0, init_std)
    n_elite = max(2, int(round(population * elite_fraction)))

    while objective.remaining() >= population:
        samples = mean + std * rng.standard_normal((population, mean.size))
        samples = np.clip(samples, -box, box)
        costs = np.array([objective(sample) for sample in samples])
        order = np.argsort(costs, kind="stable")
        if costs[order[0]] < best_cost:
            best_cost = float(costs[order[0]])
            best_theta = samples[order[0]].copy()
        elites = samples[order[:n_elite]]
        mean = elites.mean(axis=0)
        std = smoothing * elites.std(axis=0) + (1.0 - smoothing) * std
        std[frozen] = 0.0
        trace.append(best_cost)
        if verbose:
            print(f"restart {restart}: cem cost {best_cost:.10g}")

    polish_budget = budget - objective.evaluations
    inner_budget = max(0, polish_budget // max(1, sweeps * config.horizon))
    polish = _Objective(config, limit=max(1, polish_budget))
    theta, cost, polish_trace = _sweep(
        best_theta,
        config,
        polish,
        sweeps,
        inner_budget,
        passive,
        "nelder-mead",
        0.5,
        verbose,
    )
    return theta, cost, trace + polish_trace, objective.evaluations + polish.evaluations


def joint_optimize(
    config: SystemConfig,
    restarts: int = 4,
    seed: int = 0,
    budget: int = 2000,
    sweeps: int = 1,
    passive: bool = False,
    warm_starts: Sequence[ControllerSchedule] = (),
    n_jobs: int = 1,
    population: int = 32,
    elite_fraction: float = 0.25,
    init_std: float = 1.0,
    smoothing: float = 0.7,
    cem_fraction: float = 0.75,
    verbose: bool = False,
) -> OptimizationReport:
    """Cross-entropy search per restart, each polished by a backward sweep.

    ``budget`` is the number of cost evaluations allowed per restart. Restart
    r starts from the r-th warm start (round robin) and draws from the
    substream (seed, r); the lowest cost wins, ties go to the lowest index.
    With ``passive`` the receiver stays the relay of passive_baseline.
    Caller-supplied warm starts come first, ahead of the built-in ones.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    start = time.perf_counter()

    starts = _warm_starts(config, passive, warm_starts)
    frozen = frozen_mask(config, passive)
    initial = [pack_schedule(schedule, config) for schedule in starts]
    results = Parallel(n_jobs=n_jobs)(
        delayed(_run_restart)(
            config,
            initial[r % len(initial)],
            frozen,
            seed,
            r,
            budget,
            sweeps,
            population,
            elite_fraction,
            init_std,
            smoothing,
            cem_fraction,
            passive,
            verbose,
        )
        for r in range(restarts)
    )

    winner = min(range(restarts), key=lambda r: (results[r][1], r))
    theta, cost, trace, _ = results[winner]
    return OptimizationReport(
        best_schedule=unpack_schedule(theta, config, frozen_receiver=passive),
        best_theta=theta,
        best_cost=cost,
        cost_trace=trace,
        restarts=restarts,
        restart_costs=[result[1] for result in results],
        evaluations=sum(result[3] for result in results),
        wall_time_s=time.perf_counter() - start,
        baseline_costs=reference_costs(config),
    )
