"""Tests for the covariance recursions, the receiver filter and the batch oracle."""

import numpy as np
import pytest

from mac_feedback.conftest import random_schedule
from mac_feedback.covariance import (
    _condition_on_output,
    assemble_p_transition,
    batch_mmse_cov,
    kalman_update,
    propagate_joint,
    run_deterministic,
    terminal_value,
)
from mac_feedback.model import (
    ConsistencyError,
    ControllerParams,
    ControllerSchedule,
    CostVariant,
    IndexMap,
    PowerMode,
    SystemConfig,
)
from mac_feedback.optimize import analytic_baselines, repetition_schedule


def _conjugate(params: ControllerParams, perm: np.ndarray) -> ControllerParams:
    P = np.eye(3)[perm]
    return ControllerParams(
        a=P @ params.a @ P.T,
        b=None if params.b is None else P @ params.b,
        c=P @ params.c,
    )


def test_zero_power_keeps_prior():
    """Nothing is transmitted, so the cost is the prior variance sum."""
    config = SystemConfig(
        horizon=3,
        sigma_f_sq=1.0,
        sigma_m1_sq=2.0,
        sigma_m2_sq=3.0,
        P1=0.0,
        P2=0.0,
        Pr=0.0,
    )
    schedule = random_schedule(np.random.default_rng(1), config)
    trajectory = run_deterministic(schedule, config)
    assert trajectory.terminal_cost == pytest.approx(5.0, abs=1e-12)
    assert np.all(trajectory.achieved_powers == 0.0)


def test_single_step_unit_case(unit_config):
    """yr = m1 + m2 + wf: each message keeps variance 2/3, cross term -1/3."""
    schedule = repetition_schedule(unit_config)
    trajectory = run_deterministic(schedule, unit_config)
    final = trajectory.conditional_covs[-1]
    assert final[IndexMap.M1, IndexMap.M1] == pytest.approx(2 / 3, abs=1e-10)
    assert final[IndexMap.M2, IndexMap.M2] == pytest.approx(2 / 3, abs=1e-10)
    assert final[IndexMap.M1, IndexMap.M2] == pytest.approx(-1 / 3, abs=1e-10)
    assert trajectory.terminal_cost == pytest.approx(4 / 3, abs=1e-10)
    assert analytic_baselines(unit_config)["single_shot"] == pytest.approx(4 / 3)


def test_repetition_matches_closed_form(repetition_config):
    trajectory = run_deterministic(
        repetition_schedule(repetition_config), repetition_config
    )
    assert trajectory.terminal_cost == pytest.approx(10 / 9, abs=1e-10)
    expected = analytic_baselines(repetition_config)["no_feedback_repetition"]
    assert trajectory.terminal_cost == pytest.approx(expected, abs=1e-10)


def test_sum_squared_variant(unit_config):
    config = unit_config.model_copy(
        update={"cost_variant": CostVariant.SUM_SQUARED_VARIANCE}
    )
    trajectory = run_deterministic(repetition_schedule(config), config)
    assert trajectory.terminal_cost == pytest.approx(8 / 9, abs=1e-10)
    assert trajectory.terminal_mse == pytest.approx(4 / 3, abs=1e-10)
    assert terminal_value(1.0, 2.0, CostVariant.SUM_VARIANCE) == 3.0


@pytest.mark.parametrize("seed", range(100))
def test_recursion_matches_batch_oracle(seed):
    """The Kalman recursion and one-shot conditioning agree on the message block."""
    rng = np.random.default_rng(seed)
    config = SystemConfig(
        horizon=int(rng.integers(1, 9)),
        sigma_f_sq=float(rng.uniform(0.2, 2.0)),
        sigma_b1_sq=float(rng.uniform(0.05, 2.0)),
        sigma_b2_sq=float(rng.uniform(0.05, 2.0)),
        sigma_m1_sq=float(rng.uniform(0.5, 2.0)),
        sigma_m2_sq=float(rng.uniform(0.5, 2.0)),
        P1=float(rng.uniform(0.5, 4.0)),
        P2=float(rng.uniform(0.5, 4.0)),
        Pr=float(rng.uniform(0.0, 4.0)),
        power_mode=PowerMode.TOTAL if seed % 2 else PowerMode.INSTANTANEOUS,
    )
    schedule = random_schedule(rng, config, scale=0.4)
    trajectory = run_deterministic(schedule, config)
    recursive = trajectory.conditional_covs[-1][:2, :2]
    batch = batch_mmse_cov(schedule, config)
    np.testing.assert_allclose(recursive, batch, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_covariance_invariants(seed):
    """Symmetric PSD covariances, shrinking message variances, clean yr row."""
    rng = np.random.default_rng(100 + seed)
    config = SystemConfig(horizon=6, sigma_f_sq=0.7, sigma_b1_sq=0.3, Pr=2.0)
    trajectory = run_deterministic(random_schedule(rng, config), config)

    for sigma in trajectory.joint_covs + trajectory.conditional_covs:
        np.testing.assert_allclose(sigma, sigma.T, atol=1e-12)
        eigvals = np.linalg.eigvalsh(sigma)
        assert eigvals[0] >= -1e-9 * max(np.trace(sigma), 1.0)

    variances = trajectory.message_variances
    assert np.all(np.diff(variances, axis=0) <= 1e-12)

    for sigma in trajectory.conditional_covs:
        assert np.abs(sigma[IndexMap.YR]).max() <= 1e-9
        assert np.abs(sigma[:, IndexMap.YR]).max() <= 1e-9

    for step in trajectory.kalman_steps:
        assert step.innovation_var >= config.sigma_f_sq - 1e-9

    for (p1, p2, pr), (a1, a2, ar) in zip(
        trajectory.requested_powers, trajectory.achieved_powers
    ):
        assert a1 <= p1 + 1e-9 and a2 <= p2 + 1e-9 and ar <= pr + 1e-9


def test_gauge_invariance_under_permutation():
    """Conjugating a node's controller by a permutation leaves the cost unchanged.

    Sender permutations must fix coordinate 0, which carries the seeded message.
    """
    config = SystemConfig(horizon=4, sigma_f_sq=1.0, sigma_b1_sq=0.5, Pr=2.0)
    schedule = random_schedule(np.random.default_rng(7), config)
    base = run_deterministic(schedule, config).terminal_cost

    permuted = schedule.model_copy(deep=True)
    permuted.receiver = [_conjugate(p, np.array([2, 0, 1])) for p in schedule.receiver]
    permuted.sender1 = [_conjugate(p, np.array([0, 2, 1])) for p in schedule.sender1]
    cost = run_deterministic(permuted, config).terminal_cost
    assert cost == pytest.approx(base, abs=1e-9)


def test_orthogonal_columns_reach_unit_cost(no_feedback_config):
    """Sign alternation makes the two messages separable: cost 2 * (1 - 0.5/1) = 1."""
    config = no_feedback_config
    schedule = ControllerSchedule.uniform(
        2,
        ControllerParams.hold(),
        ControllerParams.hold(sign=-1.0),
        ControllerParams.zeros(sender=False),
    )
    assert run_deterministic(schedule, config).terminal_cost == pytest.approx(
        1.0, abs=1e-10
    )


def test_non_positive_innovation_is_a_consistency_error():
    with pytest.raises(ConsistencyError):
        _condition_on_output(np.zeros((12, 12)))


def test_propagate_joint_identity_and_pure_noise():
    config = SystemConfig(horizon=1, sigma_f_sq=0.7)
    rng = np.random.default_rng(0)
    root = rng.standard_normal((11, 11))
    sigma = root @ root.T
    sigma = 0.5 * (sigma + sigma.T)
    np.testing.assert_allclose(
        propagate_joint(sigma, np.eye(11), np.zeros((11, 3)), config), sigma
    )

    J = np.zeros((11, 3))
    J[2, IndexMap.NOISE_F] = 1.0
    expected = np.zeros((11, 11))
    expected[2, 2] = 0.7
    np.testing.assert_allclose(
        propagate_joint(sigma, np.zeros((11, 11)), J, config), expected
    )


def _silent_schedule() -> ControllerSchedule:
    return ControllerSchedule.uniform(
        2,
        ControllerParams.zeros(),
        ControllerParams.zeros(),
        ControllerParams.zeros(sender=False),
    )


def test_p_transition_dead_system():
    """Zero parameters and zero gains leave only the message identities and wf."""
    zeros = np.zeros(3)
    A, J = assemble_p_transition(_silent_schedule(), 0, *([zeros] * 5))
    expected_A = np.zeros((12, 12))
    expected_A[IndexMap.M1, IndexMap.M1] = expected_A[IndexMap.M2, IndexMap.M2] = 1.0
    expected_J = np.zeros((12, 3))
    expected_J[IndexMap.YR, IndexMap.NOISE_F] = 1.0
    np.testing.assert_array_equal(A, expected_A)
    np.testing.assert_array_equal(J, expected_J)


def test_p_transition_single_feedback_path():
    """cr = e1: the last output reaches ur only through entry (8, 11)."""
    schedule = _silent_schedule()
    schedule.receiver[0].c = np.eye(3)[0]
    zeros = np.zeros(3)
    A, _ = assemble_p_transition(schedule, 0, *([zeros] * 5))
    assert A[IndexMap.UR.start, IndexMap.YR] == 1.0
    assert np.count_nonzero(A[IndexMap.UR]) == 1


def _noiseless_p_step(schedule, t, d1, d2, dr, d1n, d2n, p, w):
    """u' from the primitive equations, ur' fed by yr_t, then the next output."""
    s1, s2, r = schedule.sender1[t], schedule.sender2[t], schedule.receiver[t]
    m1, m2 = p[0], p[1]
    u1, u2, ur, yr = p[2:5], p[5:8], p[8:11], p[11]
    wb1, wb2, wf_next = w
    fed_back = float(dr @ ur)
    nxt = np.zeros(12)
    nxt[0], nxt[1] = m1, m2
    nxt[2:5] = s1.a @ u1 + s1.b * m1 + s1.c * (fed_back + wb1)
    nxt[5:8] = s2.a @ u2 + s2.b * m2 + s2.c * (fed_back + wb2)
    nxt[8:11] = r.a @ ur + r.c * yr
    nxt[11] = d1n @ nxt[2:5] + d2n @ nxt[5:8] + wf_next
    return nxt


@pytest.mark.parametrize("seed", range(5))
def test_p_transition_matches_unit_responses(seed):
    rng = np.random.default_rng(40 + seed)
    config = SystemConfig(horizon=3, sigma_f_sq=1.0)
    schedule = random_schedule(rng, config, scale=1.0)
    gains = rng.standard_normal((5, 3))
    A, J = assemble_p_transition(schedule, 1, *gains)

    for j in range(12):
        response = _noiseless_p_step(schedule, 1, *gains, np.eye(12)[j], np.zeros(3))
        np.testing.assert_allclose(A[:, j], response, rtol=0, atol=1e-12)
    for j in range(3):
        response = _noiseless_p_step(schedule, 1, *gains, np.zeros(12), np.eye(3)[j])
        np.testing.assert_allclose(J[:, j], response, rtol=0, atol=1e-12)


def test_kalman_update_with_nothing_to_learn():
    """A zero prior observed through pure wf conditions back to zero."""
    config = SystemConfig(horizon=2, sigma_f_sq=0.7)
    J = np.zeros((12, 3))
    J[IndexMap.YR, IndexMap.NOISE_F] = 1.0
    updated, step = kalman_update(np.zeros((12, 12)), np.zeros((12, 12)), J, config)

    predicted = np.zeros((12, 12))
    predicted[IndexMap.YR, IndexMap.YR] = 0.7
    np.testing.assert_allclose(step.predicted_cov, predicted)
    np.testing.assert_allclose(step.gain, np.eye(12)[IndexMap.YR])
    assert step.innovation_var == pytest.approx(0.7)
    np.testing.assert_allclose(updated, np.zeros((12, 12)), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_conditioning_shrinks_covariance(seed):
    """Sigma_{t+1|t+1} <= Sigma_{t+1|t} in Loewner order at every step."""
    rng = np.random.default_rng(60 + seed)
    config = SystemConfig(horizon=5, sigma_f_sq=0.8, sigma_b2_sq=0.2, Pr=1.5)
    trajectory = run_deterministic(random_schedule(rng, config), config)
    for updated, step in zip(trajectory.conditional_covs, trajectory.kalman_steps):
        shrink = np.linalg.eigvalsh(step.predicted_cov - updated)
        assert shrink[0] >= -1e-9


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
