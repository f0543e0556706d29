import math

import numpy as np
import pytest

from resnetsde.activations import SWISH, TANH
from resnetsde.moments import (ExplosiveConstants, MomentState, RegimeError,
                               closed_form_explosive,
                               closed_form_nonexplosive, explosion_time,
                               fit_explosive_constants, integrate_moments,
                               moment_rhs)

SWISH_D1 = SWISH.d1_at_zero
SWISH_D2 = SWISH.d2_at_zero


def single(m, q):
    return MomentState.create([m], [q])


def pair(m, q, lam):
    return MomentState.create(m, q, [[q[0], lam], [lam, q[1]]])


# ---------------------------------------------------------------------------
# right-hand side
# ---------------------------------------------------------------------------

def test_rhs_mean_frozen_without_second_derivative():
    rhs = moment_rhs(single(0.3, 2.0), phi1=1.0, phi2=0.0, sigma_w2=1.0,
                     sigma_b2=1.0)
    assert rhs.coord_mean[0] == 0.0


def test_rhs_plugin_value():
    rhs = moment_rhs(single(0.0, 0.0), phi1=1.0, phi2=0.0, sigma_w2=1.0,
                     sigma_b2=1.0)
    assert rhs.sq_norm[0] == pytest.approx(1.0)


def test_rhs_diagonal_consistency(rng):
    for _ in range(20):
        m = rng.standard_normal(2)
        q = m ** 2 + rng.uniform(0.1, 2.0, size=2)
        lam = rng.uniform(-0.5, 0.5)
        s = pair(m, q, lam)
        rhs = moment_rhs(s, phi1=0.7, phi2=0.4, sigma_w2=1.3, sigma_b2=0.2)
        assert np.allclose(np.diag(rhs.inner), rhs.sq_norm, rtol=1e-14)


# ---------------------------------------------------------------------------
# integrator vs closed forms
# ---------------------------------------------------------------------------

def test_zero_coefficients_constant_trajectory():
    traj = integrate_moments(single(0.5, 1.5), 1.0, 1e-2, phi1=0.0, phi2=0.0,
                             sigma_w2=1.0, sigma_b2=0.0)
    assert traj.final.coord_mean[0] == 0.5
    assert traj.final.sq_norm[0] == 1.5
    assert not traj.exploded


def test_tanh_closed_form_value():
    traj = integrate_moments(single(0.0, 1.0), 1.0, 1e-3, phi1=1.0, phi2=0.0,
                             sigma_w2=1.0, sigma_b2=1.0)
    expected = 1.0 + 2.0 * (math.e - 1.0)
    assert traj.final.sq_norm[0] == pytest.approx(expected, abs=1e-8)
    closed = closed_form_nonexplosive(single(0.0, 1.0), 1.0, 1.0, 1.0, 1.0)
    assert closed.sq_norm[0] == pytest.approx(expected, rel=1e-14)


def test_nonexplosive_closed_form_basics():
    start = pair(np.array([0.0, 1.0]), np.array([0.0, 1.0]), 0.0)
    at_zero = closed_form_nonexplosive(start, 0.0, 1.0, 1.0, 1.0)
    assert np.allclose(at_zero.sq_norm, start.sq_norm)
    assert np.allclose(at_zero.inner, start.inner)
    out = closed_form_nonexplosive(start, 1.0, 1.0, 1.0, 1.0)
    assert out.sq_norm[0] == pytest.approx(math.e - 1.0)
    assert out.inner[0, 1] == pytest.approx(math.e - 1.0)
    assert np.allclose(out.coord_mean, start.coord_mean)


def test_sigma_w_zero_degenerate_limit():
    closed = closed_form_nonexplosive(single(0.2, 0.7), 2.0, 1.5, 0.0, 0.8)
    assert closed.sq_norm[0] == pytest.approx(0.7 + 1.5 ** 2 * 0.8 * 2.0)
    traj = integrate_moments(single(0.2, 0.7), 2.0, 1e-3, 1.5, 0.0, 0.0, 0.8)
    assert traj.final.sq_norm[0] == pytest.approx(closed.sq_norm[0], abs=1e-10)


def test_rk4_tracks_nonexplosive_closed_form_on_grid():
    start = pair(np.array([0.4, -0.2]), np.array([1.0, 0.5]), 0.3)
    traj = integrate_moments(start, 1.0, 1e-3, 1.0, 0.0, 1.0, 1.0)
    worst = 0.0
    for t, s in zip(traj.times, traj.states):
        ref = closed_form_nonexplosive(start, t, 1.0, 1.0, 1.0)
        worst = max(worst,
                    np.abs(s.sq_norm - ref.sq_norm).max(),
                    np.abs(s.inner - ref.inner).max(),
                    np.abs(s.coord_mean - ref.coord_mean).max())
    assert worst <= 1e-8


# ---------------------------------------------------------------------------
# explosive regime
# ---------------------------------------------------------------------------

def test_fitted_constants_reproduce_initial_condition(rng):
    for _ in range(30):
        m0 = rng.uniform(-2.0, 2.0)
        q0 = m0 ** 2 + rng.uniform(0.0, 3.0)
        sw2 = rng.uniform(0.3, 2.0)
        sb2 = rng.uniform(0.0, 2.0)
        consts = fit_explosive_constants(m0, q0, SWISH_D1, SWISH_D2, sw2, sb2)
        m_back, q_back = closed_form_explosive(consts, 0.0)
        assert m_back == pytest.approx(m0, abs=1e-10)
        assert q_back == pytest.approx(q0, abs=1e-10)


def test_constant_formula_centered_case():
    consts = fit_explosive_constants(0.0, 0.0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    expected = SWISH_D2 ** 2 * 1.0 - 1.0 * SWISH_D1 ** 4
    assert consts.c_value == pytest.approx(expected, rel=1e-14)


def test_canonical_swish_case_is_hyperbolic_with_4ln2_blowup():
    consts = fit_explosive_constants(1.0, 1.0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    assert consts.c_value == pytest.approx(-0.0625)
    assert consts.regime == "hyperbolic"
    assert explosion_time(consts) == pytest.approx(4.0 * math.log(2.0), rel=1e-12)


def test_oscillatory_case_constants_and_formula():
    # copied input z = -1 gives C > 0
    consts = fit_explosive_constants(-1.0, 1.0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    assert consts.c_value > 0
    assert consts.c2 is not None
    tstar = explosion_time(consts)
    sw = 1.0
    assert tstar == pytest.approx(math.pi / (sw * math.sqrt(consts.c_value))
                                  - 2.0 * consts.c2, rel=1e-12)
    # reconstructing C from c1 gives the defining relation back
    c_from_c1 = (-SWISH_D1 ** 4 * sw ** 2
                 + SWISH_D2 ** 2 * (1.0 + sw ** 2 * consts.c1))
    assert c_from_c1 == pytest.approx(consts.c_value, rel=1e-12)


@pytest.mark.parametrize("m0,q0", [(1.0, 1.0), (-1.0, 1.0), (0.0, 0.5)])
def test_explosion_time_matches_rk4_blowup(m0, q0):
    consts = fit_explosive_constants(m0, q0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    tstar = explosion_time(consts)
    assert tstar is not None
    traj = integrate_moments(single(m0, q0), 1.2 * tstar, 1e-4, SWISH_D1,
                             SWISH_D2, 1.0, 1.0)
    assert traj.exploded or traj.final.sq_norm[0] > 1e6
    crossing = None
    for t, s in zip(traj.times, traj.states):
        if s.sq_norm[0] > 1e6:
            crossing = t
            break
    if crossing is None:
        crossing = traj.last_valid_time
    assert abs(crossing - tstar) <= 1e-2


def test_closed_form_tracks_rk4_in_explosive_regime():
    consts = fit_explosive_constants(1.0, 1.0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    tstar = explosion_time(consts)
    horizon = 0.9 * tstar
    traj = integrate_moments(single(1.0, 1.0), horizon, 1e-3, SWISH_D1,
                             SWISH_D2, 1.0, 1.0)
    worst = 0.0
    for t, s in zip(traj.times, traj.states):
        m_ref, q_ref = closed_form_explosive(consts, t)
        worst = max(worst, abs(s.coord_mean[0] - m_ref), abs(s.sq_norm[0] - q_ref))
    assert worst <= 1e-6


def test_closed_form_rejects_past_blowup():
    consts = fit_explosive_constants(1.0, 1.0, SWISH_D1, SWISH_D2, 1.0, 1.0)
    with pytest.raises(RegimeError):
        closed_form_explosive(consts, explosion_time(consts) + 0.1)


def test_tanh_has_no_explosion_machinery():
    with pytest.raises(RegimeError):
        fit_explosive_constants(0.0, 1.0, TANH.d1_at_zero, TANH.d2_at_zero,
                                1.0, 1.0)


def test_non_divergent_branch_reports_none():
    # start far below the unstable fixed point: G0 < -sqrt(-C)
    consts = ExplosiveConstants(-0.25, -1.0, 0.0, None, 0.5, 0.5, 1.0, 1.0)
    assert explosion_time(consts) is None


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------

def test_rk4_explosion_flag_and_last_time():
    traj = integrate_moments(single(1.0, 1.0), 5.0, 1e-3, SWISH_D1, SWISH_D2,
                             1.0, 1.0)
    assert traj.exploded
    assert traj.last_valid_time < 5.0
    assert np.isfinite(traj.final.sq_norm[0])


def test_cauchy_schwarz_preserved_along_trajectories(rng):
    for phi1, phi2, horizon in [(1.0, 0.0, 1.0), (SWISH_D1, SWISH_D2, 0.5)]:
        for _ in range(10):
            z = rng.uniform(-1.0, 1.0, size=2)
            start = pair(z, z ** 2, z[0] * z[1])
            traj = integrate_moments(start, horizon, 1e-3, phi1, phi2, 1.0, 1.0)
            for s in traj.states:
                assert s.cauchy_schwarz_slack() >= -1e-10


def test_inner_ode_reproduces_sq_norm_on_diagonal():
    start = pair(np.array([0.5, 0.5]), np.array([1.2, 1.2]), 1.2)
    traj = integrate_moments(start, 1.0, 1e-3, 1.0, 0.0, 1.0, 1.0)
    final = traj.final
    assert final.inner[0, 1] == pytest.approx(final.sq_norm[0], rel=1e-12)


def test_simulation_summaries_converge_to_ode_like_root_width():
    # RMS deviation of the simulated squared norm from its deterministic
    # limit shrinks like 1/sqrt(width)
    from resnetsde.forward import copy_inputs
    from resnetsde.paramdist import FullIID
    from resnetsde.sde import SdeSimConfig, simulate_fc_iid_joint

    limit = closed_form_nonexplosive(single(1.0, 1.0), 1.0, 1.0, 1.0, 1.0)
    q_limit = limit.sq_norm[0]
    widths = [100, 400, 1600]
    rms = []
    for i, width in enumerate(widths):
        cfg = SdeSimConfig(150, FullIID(width, 1.0, 1.0), TANH)
        samples, _ = simulate_fc_iid_joint(cfg, copy_inputs([1.0], width),
                                           600, 700 + i)
        q_final = (samples[:, 0, :] ** 2).mean(axis=1)
        rms.append(np.sqrt(np.mean((q_final - q_limit) ** 2)))
    slope = np.polyfit(np.log(widths), np.log(rms), 1)[0]
    assert abs(slope + 0.5) <= 0.2
