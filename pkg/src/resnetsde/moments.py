"""Deterministic wide-limit dynamics of the layer summary statistics.

For the fully i.i.d. parametrization the per-layer summaries

    coord_mean[i]  = (1/D) sum_d x_d            (per input)
    sq_norm[i]     = ||x||^2 / D                (per input)
    inner[i, j]    = <x^(i), x^(j)> / D         (per input pair)

become deterministic as the width grows and solve a closed ODE system.  This
module provides the right-hand side, a classical fixed-step RK4 integrator,
exact solutions for both the non-explosive (phi''(0) = 0) and explosive
(phi''(0) != 0) regimes, and the deterministic blow-up time of the latter.

The explosive solution is organized around the scalar

    G(t) = sigma_w * (phi2 * coord_mean(t) + phi1^2),

which satisfies the Riccati equation G' = sigma_w/2 * (C + G^2) with

    C = phi2^2 * (sigma_b^2 + sigma_w^2 * q0) - G(0)^2.

For C > 0 this is the trigonometric (tan/sec^2) solution with every initial
condition blowing up; for C <= 0 the same solution continues through
hyperbolic branches and blows up only from above the largest fixed point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MomentState", "MomentTrajectory", "ExplosiveConstants", "RegimeError",
    "moment_rhs", "integrate_moments", "closed_form_nonexplosive",
    "fit_explosive_constants", "closed_form_explosive", "explosion_time",
]

EXPLOSION_CAP = 1e12


class RegimeError(ValueError):
    """Raised when an operation is asked outside its analytic regime."""


@dataclass(frozen=True)
class MomentState:
    """Summary triple at one time: per-input means, squared norms, inner products."""

    coord_mean: np.ndarray  # (N,)
    sq_norm: np.ndarray     # (N,)
    inner: np.ndarray       # (N, N), diagonal equals sq_norm

    @staticmethod
    def create(coord_mean, sq_norm, inner=None) -> "MomentState":
        m = np.atleast_1d(np.asarray(coord_mean, dtype=float))
        q = np.atleast_1d(np.asarray(sq_norm, dtype=float))
        if m.shape != q.shape:
            raise ValueError("coord_mean and sq_norm must have the same length")
        if inner is None:
            if m.size != 1:
                raise ValueError("inner is required for more than one input")
            lam = q.reshape(1, 1).copy()
        else:
            lam = np.asarray(inner, dtype=float).copy()
            if lam.shape != (m.size, m.size):
                raise ValueError("inner must be N x N")
            np.fill_diagonal(lam, q)
        return MomentState(m, q, lam)

    @staticmethod
    def from_states(x: np.ndarray) -> "MomentState":
        """Summaries of a stacked (N, D) state matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        d = x.shape[1]
        return MomentState(x.mean(axis=1), (x * x).sum(axis=1) / d, x @ x.T / d)

    @property
    def n_inputs(self) -> int:
        return self.coord_mean.size

    def cauchy_schwarz_slack(self) -> float:
        """min over pairs of sqrt(q_i q_j) - |inner_ij|; negative = violated."""
        bound = np.sqrt(np.outer(self.sq_norm, self.sq_norm))
        return float((bound - np.abs(self.inner)).min())


@dataclass(frozen=True)
class MomentTrajectory:
    times: np.ndarray          # (n_steps + 1,)
    states: list               # MomentState per grid point
    exploded: bool
    last_valid_time: float

    @property
    def final(self) -> MomentState:
        return self.states[-1]


def moment_rhs(state: MomentState, phi1: float, phi2: float,
               sigma_w2: float, sigma_b2: float) -> MomentState:
    """Time derivative of the summary triple."""
    u = sigma_b2 + sigma_w2 * state.sq_norm          # (N,)
    dm = 0.5 * phi2 * u
    dq = (phi2 * state.coord_mean + phi1 ** 2) * u
    cross = np.outer(u, state.coord_mean)            # u_i * m_j
    dlam = 0.5 * phi2 * (cross + cross.T) + phi1 ** 2 * (sigma_b2 + sigma_w2 * state.inner)
    return MomentState(dm, dq, dlam)


def _axpy(state: MomentState, k: MomentState, h: float) -> MomentState:
    return MomentState(state.coord_mean + h * k.coord_mean,
                       state.sq_norm + h * k.sq_norm,
                       state.inner + h * k.inner)


def _combine(state, k1, k2, k3, k4, h):
    return MomentState(
        state.coord_mean + h / 6.0 * (k1.coord_mean + 2 * k2.coord_mean
                                      + 2 * k3.coord_mean + k4.coord_mean),
        state.sq_norm + h / 6.0 * (k1.sq_norm + 2 * k2.sq_norm
                                   + 2 * k3.sq_norm + k4.sq_norm),
        state.inner + h / 6.0 * (k1.inner + 2 * k2.inner
                                 + 2 * k3.inner + k4.inner))


def integrate_moments(initial: MomentState, horizon: float, step: float,
                      phi1: float, phi2: float, sigma_w2: float,
                      sigma_b2: float) -> MomentTrajectory:
    """Classical 4th-order Runge-Kutta on a fixed grid.

    Integration aborts with the explosion flag set once any squared norm
    exceeds 1e12; the trajectory then ends at the last finite grid point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n_steps = max(1, int(round(horizon / step)))
    h = horizon / n_steps
    times = [0.0]
    states = [initial]
    s = initial
    exploded = False
    for k in range(n_steps):
        k1 = moment_rhs(s, phi1, phi2, sigma_w2, sigma_b2)
        k2 = moment_rhs(_axpy(s, k1, 0.5 * h), phi1, phi2, sigma_w2, sigma_b2)
        k3 = moment_rhs(_axpy(s, k2, 0.5 * h), phi1, phi2, sigma_w2, sigma_b2)
        k4 = moment_rhs(_axpy(s, k3, h), phi1, phi2, sigma_w2, sigma_b2)
        s = _combine(s, k1, k2, k3, k4, h)
        if not np.all(np.isfinite(s.sq_norm)) or s.sq_norm.max() > EXPLOSION_CAP:
            exploded = True
            break
        times.append((k + 1) * h)
        states.append(s)
    return MomentTrajectory(np.array(times), states, exploded, times[-1])


def closed_form_nonexplosive(initial: MomentState, horizon: float, phi1: float,
                             sigma_w2: float, sigma_b2: float) -> MomentState:
    """Exact solution when phi''(0) = 0: means frozen, (q, inner) grow affinely.

    sigma_w = 0 degenerates to linear growth q(T) = q0 + phi1^2 sigma_b^2 T
    (the continuity limit; the generic formula divides by sigma_w^2).
    """
    if sigma_w2 < 0 or sigma_b2 < 0:
        raise ValueError("variances must be non-negative")
    if sigma_w2 == 0.0:
        bump = phi1 ** 2 * sigma_b2 * horizon
        return MomentState(initial.coord_mean.copy(), initial.sq_norm + bump,
                           initial.inner + bump)
    growth = math.expm1(phi1 ** 2 * sigma_w2 * horizon)
    ratio = sigma_b2 / sigma_w2
    q = initial.sq_norm + (initial.sq_norm + ratio) * growth
    lam = initial.inner + (initial.inner + ratio) * growth
    return MomentState(initial.coord_mean.copy(), q, lam)


@dataclass(frozen=True)
class ExplosiveConstants:
    """Fitted constants of the phi''(0) != 0 closed form for one input.

    ``c1``/``c2`` follow the trigonometric parametrization (c2 is None for
    C <= 0, where the solution lives on a hyperbolic branch and the shift
    is carried by ``g0`` directly).  Evaluating the closed form at T = 0
    reproduces (coord_mean, sq_norm) to machine precision by construction.
    """

    c_value: float   # C
    g0: float        # sigma_w * (phi2 * m0 + phi1^2)
    c1: float
    c2: float | None
    phi1: float
    phi2: float
    sigma_w2: float
    sigma_b2: float

    @property
    def regime(self) -> str:
        if self.c_value > 0:
            return "oscillatory"
        return "hyperbolic" if self.c_value < 0 else "degenerate"


def fit_explosive_constants(coord_mean0: float, sq_norm0: float, phi1: float,
                            phi2: float, sigma_w2: float,
                            sigma_b2: float) -> ExplosiveConstants:
    """Determine the closed-form constants from the initial summaries.

    The sec^2 = 1 + tan^2 identity pins

        C = phi2^2 (sigma_b^2 + sigma_w^2 q0) - sigma_w^2 (phi2 m0 + phi1^2)^2

    deterministically; the phase shift follows from the principal arctan
    branch (C > 0) or its hyperbolic continuation (C <= 0).
    """
    if phi2 == 0.0:
        raise RegimeError("explosive constants require phi''(0) != 0")
    if sigma_w2 <= 0:
        raise RegimeError("explosive closed form requires sigma_w > 0")
    sw = math.sqrt(sigma_w2)
    g0 = sw * (phi2 * coord_mean0 + phi1 ** 2)
    c_value = phi2 ** 2 * (sigma_b2 + sigma_w2 * sq_norm0) - g0 ** 2
    c1 = (c_value + phi1 ** 4 * sigma_w2 - phi2 ** 2 * sigma_b2) / (phi2 ** 2 * sigma_w2)
    c2 = None
    if c_value > 0:
        c2 = math.atan(g0 / math.sqrt(c_value)) / (sw * math.sqrt(c_value))
    return ExplosiveConstants(c_value, g0, c1, c2, phi1, phi2, sigma_w2, sigma_b2)


def _riccati_scalar(consts: ExplosiveConstants, t: float) -> float:
    """G(t) solving G' = sw/2 (C + G^2), G(0) = g0, on its maximal interval."""
    c, g0 = consts.c_value, consts.g0
    sw = math.sqrt(consts.sigma_w2)
    if c > 0:
        root = math.sqrt(c)
        return root * math.tan(0.5 * sw * root * t + math.atan(g0 / root))
    if c == 0.0:
        if g0 == 0.0:
            return 0.0
        return 1.0 / (1.0 / g0 - 0.5 * sw * t)
    s = math.sqrt(-c)
    if abs(g0) < s:
        return s * math.tanh(math.atanh(g0 / s) - 0.5 * sw * s * t)
    if abs(g0) == s:
        return g0
    # |g0| > s: coth branch; blows up forward in time only when g0 > s
    shift = math.atanh(s / g0)
    return s / math.tanh(shift - 0.5 * sw * s * t)


def closed_form_explosive(consts: ExplosiveConstants, horizon: float
                          ) -> tuple[float, float]:
    """(coord_mean, sq_norm) at the given time, valid up to the blow-up."""
    tstar = explosion_time(consts)
    if tstar is not None and horizon >= tstar:
        raise RegimeError(f"requested time {horizon} is past the blow-up {tstar}")
    g = _riccati_scalar(consts, horizon)
    phi1, phi2 = consts.phi1, consts.phi2
    sw2 = consts.sigma_w2
    m = (-phi1 ** 2 + g / math.sqrt(sw2)) / phi2
    q = (consts.c_value + g ** 2 - phi2 ** 2 * consts.sigma_b2) / (phi2 ** 2 * sw2)
    return m, q


def explosion_time(consts: ExplosiveConstants) -> float | None:
    """Deterministic blow-up time, or None when the solution never diverges.

    For C > 0 this solves sw sqrt(C) (T + 2 c2) / 2 = pi / 2, i.e. every
    initial condition explodes; for C <= 0 only trajectories started above
    the largest fixed point of the Riccati flow do.
    """
    c, g0 = consts.c_value, consts.g0
    sw = math.sqrt(consts.sigma_w2)
    if c > 0:
        root = math.sqrt(c)
        return math.pi / (sw * root) - 2.0 * consts.c2
    if c == 0.0:
        return 2.0 / (sw * g0) if g0 > 0 else None
    s = math.sqrt(-c)
    if g0 > s:
        return 2.0 * math.atanh(s / g0) / (sw * s)
    return None
