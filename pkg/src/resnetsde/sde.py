"""Euler-Maruyama simulation of the depth-limit dynamics.

Four simulators cover all limiting equations used by the experiments:

* ``simulate_fc_driven``    -- the state equation written against the actual
  weight/bias increments, valid for every parameter scheme.  One step is
      x <- x + phi1 * (dW psi(x) + db) + 0.5 * phi2 * diag(cov) * dt
  with cov the block cross-covariance of the scheme at psi(x).
* ``simulate_fc_iid_joint`` -- the equivalent joint-over-inputs form for the
  fully i.i.d. scheme: an N x N covariance over inputs, assembled from the
  current summary statistics, applied i.i.d. across dimensions.
* ``simulate_cnn_iid_joint``-- the convolutional counterpart over
  (input, position) pairs, with patch norms and patch inner products.
* ``simulate_jacobian_sde`` -- the matrix equation for the input-output
  Jacobian g (and optionally its inverse), driven by the same weight noise.

The drift/diffusion evaluators (``fc_limit_coefficients``,
``cnn_limit_coefficients``) expose the instantaneous mean and covariance that
the one-step Monte Carlo oracle tests compare against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .activations import Activation, IDENTITY, require_smooth
from .forward import extract_all_patches, STATE_CAP
from .paramdist import (CnnFullIID, FullIID, ParamScheme, block_cross_cov,
                        mean_map, psd_factor_batched, sample_increments)
from .rng import substream

__all__ = [
    "SdeSimConfig", "JacobianPath", "euler_step", "fc_limit_coefficients",
    "cnn_limit_coefficients", "simulate_fc_driven", "simulate_fc_iid_joint",
    "simulate_cnn_iid_joint", "jacobian_recursion_step",
    "jacobian_forward_recursion", "simulate_jacobian_sde",
]


@dataclass(frozen=True)
class SdeSimConfig:
    """Time grid and model for one SDE run (grid 0, dt, ..., horizon)."""

    steps: int
    scheme: ParamScheme
    phi: Activation
    psi: Activation = IDENTITY
    horizon: float = 1.0
    retain_path: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps


def euler_step(x: np.ndarray, drift: np.ndarray, diffusion_factor: np.ndarray,
               dt: float, noise: np.ndarray) -> np.ndarray:
    """x + drift * dt + factor @ noise * sqrt(dt)."""
    return x + drift * dt + diffusion_factor @ noise * np.sqrt(dt)


def fc_limit_coefficients(scheme: ParamScheme, phi: Activation, psi: Activation,
                          x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Instantaneous mean and covariance of the state increment at ``x``.

    mean = phi1 (bias_drift + weight_drift psi(x)) + phi2/2 diag(cov)
    cov  = phi1^2 Cov[eps_w psi(x) + eps_b]
    """
    u = psi(np.asarray(x, dtype=float))
    cov = block_cross_cov(scheme, u, u)
    phi1, phi2 = phi.d1_at_zero, phi.d2_at_zero
    mu = phi1 * mean_map(scheme, u) + 0.5 * phi2 * np.diag(cov)
    return mu, phi1 ** 2 * cov


def cnn_limit_coefficients(scheme: ParamScheme, phi: Activation, psi: Activation,
                           image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stacked per-position means and the (P*D) x (P*D) covariance of a CNN state."""
    k = scheme.filter_size
    pad = float(psi(np.array(0.0)))
    patches = extract_all_patches(psi(np.asarray(image, dtype=float)), k, pad)
    n_pos = patches.shape[0]
    d = scheme.state_dim
    phi1, phi2 = phi.d1_at_zero, phi.d2_at_zero
    mu = np.empty(n_pos * d)
    cov = np.empty((n_pos * d, n_pos * d))
    for p in range(n_pos):
        for p2 in range(n_pos):
            block = block_cross_cov(scheme, patches[p], patches[p2])
            cov[p * d:(p + 1) * d, p2 * d:(p2 + 1) * d] = block
            if p == p2:
                mu[p * d:(p + 1) * d] = (phi1 * mean_map(scheme, patches[p])
                                         + 0.5 * phi2 * np.diag(block))
    return mu, phi1 ** 2 * cov


def _flag_and_park(x: np.ndarray, exploded: np.ndarray) -> None:
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(x).all(axis=tuple(range(1, x.ndim)))
        bad |= np.abs(x).max(axis=tuple(range(1, x.ndim)), initial=0.0) > STATE_CAP
    exploded |= bad
    if exploded.any():
        x[exploded] = 0.0


def simulate_fc_driven(cfg: SdeSimConfig, x0: np.ndarray, n_draws: int,
                       seed: int, method: str = "auto"
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Terminal samples of the increment-driven state equation.

    All inputs of the batch see the same (dW, db) at every step.  The
    projected method (FullIID only) samples the exact joint law of
    (dW psi(x^(1)), ..., dW psi(x^(N)), db) without materializing dW.
    Returns (samples (draws, N, D), exploded mask); blown-up draws are NaN.
    """
    require_smooth(cfg.phi, "simulate_fc_driven")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if method == "auto":
        method = "projected" if isinstance(cfg.scheme, FullIID) else "explicit"
    phi1, phi2 = cfg.phi.d1_at_zero, cfg.phi.d2_at_zero
    dt = cfg.dt
    if method == "projected":
        scheme = cfg.scheme
        if not isinstance(scheme, FullIID):
            raise ValueError("projected sampling requires the FullIID scheme")
        n, d = x0.shape
        x = np.broadcast_to(x0, (n_draws, n, d)).astype(float).copy()
        exploded = np.zeros(n_draws, dtype=bool)
        rng = substream(seed, 0)
        w_scale2 = scheme.sigma_w ** 2 * dt / d
        b_scale = scheme.sigma_b * np.sqrt(dt)
        for _ in range(cfg.steps):
            u = cfg.psi(x)
            gram = w_scale2 * np.matmul(u, u.transpose(0, 2, 1))
            factor = psd_factor_batched(gram)
            pre = np.matmul(factor, rng.standard_normal((n_draws, n, d)))
            pre += b_scale * rng.standard_normal((n_draws, 1, d))
            if phi2 != 0.0:
                var = (scheme.sigma_b ** 2
                       + scheme.sigma_w ** 2 * (u * u).sum(axis=2) / d)
                x += 0.5 * phi2 * dt * var[..., None]
            x += phi1 * pre
            _flag_and_park(x, exploded)
        x[exploded] = np.nan
        return x, exploded
    out = np.empty((n_draws, *x0.shape))
    exploded = np.zeros(n_draws, dtype=bool)
    for b in range(n_draws):
        rng = substream(seed, b)
        x = x0.copy()
        for _ in range(cfg.steps):
            dw, db = sample_increments(cfg.scheme, dt, rng)
            u = cfg.psi(x)
            pre = u @ dw.T + db
            if phi2 != 0.0:
                drift = np.stack([np.diag(block_cross_cov(cfg.scheme, ui, ui))
                                  for ui in u])
                x = x + 0.5 * phi2 * dt * drift
            x = x + phi1 * pre
            if not np.all(np.isfinite(x)) or np.abs(x).max() > STATE_CAP:
                exploded[b] = True
                break
        out[b] = np.nan if exploded[b] else x
    return out, exploded


def simulate_fc_iid_joint(cfg: SdeSimConfig, x0: np.ndarray, n_draws: int,
                          seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Joint-over-inputs form of the fully i.i.d. limit.

    Each step rebuilds the N x N covariance sigma_b^2 + sigma_w^2 <x_i, x_j>/D
    from the current states, factorizes it, and applies it identically and
    independently across the D dimensions.  Requires psi = identity.
    """
    scheme = cfg.scheme
    if not isinstance(scheme, FullIID):
        raise ValueError("simulate_fc_iid_joint requires the FullIID scheme")
    if cfg.psi.name != "identity":
        raise ValueError("the joint-over-inputs form assumes psi = identity")
    require_smooth(cfg.phi, "simulate_fc_iid_joint")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    phi1, phi2 = cfg.phi.d1_at_zero, cfg.phi.d2_at_zero
    dt = cfg.dt
    sqdt = np.sqrt(dt)
    sw2, sb2 = scheme.sigma_w ** 2, scheme.sigma_b ** 2
    x = np.broadcast_to(x0, (n_draws, n, d)).astype(float).copy()
    exploded = np.zeros(n_draws, dtype=bool)
    rng = substream(seed, 0)
    path = [x.copy()] if cfg.retain_path else None
    for _ in range(cfg.steps):
        cov = sb2 + sw2 / d * np.matmul(x, x.transpose(0, 2, 1))
        factor = psd_factor_batched(cov)
        noise = rng.standard_normal((n_draws, n, d))
        incr = np.matmul(factor, noise)
        if phi2 != 0.0:
            var = np.einsum("bnn->bn", cov)
            x += 0.5 * phi2 * dt * var[..., None]
        x += phi1 * sqdt * incr
        _flag_and_park(x, exploded)
        if cfg.retain_path:
            path.append(x.copy())
    x[exploded] = np.nan
    if cfg.retain_path:
        # (steps+1, draws, N, D) grid of states; blown-up draws are NaN at
        # the terminal slot only (they are parked at zero along the way)
        stacked = np.stack(path)
        stacked[-1] = x
        return stacked, exploded
    return x, exploded


def simulate_cnn_iid_joint(cfg: SdeSimConfig, images: np.ndarray, n_draws: int,
                           seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Convolutional joint limit over (input, position) pairs.

    The covariance across (i, p), (j, p') is
    sigma_b^2 + sigma_w^2 <psi(patch_ip), psi(patch_jp')>/D, factorized per
    step and applied i.i.d. across channels.  Returns
    (samples (draws, N, U, V, D), exploded).
    """
    scheme = cfg.scheme
    if not isinstance(scheme, CnnFullIID):
        raise ValueError("simulate_cnn_iid_joint requires the CnnFullIID scheme")
    require_smooth(cfg.phi, "simulate_cnn_iid_joint")
    images = np.asarray(images, dtype=float)
    if images.ndim == 3:
        images = images[None]
    n, height, width, d = images.shape
    n_pos = height * width
    k = scheme.filter_size
    pad = float(cfg.psi(np.array(0.0)))
    phi1, phi2 = cfg.phi.d1_at_zero, cfg.phi.d2_at_zero
    dt = cfg.dt
    sqdt = np.sqrt(dt)
    sw2, sb2 = scheme.sigma_w ** 2, scheme.sigma_b ** 2
    x = np.broadcast_to(images, (n_draws, n, height, width, d)).astype(float).copy()
    exploded = np.zeros(n_draws, dtype=bool)
    rng = substream(seed, 0)
    for _ in range(cfg.steps):
        patches = extract_all_patches(cfg.psi(x), k, pad)      # (B, N, P, F)
        flat = patches.reshape(n_draws, n * n_pos, -1)
        cov = sb2 + sw2 / d * np.matmul(flat, flat.transpose(0, 2, 1))
        factor = psd_factor_batched(cov)
        noise = rng.standard_normal((n_draws, n * n_pos, d))
        incr = np.matmul(factor, noise)
        if phi2 != 0.0:
            var = np.einsum("bpp->bp", cov)
            x += (0.5 * phi2 * dt * var[..., None]).reshape(x.shape)
        x += (phi1 * sqdt * incr).reshape(x.shape)
        _flag_and_park(x, exploded)
    x[exploded] = np.nan
    return x, exploded


# ---------------------------------------------------------------------------
# Jacobian dynamics
# ---------------------------------------------------------------------------

@dataclass
class JacobianPath:
    """Terminal Jacobians over draws; inverse carried along when requested."""

    jac: np.ndarray                       # (draws, D, D)
    inv: Optional[np.ndarray] = None      # (draws, D, D)
    state: Optional[np.ndarray] = None    # (draws, D)
    exploded: Optional[np.ndarray] = None


def jacobian_recursion_step(g: np.ndarray, x: np.ndarray, dw: np.ndarray,
                            db: np.ndarray, phi: Activation) -> np.ndarray:
    """Exact layer update of the input-output Jacobian of the residual net."""
    gain = phi.d1(dw @ x + db)
    return g + (gain[:, None] * dw) @ g


def jacobian_forward_recursion(scheme: FullIID, phi: Activation, x0: np.ndarray,
                               depth: int, rng: np.random.Generator,
                               horizon: float = 1.0
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Discrete (finite-depth) joint recursion of state and Jacobian.

    Reference implementation used to validate the matrix SDE below; requires
    psi = identity, which the Jacobian recursion assumes.
    """
    d = scheme.state_dim
    dt = horizon / depth
    x = np.asarray(x0, dtype=float).copy()
    g = np.eye(d)
    for _ in range(depth):
        dw, db = sample_increments(scheme, dt, rng)
        g = jacobian_recursion_step(g, x, dw, db, phi)
        x = x + phi(dw @ x + db)
    return g, x


def simulate_jacobian_sde(width: int, steps: int, phi: Activation,
                          sigma_w: float, sigma_b: float, n_draws: int,
                          seed: int, x0: Optional[np.ndarray] = None,
                          with_inverse: bool = False, horizon: float = 1.0,
                          inverse_correction: str = "realized") -> JacobianPath:
    """Euler scheme for the Jacobian matrix equation under the i.i.d. scheme.

        dg     = (phi1 dW + phi2 d[quadratic cross term]) g
        dg^-1  = g^-1 (-phi1 dW - phi2 d[...] + phi1^2 d[W]_t)

    g and g^-1 are driven by the same weight draws.  For the i.i.d. scheme
    the entrywise covariances contract the bracket term of g to
    (sigma_w^2 / D) * ones @ x^T dt, which vanishes when phi''(0) = 0; the
    state rides along via its own increment-driven equation so the
    phi''-correction stays consistent.

    ``inverse_correction`` selects the discretization of the inverse's
    bracket term: "realized" uses the step's actual product (the forward
    increment squared), whose pairing with the forward step cancels to
    third order and keeps the product g g^-1 near the identity at O(dt);
    "compensator" uses the deterministic limit increment
    phi1^2 (sigma_w^2 / D) I dt, which carries an O(sqrt(dt)) product
    defect.  Both discretize the same equation.
    """
    require_smooth(phi, "simulate_jacobian_sde")
    if inverse_correction not in ("realized", "compensator"):
        raise ValueError("inverse_correction must be 'realized' or 'compensator'")
    phi1, phi2 = phi.d1_at_zero, phi.d2_at_zero
    d = width
    dt = horizon / steps
    sq = np.sqrt(dt)
    w_scale = sigma_w / np.sqrt(d)
    x = np.zeros((n_draws, d)) if x0 is None else \
        np.broadcast_to(np.asarray(x0, dtype=float), (n_draws, d)).copy()
    g = np.broadcast_to(np.eye(d), (n_draws, d, d)).copy()
    g_inv = np.broadcast_to(np.eye(d), (n_draws, d, d)).copy() if with_inverse else None
    exploded = np.zeros(n_draws, dtype=bool)
    rng = substream(seed, 0)
    qv_correction = phi1 ** 2 * sigma_w ** 2 / d * dt
    for _ in range(steps):
        dw = rng.standard_normal((n_draws, d, d)) * (w_scale * sq)
        db = rng.standard_normal((n_draws, d)) * (sigma_b * sq)
        fwd = phi1 * dw
        if phi2 != 0.0:
            # bracket term for i.i.d. weights: (sigma_w^2 / D) ones x^T dt
            bracket = (phi2 * sigma_w ** 2 / d * dt) * x[:, None, :]
            fwd = fwd + bracket
        if with_inverse:
            if inverse_correction == "realized":
                back = -fwd + np.matmul(fwd, fwd)
                g_inv = g_inv + np.matmul(g_inv, back)
            else:
                g_inv = g_inv + np.matmul(g_inv, -fwd) + qv_correction * g_inv
        g = g + np.matmul(fwd, g)
        pre = np.einsum("bij,bj->bi", dw, x) + db
        if phi2 != 0.0:
            var = sigma_b ** 2 + sigma_w ** 2 * (x * x).sum(axis=1) / d
            x = x + 0.5 * phi2 * dt * var[:, None]
        x = x + phi1 * pre
        with np.errstate(invalid="ignore", over="ignore"):
            bad = ~np.isfinite(g).all(axis=(1, 2))
            bad |= np.abs(g).max(axis=(1, 2), initial=0.0) > STATE_CAP
            bad |= ~np.isfinite(x).all(axis=1)
        exploded |= bad
        if exploded.any():
            g[exploded] = np.eye(d)
            x[exploded] = 0.0
            if with_inverse:
                g_inv[exploded] = np.eye(d)
    if exploded.any():
        g[exploded] = np.nan
        x[exploded] = np.nan
        if with_inverse:
            g_inv[exploded] = np.nan
    return JacobianPath(g, g_inv, x, exploded)
