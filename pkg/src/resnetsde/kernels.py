"""Analytic limit kernels and the empirical tangent kernel of a finite net.

All analytic objects are affine in the input inner product and depend on the
hyperparameters only through

    log_gain C = phi1^2 * sigma_w^2 * T,   gain E = exp(C),
    ratio      = sigma_b^2 / sigma_w^2,

plus the adaptation variances for the completed (input/output augmented)
model.  Families:

    weak            K(inner0)  = (inner0 + ratio) (E - 1)
    ntk             K_b = ratio (E - 1)
                    K_W = inner0 C E + ratio (C E - (E - 1))
    completed_weak  sigma_y2 (sigma_z2 E <z, z'> + ratio (E - 1))
    completed_ntk   sigma_y2 (sigma_z2 (C + 2) E <z, z'> + ratio (C E + E - 1))

The empirical tangent kernel is computed by reverse accumulation specialized
to the residual recursion: layer Jacobians have the closed form
I + diag(phi'(h)) dW, so the backward pass only needs the stored states and
pre-activations; the weight draws are regenerated from their seed substream
instead of being stored.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .activations import Activation, require_smooth
from .moments import MomentState
from .rng import substream

__all__ = [
    "KernelSpec", "BivariateGaussian", "transition_density", "weak_kernel",
    "ntk_kernel", "completed_weak_kernel", "completed_ntk_kernel",
    "kernel_gram", "empirical_ntk", "empirical_ntk_samples", "ntk_gradients",
]

FAMILIES = ("weak", "ntk", "completed_weak", "completed_ntk")


@dataclass(frozen=True)
class KernelSpec:
    """Hyperparameters of one analytic kernel family."""

    family: str
    phi1: float
    sigma_w2: float
    sigma_b2: float
    horizon: float = 1.0
    sigma_z2: Optional[float] = None
    sigma_y2: Optional[float] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.sigma_w2 <= 0:
            raise ValueError("sigma_w2 must be positive")
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")
        if self.family.startswith("completed") and (
                self.sigma_z2 is None or self.sigma_y2 is None):
            raise ValueError("completed kernels need sigma_z2 and sigma_y2")

    @property
    def log_gain(self) -> float:
        return self.phi1 ** 2 * self.sigma_w2 * self.horizon

    @property
    def gain(self) -> float:
        return float(np.exp(self.log_gain))

    @property
    def ratio(self) -> float:
        return self.sigma_b2 / self.sigma_w2


@dataclass(frozen=True)
class BivariateGaussian:
    mean: np.ndarray  # (2,)
    cov: np.ndarray   # (2, 2)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n,
                                       method="eigh")


def transition_density(x0_pair, start: MomentState, end: MomentState
                       ) -> BivariateGaussian:
    """Gaussian law of one coordinate of two coupled outputs given the inputs.

    Means shift by the change of the coordinate means; the covariance is the
    accumulated centered second-moment change (variance via q - m^2, cross
    term via inner - m m').  ``start`` and ``end`` must describe the same
    two inputs at times 0 and T.
    """
    x0_pair = np.asarray(x0_pair, dtype=float).reshape(2)
    if start.n_inputs != 2 or end.n_inputs != 2:
        raise ValueError("transition_density expects two-input moment states")
    mean = x0_pair + end.coord_mean - start.coord_mean
    var0 = start.sq_norm - start.coord_mean ** 2
    var1 = end.sq_norm - end.coord_mean ** 2
    cross0 = start.inner[0, 1] - start.coord_mean[0] * start.coord_mean[1]
    cross1 = end.inner[0, 1] - end.coord_mean[0] * end.coord_mean[1]
    diag = var1 - var0
    off = cross1 - cross0
    if np.any(diag < -1e-12):
        raise ValueError(f"inconsistent moments: negative variance {diag}")
    diag = np.clip(diag, 0.0, None)
    cov = np.array([[diag[0], off], [off, diag[1]]])
    return BivariateGaussian(mean, cov)


def weak_kernel(inner0: float, spec: KernelSpec) -> float:
    """Output-layer-training kernel as a function of the initial inner product."""
    e = spec.gain
    return float((inner0 + spec.ratio) * (e - 1.0))


def ntk_kernel(inner0: float, spec: KernelSpec) -> tuple[float, float, float]:
    """Tangent kernel split into weight and bias parts (phi''(0) = 0 regime)."""
    c, e = spec.log_gain, spec.gain
    k_b = spec.ratio * (e - 1.0)
    k_w = inner0 * c * e + spec.ratio * (c * e - (e - 1.0))
    return float(k_w), float(k_b), float(k_w + k_b)


def completed_weak_kernel(z, z_prime, spec: KernelSpec) -> float:
    """Prior kernel of the input/output-augmented model on raw inputs."""
    e = spec.gain
    inner = float(np.dot(np.ravel(z), np.ravel(z_prime)))
    return float(spec.sigma_y2 * (spec.sigma_z2 * e * inner
                                  + spec.ratio * (e - 1.0)))


def completed_ntk_kernel(z, z_prime, spec: KernelSpec) -> float:
    """Tangent kernel of the augmented model with every layer trained."""
    c, e = spec.log_gain, spec.gain
    inner = float(np.dot(np.ravel(z), np.ravel(z_prime)))
    return float(spec.sigma_y2 * (spec.sigma_z2 * (c + 2.0) * e * inner
                                  + spec.ratio * (c * e + e - 1.0)))


def _affine_coefficients(spec: KernelSpec) -> tuple[float, float]:
    """(slope, offset) so that k = slope * <z, z'> + offset for the family."""
    c, e = spec.log_gain, spec.gain
    if spec.family == "weak":
        return e - 1.0, spec.ratio * (e - 1.0)
    if spec.family == "ntk":
        return c * e, spec.ratio * c * e
    if spec.family == "completed_weak":
        return spec.sigma_y2 * spec.sigma_z2 * e, \
            spec.sigma_y2 * spec.ratio * (e - 1.0)
    return spec.sigma_y2 * spec.sigma_z2 * (c + 2.0) * e, \
        spec.sigma_y2 * spec.ratio * (c * e + e - 1.0)


def kernel_gram(spec: KernelSpec, z_left: np.ndarray,
                z_right: Optional[np.ndarray] = None) -> np.ndarray:
    """Kernel matrix over rows of z_left (and z_right when given).

    For the non-completed families the rows are interpreted as the initial
    inner products' carriers, i.e. k = slope * <z, z'> + offset in all cases.
    """
    z_left = np.atleast_2d(np.asarray(z_left, dtype=float))
    z_right = z_left if z_right is None else np.atleast_2d(
        np.asarray(z_right, dtype=float))
    slope, offset = _affine_coefficients(spec)
    return slope * (z_left @ z_right.T) + offset


# ---------------------------------------------------------------------------
# empirical tangent kernel of a finite network
# ---------------------------------------------------------------------------

def _forward_states(phi: Activation, x0: np.ndarray, eps_w, eps_b,
                    w_scale: float, b_scale: float):
    """Run the residual recursion; return stacked states and pre-activations."""
    depth = len(eps_w)
    xs = [np.asarray(x0, dtype=float).copy()]
    pres = []
    for t in range(depth):
        pre = (eps_w[t] * w_scale) @ xs[-1] + eps_b[t] * b_scale
        pres.append(pre)
        xs.append(xs[-1] + phi(pre))
    return xs, pres


def ntk_gradients(phi: Activation, sigma_w: float, sigma_b: float,
                  x0_pair: np.ndarray, eps_w: np.ndarray, eps_b: np.ndarray,
                  horizon: float = 1.0) -> dict:
    """Full output gradients w.r.t. the standardized parameter draws.

    Explicit-parameter variant for small networks: ``eps_w`` is (L, D, D) and
    ``eps_b`` is (L, D); the output is the first coordinate of the final
    state.  Returns per-input gradients, outputs, and the kernel split.
    Intended for finite-difference validation and hand-sized checks.
    """
    x0_pair = np.atleast_2d(np.asarray(x0_pair, dtype=float))
    depth, d = eps_b.shape
    w_scale = sigma_w * np.sqrt(horizon / depth) / np.sqrt(d)
    b_scale = sigma_b * np.sqrt(horizon / depth)
    grads_w = []
    grads_b = []
    outputs = []
    for x0 in x0_pair:
        xs, pres = _forward_states(phi, x0, eps_w, eps_b, w_scale, b_scale)
        u = np.zeros(d)
        u[0] = 1.0
        gw = np.zeros_like(eps_w)
        gb = np.zeros_like(eps_b)
        for t in range(depth - 1, -1, -1):
            a = u * phi.d1(pres[t])
            gw[t] = np.outer(a, xs[t]) * w_scale
            gb[t] = a * b_scale
            u = u + (eps_w[t] * w_scale).T @ a
        grads_w.append(gw)
        grads_b.append(gb)
        outputs.append(xs[-1][0])
    k_w = float(np.sum(grads_w[0] * grads_w[-1]))
    k_b = float(np.sum(grads_b[0] * grads_b[-1]))
    return {"grad_w": grads_w, "grad_b": grads_b, "outputs": np.array(outputs),
            "k_w": k_w, "k_b": k_b, "k_total": k_w + k_b}


def empirical_ntk(phi: Activation, sigma_w: float, sigma_b: float, width: int,
                  depth: int, x0_pair: np.ndarray, seed: int, draw: int = 0,
                  horizon: float = 1.0) -> tuple[float, float]:
    """(K_W, K_b) between two inputs for one network draw.

    Streaming version: the forward pass stores only states and
    pre-activations; the backward pass regenerates each layer's weight draw
    from its (seed, draw, layer) substream.  Memory is O(L D), the per-layer
    replay is O(D^2).
    """
    require_smooth(phi, "empirical_ntk")
    if abs(phi.d2_at_zero) > 1e-14:
        warnings.warn("phi''(0) != 0: the tangent-kernel limit formulas do "
                      "not apply to this activation", stacklevel=2)
    x0_pair = np.atleast_2d(np.asarray(x0_pair, dtype=float))
    n, d = x0_pair.shape
    if n != 2 or d != width:
        raise ValueError("x0_pair must be (2, width)")
    dt = horizon / depth
    w_scale = sigma_w * np.sqrt(dt) / np.sqrt(d)
    b_scale = sigma_b * np.sqrt(dt)

    xs = np.empty((depth + 1, d, 2))
    pres = np.empty((depth, d, 2))
    xs[0] = x0_pair.T
    for t in range(depth):
        layer_rng = substream(seed, draw, t)
        dw = layer_rng.standard_normal((d, d)) * w_scale
        db = layer_rng.standard_normal(d) * b_scale
        pres[t] = dw @ xs[t] + db[:, None]
        xs[t + 1] = xs[t] + phi(pres[t])

    u = np.zeros((d, 2))
    u[0] = 1.0
    k_w = 0.0
    k_b = 0.0
    w_fac = sigma_w ** 2 * dt / d
    b_fac = sigma_b ** 2 * dt
    for t in range(depth - 1, -1, -1):
        a = u * phi.d1(pres[t])
        pair = float(a[:, 0] @ a[:, 1])
        k_w += w_fac * float(xs[t][:, 0] @ xs[t][:, 1]) * pair
        k_b += b_fac * pair
        layer_rng = substream(seed, draw, t)
        dw = layer_rng.standard_normal((d, d)) * w_scale
        u = u + dw.T @ a
    return k_w, k_b


def empirical_ntk_samples(phi: Activation, sigma_w: float, sigma_b: float,
                          width: int, depth: int, x0_pair: np.ndarray,
                          n_draws: int, seed: int,
                          horizon: float = 1.0) -> np.ndarray:
    """Stacked (K_W, K_b) over independent draws, shape (draws, 2)."""
    out = np.empty((n_draws, 2))
    for b in range(n_draws):
        out[b] = empirical_ntk(phi, sigma_w, sigma_b, width, depth, x0_pair,
                               seed, draw=b, horizon=horizon)
    return out
