"""Discrete forward recursions at finite depth and width.

Residual update (fully connected):   x <- x + phi(dW @ psi(x) + db)
Residual update (convolutional):     x_p <- x_p + phi(dW @ psi(patch_p) + db)
Plain feedforward baseline:          x <- phi(A @ x + a)

All inputs in a batch share the same parameter draws at every layer, so a
batch traces one function sample jointly over its inputs.  Two execution
paths are provided for the i.i.d. schemes:

* ``explicit``  -- materializes every weight matrix; works for all schemes
  and is the path used when draws must be retained or replayed.
* ``projected`` -- exploits that a step touches the weights only through
  ``dW @ psi(x^(1)), ..., dW @ psi(x^(N))``, whose exact joint law given the
  states is Gaussian with an N x N Gram covariance per row.  Sampling that
  law directly costs O(N D) noise per layer instead of O(D^2) and is
  distribution-identical to the explicit path (equality in law is covered
  by the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .activations import Activation, IDENTITY, require_smooth
from .paramdist import (CnnFullIID, CnnTensorGaussian, FullIID, ParamScheme,
                        psd_factor_batched, sample_increments)
from .rng import substream

__all__ = [
    "NetConfig", "LayerPath", "fc_step", "fc_forward", "fc_terminal_samples",
    "extract_patch", "extract_all_patches", "cnn_step", "cnn_forward",
    "cnn_terminal_samples", "input_adapt", "output_adapt", "cnn_input_adapt",
    "cnn_output_adapt", "feedforward_baseline", "copy_inputs",
]

STATE_CAP = 1e12


@dataclass(frozen=True)
class NetConfig:
    """Architecture and horizon; the layer step is horizon / depth."""

    width: int
    depth: int
    scheme: ParamScheme
    phi: Activation
    psi: Activation = IDENTITY
    horizon: float = 1.0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.scheme.state_dim != self.width:
            raise ValueError("scheme dimension does not match width")

    @property
    def dt(self) -> float:
        return self.horizon / self.depth


@dataclass
class LayerPath:
    """States on the layer grid for one parameter draw.

    ``states`` has shape (depth+1, N, ...); ``params`` optionally retains the
    per-layer increments.  ``explosion_layer`` is the first layer at which a
    state became non-finite (or exceeded the norm cap), or None.
    """

    states: np.ndarray
    explosion_layer: Optional[int] = None
    params: Optional[list] = None

    @property
    def exploded(self) -> bool:
        return self.explosion_layer is not None

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _blown_up(x: np.ndarray) -> bool:
    return not np.all(np.isfinite(x)) or np.abs(x).max(initial=0.0) > STATE_CAP


def fc_step(x: np.ndarray, dw: np.ndarray, db: np.ndarray,
            phi: Activation, psi: Activation = IDENTITY) -> np.ndarray:
    """One residual update; ``x`` is (D,) or (N, D) with shared increments."""
    x = np.asarray(x, dtype=float)
    pre = psi(x) @ dw.T + db
    return x + phi(pre)


def fc_forward(cfg: NetConfig, x0: np.ndarray, rng: np.random.Generator,
               retain_path: bool = False, retain_params: bool = False) -> LayerPath:
    """Run the residual recursion for one joint parameter draw."""
    require_smooth(cfg.phi, "fc_forward")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    states = [x.copy()] if retain_path else None
    params = [] if retain_params else None
    explosion_layer = None
    for layer in range(cfg.depth):
        dw, db = sample_increments(cfg.scheme, cfg.dt, rng)
        x = fc_step(x, dw, db, cfg.phi, cfg.psi)
        if retain_params:
            params.append((dw, db))
        if _blown_up(x):
            explosion_layer = layer + 1
            break
        if retain_path:
            states.append(x.copy())
    stacked = np.stack(states) if retain_path else x[None]
    return LayerPath(stacked, explosion_layer, params)


def _projected_residual_samples(cfg: NetConfig, x0: np.ndarray, n_draws: int,
                                seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized i.i.d.-scheme sampler, exact in law, (draws, N, D) output."""
    scheme = cfg.scheme
    n, d = x0.shape
    dt = cfg.dt
    w_scale2 = scheme.sigma_w ** 2 * dt / d
    b_scale = scheme.sigma_b * np.sqrt(dt)
    x = np.broadcast_to(x0, (n_draws, n, d)).astype(float).copy()
    exploded = np.zeros(n_draws, dtype=bool)
    rng = substream(seed, 0)
    for _ in range(cfg.depth):
        u = cfg.psi(x)
        gram = w_scale2 * np.matmul(u, u.transpose(0, 2, 1))
        factor = psd_factor_batched(gram)
        noise = rng.standard_normal((n_draws, n, d))
        pre = np.matmul(factor, noise)
        pre += b_scale * rng.standard_normal((n_draws, 1, d))
        x += cfg.phi(pre)
        with np.errstate(invalid="ignore"):
            bad = ~np.isfinite(x).all(axis=(1, 2))
            bad |= np.abs(x).max(axis=(1, 2)) > STATE_CAP
        exploded |= bad
        if exploded.any():
            # park blown-up draws at zero so the batched linalg stays finite;
            # they are reported as NaN below
            x[exploded] = 0.0
    x[exploded] = np.nan
    return x, exploded


def fc_terminal_samples(cfg: NetConfig, x0: np.ndarray, n_draws: int, seed: int,
                        method: str = "auto") -> tuple[np.ndarray, np.ndarray]:
    """Terminal states over independent parameter draws.

    Returns (samples, exploded): ``samples`` is (draws, N, D) with exploded
    draws set to NaN, ``exploded`` the boolean mask.  ``method`` picks the
    execution path: "projected" (FullIID only), "explicit", or "auto".
    """
    require_smooth(cfg.phi, "fc_terminal_samples")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if method == "auto":
        method = "projected" if isinstance(cfg.scheme, FullIID) else "explicit"
    if method == "projected":
        if not isinstance(cfg.scheme, FullIID):
            raise ValueError("projected sampling requires the FullIID scheme")
        return _projected_residual_samples(cfg, x0, n_draws, seed)
    out = np.empty((n_draws, *x0.shape))
    exploded = np.zeros(n_draws, dtype=bool)
    for b in range(n_draws):
        path = fc_forward(cfg, x0, substream(seed, b))
        if path.exploded:
            out[b] = np.nan
            exploded[b] = True
        else:
            out[b] = path.final
    return out, exploded


# ---------------------------------------------------------------------------
# convolutional recursion
# ---------------------------------------------------------------------------

def extract_patch(x: np.ndarray, position: tuple[int, int], filter_size: int,
                  pad_value: float = 0.0) -> np.ndarray:
    """Receptive field at one position, zero-padded at the borders, flattened.

    ``x`` is (U, V, D); the result has length filter_size^2 * D with the
    (row, col, channel) axes flattened in C order.
    """
    if filter_size % 2 == 0:
        raise ValueError("filter_size must be odd")
    u, v = position
    height, width, channels = x.shape
    if not (0 <= u < height and 0 <= v < width):
        raise ValueError(f"position {position} out of range for {x.shape}")
    e = (filter_size - 1) // 2
    patch = np.full((filter_size, filter_size, channels), pad_value, dtype=float)
    r0, r1 = max(u - e, 0), min(u + e + 1, height)
    c0, c1 = max(v - e, 0), min(v + e + 1, width)
    patch[r0 - (u - e):r1 - (u - e), c0 - (v - e):c1 - (v - e)] = x[r0:r1, c0:c1]
    return patch.reshape(-1)


def extract_all_patches(x: np.ndarray, filter_size: int,
                        pad_value: float = 0.0) -> np.ndarray:
    """All patches of a (..., U, V, D) image, shape (..., U*V, K*K*D)."""
    if filter_size % 2 == 0:
        raise ValueError("filter_size must be odd")
    e = (filter_size - 1) // 2
    lead = x.shape[:-3]
    height, width, channels = x.shape[-3:]
    pad = [(0, 0)] * len(lead) + [(e, e), (e, e), (0, 0)]
    padded = np.pad(x, pad, mode="constant", constant_values=pad_value)
    windows = np.lib.stride_tricks.sliding_window_view(
        padded, (filter_size, filter_size), axis=(-3, -2))
    # windows: (..., U, V, D, K, K) -> (..., U, V, K, K, D)
    windows = np.moveaxis(windows, -3, -1)
    return windows.reshape(*lead, height * width, filter_size ** 2 * channels)


def cnn_step(x: np.ndarray, dw: np.ndarray, db: np.ndarray, phi: Activation,
             psi: Activation = IDENTITY, filter_size: int | None = None) -> np.ndarray:
    """One convolutional residual update on a (U, V, D) or (N, U, V, D) state.

    The same filter draw is applied at every position; padding enters the
    patches as psi(0).
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    n, height, width, channels = x.shape
    if filter_size is None:
        filter_size = int(round(np.sqrt(dw.shape[1] / channels)))
    pad_value = float(psi(np.array(0.0)))
    patches = extract_all_patches(psi(x), filter_size, pad_value)  # (N, P, F)
    pre = patches @ dw.T + db                                       # (N, P, D)
    out = x + phi(pre).reshape(x.shape)
    return out[0] if squeeze else out


def cnn_forward(cfg: NetConfig, x0: np.ndarray, rng: np.random.Generator,
                retain_path: bool = False, retain_params: bool = False) -> LayerPath:
    """Convolutional residual recursion; ``x0`` is (N, U, V, D) or (U, V, D)."""
    require_smooth(cfg.phi, "cnn_forward")
    if not isinstance(cfg.scheme, (CnnFullIID, CnnTensorGaussian)):
        raise ValueError("cnn_forward requires a convolutional scheme")
    x = np.asarray(x0, dtype=float)
    if x.ndim == 3:
        x = x[None]
    k = cfg.scheme.filter_size
    states = [x.copy()] if retain_path else None
    params = [] if retain_params else None
    explosion_layer = None
    for layer in range(cfg.depth):
        dw, db = sample_increments(cfg.scheme, cfg.dt, rng)
        x = cnn_step(x, dw, db, cfg.phi, cfg.psi, filter_size=k)
        if retain_params:
            params.append((dw, db))
        if _blown_up(x):
            explosion_layer = layer + 1
            break
        if retain_path:
            states.append(x.copy())
    stacked = np.stack(states) if retain_path else x[None]
    return LayerPath(stacked, explosion_layer, params)


def cnn_terminal_samples(cfg: NetConfig, x0: np.ndarray, n_draws: int,
                         seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Terminal CNN states over draws, (draws, N, U, V, D) with NaN blow-ups."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 3:
        x0 = x0[None]
    out = np.empty((n_draws, *x0.shape))
    exploded = np.zeros(n_draws, dtype=bool)
    for b in range(n_draws):
        path = cnn_forward(cfg, x0, substream(seed, b))
        if path.exploded:
            out[b] = np.nan
            exploded[b] = True
        else:
            out[b] = path.final
    return out, exploded


# ---------------------------------------------------------------------------
# adaptation layers and the feedforward baseline
# ---------------------------------------------------------------------------

def copy_inputs(z: np.ndarray, width: int) -> np.ndarray:
    """Copy scalar inputs across all dimensions: (N,) -> (N, width)."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.ndim != 1:
        raise ValueError("copy_inputs expects scalar inputs")
    return np.repeat(z[:, None], width, axis=1)


def input_adapt(z: np.ndarray, width: int, sigma_z2: float,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Embed raw inputs: x0 = z @ A^T with A entries N(0, sigma_z2), A retained."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    emb = rng.standard_normal((width, z.shape[1])) * np.sqrt(sigma_z2)
    return z @ emb.T, emb


def output_adapt(x_final: np.ndarray, sigma_y2: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Read out scalars: y = G x with G entries N(0, sigma_y2 / D)."""
    x_final = np.atleast_2d(np.asarray(x_final, dtype=float))
    d = x_final.shape[-1]
    readout = rng.standard_normal(d) * np.sqrt(sigma_y2 / d)
    return x_final @ readout, readout


def cnn_input_adapt(z: np.ndarray, width: int,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """1x1 input convolution with variance 1/C: (N, U, V, C) -> (N, U, V, D)."""
    z = np.asarray(z, dtype=float)
    c = z.shape[-1]
    emb = rng.standard_normal((width, c)) * np.sqrt(1.0 / c)
    return z @ emb.T, emb


def cnn_output_adapt(x_final: np.ndarray, n_outputs: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """1x1 output convolution followed by global space averaging."""
    x_final = np.asarray(x_final, dtype=float)
    d = x_final.shape[-1]
    readout = rng.standard_normal((n_outputs, d)) * np.sqrt(1.0 / d)
    mapped = x_final @ readout.T                  # (N, U, V, Y)
    return mapped.mean(axis=(-3, -2)), readout


def feedforward_baseline(width: int, depth: int, sigma_w2: float, sigma_b2: float,
                         phi: Activation, x0: np.ndarray, n_draws: int,
                         seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Plain (non-residual) deep net x <- phi(A x + a), shared draws per batch.

    Serves as the unscaled-initialization contrast case; the caller supplies
    the variances (e.g. the usual relu choice sigma_w2=2, sigma_b2=0).  Uses
    the same exact-in-law projected sampling as the residual fast path, so
    relu is allowed here.  Returns (samples (draws, N, D), exploded mask).
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    n, d = x0.shape
    if d != width:
        raise ValueError("x0 width mismatch")
    x = np.broadcast_to(x0, (n_draws, n, d)).astype(float).copy()
    exploded = np.zeros(n_draws, dtype=bool)
    rng = substream(seed, 0)
    b_scale = np.sqrt(sigma_b2)
    for _ in range(depth):
        gram = sigma_w2 / width * np.matmul(x, x.transpose(0, 2, 1))
        factor = psd_factor_batched(gram)
        noise = rng.standard_normal((n_draws, n, d))
        pre = np.matmul(factor, noise)
        pre += b_scale * rng.standard_normal((n_draws, 1, d))
        x = phi(pre)
        with np.errstate(invalid="ignore"):
            bad = ~np.isfinite(x).all(axis=(1, 2))
            bad |= np.abs(x).max(axis=(1, 2)) > STATE_CAP
        exploded |= bad
        if exploded.any():
            x[exploded] = 0.0
    x[exploded] = np.nan
    return x, exploded
