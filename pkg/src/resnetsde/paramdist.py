"""Parameter-increment distributions for residual blocks.

A scheme bundles the law of one layer's weight/bias increments

    dW = weight_drift * dt + eps_w * sqrt(dt)
    db = bias_drift   * dt + eps_b * sqrt(dt)

together with the two quantities every limit formula needs: the mean map
``weight_drift @ u + bias_drift`` and the cross-covariance
``Cov[eps_w u + eps_b, eps_w v + eps_b]``.  Five variants are supported:

* ``FullIID``           -- centered entries, weights scaled by sigma_w/sqrt(D)
* ``MatrixGaussian``    -- covariance factorizes over rows/columns
* ``GeneralGaussian``   -- arbitrary D^2 x D^2 weight covariance (D <= 64;
                           the parametrization cost is O(D^4) and is only
                           meant for small cross-checks)
* ``CnnFullIID``        -- centered filter entries, same 1/sqrt(D) scaling
* ``CnnTensorGaussian`` -- covariance factorizes over the four filter axes

All covariances are validated symmetric PSD at construction (minimum
eigenvalue >= -1e-10 * ||cov||).  Schemes are immutable; sampling takes a
caller-supplied generator, so independent workers never share state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "FullIID", "MatrixGaussian", "GeneralGaussian", "CnnFullIID",
    "CnnTensorGaussian", "ParamScheme", "PsdFactor", "NotPsdError",
    "psd_sqrt", "psd_factor_batched", "sample_increments", "block_cross_cov",
    "mean_map",
]

PSD_RTOL = 1e-10


class NotPsdError(ValueError):
    pass


@dataclass(frozen=True)
class PsdFactor:
    """A factor S with S S^T equal to the target matrix."""

    matrix: np.ndarray
    method: str  # "cholesky" | "eigen-clipped"


def _as_sym(mat, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-12 * (1.0 + np.abs(mat).max(initial=0.0))):
        raise ValueError(f"{name} must be symmetric")
    return 0.5 * (mat + mat.T)


def psd_sqrt(cov) -> PsdFactor:
    """Factor a symmetric PSD matrix as S S^T.

    Cholesky is attempted first (exact, no jitter).  Singular or slightly
    indefinite matrices fall back to an eigendecomposition with negative
    eigenvalues clipped to zero; eigenvalues below -1e-10 * ||cov|| are
    rejected as genuinely non-PSD.
    """
    cov = _as_sym(cov, "cov")
    try:
        return PsdFactor(np.linalg.cholesky(cov), "cholesky")
    except np.linalg.LinAlgError:
        pass
    eigval, eigvec = np.linalg.eigh(cov)
    scale = max(np.abs(eigval).max(initial=0.0), 1e-300)
    if eigval.min(initial=0.0) < -PSD_RTOL * scale:
        raise NotPsdError(
            f"matrix is not PSD: min eigenvalue {eigval.min():.3e} "
            f"below tolerance {-PSD_RTOL * scale:.3e}")
    root = eigvec * np.sqrt(np.clip(eigval, 0.0, None))
    return PsdFactor(root, "eigen-clipped")


def psd_factor_batched(cov: np.ndarray) -> np.ndarray:
    """Batched S S^T factors for a (..., n, n) stack of PSD matrices.

    Cholesky on the whole stack when possible; near-singular members
    (duplicated inputs make Gram matrices exactly singular) are re-factored
    through clipped eigendecompositions.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    eigval, eigvec = np.linalg.eigh(cov)
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))[..., None, :]


def _validated_psd(mat, name: str) -> np.ndarray:
    mat = _as_sym(mat, name)
    eigval = np.linalg.eigvalsh(mat)
    scale = max(np.abs(eigval).max(initial=0.0), 1e-300)
    if eigval.min(initial=0.0) < -PSD_RTOL * scale:
        raise NotPsdError(f"{name} is not PSD (min eigenvalue {eigval.min():.3e})")
    return mat


@dataclass(frozen=True)
class FullIID:
    """Centered i.i.d. entries: weights N(0, sigma_w^2 dt / D), biases N(0, sigma_b^2 dt)."""

    dim: int
    sigma_w: float = 1.0
    sigma_b: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.sigma_w < 0 or self.sigma_b < 0:
            raise ValueError("sigma_w and sigma_b must be non-negative")

    @property
    def state_dim(self) -> int:
        return self.dim

    @property
    def feature_dim(self) -> int:
        return self.dim


@dataclass(frozen=True)
class MatrixGaussian:
    """Weight noise with covariance out_cov[o,o'] * in_cov[i,i'] plus drifts."""

    weight_drift: np.ndarray  # (D, D)
    bias_drift: np.ndarray    # (D,)
    out_cov: np.ndarray       # (D, D)
    in_cov: np.ndarray        # (D, D)
    bias_cov: np.ndarray      # (D, D)
    _factors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.weight_drift, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("weight_drift must be D x D")
        object.__setattr__(self, "weight_drift", d)
        object.__setattr__(self, "bias_drift",
                           np.asarray(self.bias_drift, dtype=float).reshape(-1))
        object.__setattr__(self, "out_cov", _validated_psd(self.out_cov, "out_cov"))
        object.__setattr__(self, "in_cov", _validated_psd(self.in_cov, "in_cov"))
        object.__setattr__(self, "bias_cov", _validated_psd(self.bias_cov, "bias_cov"))
        n = d.shape[0]
        for name in ("out_cov", "in_cov", "bias_cov"):
            if getattr(self, name).shape != (n, n):
                raise ValueError(f"{name} must match weight_drift shape {(n, n)}")
        if self.bias_drift.shape != (n,):
            raise ValueError("bias_drift must have length D")
        object.__setattr__(self, "_factors", (
            psd_sqrt(self.out_cov).matrix,
            psd_sqrt(self.in_cov).matrix,
            psd_sqrt(self.bias_cov).matrix,
        ))

    @property
    def state_dim(self) -> int:
        return self.weight_drift.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight_drift.shape[0]


@dataclass(frozen=True)
class GeneralGaussian:
    """Arbitrary weight covariance over vec(eps_w), row-major vectorization."""

    weight_drift: np.ndarray  # (D, D)
    bias_drift: np.ndarray    # (D,)
    weight_cov: np.ndarray    # (D^2, D^2)
    bias_cov: np.ndarray      # (D, D)
    _factors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.weight_drift, dtype=float)
        n = d.shape[0]
        if d.shape != (n, n):
            raise ValueError("weight_drift must be D x D")
        if n > 64:
            raise ValueError("GeneralGaussian is capped at D <= 64 "
                             "(weight covariance holds D^4 entries)")
        object.__setattr__(self, "weight_drift", d)
        object.__setattr__(self, "bias_drift",
                           np.asarray(self.bias_drift, dtype=float).reshape(-1))
        object.__setattr__(self, "weight_cov",
                           _validated_psd(self.weight_cov, "weight_cov"))
        object.__setattr__(self, "bias_cov", _validated_psd(self.bias_cov, "bias_cov"))
        if self.weight_cov.shape != (n * n, n * n):
            raise ValueError("weight_cov must be D^2 x D^2")
        if self.bias_cov.shape != (n, n) or self.bias_drift.shape != (n,):
            raise ValueError("bias parameters must match D")
        object.__setattr__(self, "_factors", (
            psd_sqrt(self.weight_cov).matrix,
            psd_sqrt(self.bias_cov).matrix,
        ))

    @property
    def state_dim(self) -> int:
        return self.weight_drift.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight_drift.shape[0]


@dataclass(frozen=True)
class CnnFullIID:
    """Centered i.i.d. filter entries with the same 1/sqrt(D) weight scaling."""

    channels: int
    filter_size: int
    sigma_w: float = 1.0
    sigma_b: float = 1.0

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd and positive")
        if self.sigma_w < 0 or self.sigma_b < 0:
            raise ValueError("sigma_w and sigma_b must be non-negative")

    @property
    def state_dim(self) -> int:
        return self.channels

    @property
    def feature_dim(self) -> int:
        return self.channels * self.filter_size ** 2


@dataclass(frozen=True)
class CnnTensorGaussian:
    """Filter noise with covariance factorizing over (out, row, col, in) axes."""

    weight_drift: np.ndarray  # (D, K, K, D)
    bias_drift: np.ndarray    # (D,)
    out_cov: np.ndarray       # (D, D)
    row_cov: np.ndarray       # (K, K)
    col_cov: np.ndarray       # (K, K)
    in_cov: np.ndarray        # (D, D)
    bias_cov: np.ndarray      # (D, D)
    _factors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        d = np.asarray(self.weight_drift, dtype=float)
        if d.ndim != 4 or d.shape[1] != d.shape[2] or d.shape[0] != d.shape[3]:
            raise ValueError("weight_drift must have shape (D, K, K, D)")
        k = d.shape[1]
        if k % 2 == 0:
            raise ValueError("filter length K must be odd")
        object.__setattr__(self, "weight_drift", d)
        object.__setattr__(self, "bias_drift",
                           np.asarray(self.bias_drift, dtype=float).reshape(-1))
        for name, size in (("out_cov", d.shape[0]), ("row_cov", k),
                           ("col_cov", k), ("in_cov", d.shape[0]),
                           ("bias_cov", d.shape[0])):
            mat = _validated_psd(getattr(self, name), name)
            if mat.shape != (size, size):
                raise ValueError(f"{name} must be {size} x {size}")
            object.__setattr__(self, name, mat)
        right = np.kron(np.kron(psd_sqrt(self.row_cov).matrix,
                                psd_sqrt(self.col_cov).matrix),
                        psd_sqrt(self.in_cov).matrix)
        object.__setattr__(self, "_factors", (
            psd_sqrt(self.out_cov).matrix,
            right,
            psd_sqrt(self.bias_cov).matrix,
        ))

    @property
    def state_dim(self) -> int:
        return self.weight_drift.shape[0]

    @property
    def filter_size(self) -> int:
        return self.weight_drift.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.state_dim * self.filter_size ** 2


ParamScheme = Union[FullIID, MatrixGaussian, GeneralGaussian, CnnFullIID,
                    CnnTensorGaussian]


def _weight_drift_matrix(scheme) -> np.ndarray | None:
    """Drift as a (D, F) matrix acting on (transformed) states or patches."""
    if isinstance(scheme, (FullIID, CnnFullIID)):
        return None
    drift = np.asarray(scheme.weight_drift, dtype=float)
    return drift.reshape(scheme.state_dim, scheme.feature_dim)


def sample_increments(scheme: ParamScheme, dt: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw one layer's (dW, db) with the exact diffusion scaling.

    The Gaussian part is scaled by sqrt(dt), the drift by dt.  The returned
    weight increment is a (D, F) matrix (F = D for fully connected schemes,
    F = K*K*D for convolutional ones, acting on flattened patches).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    sdt = np.sqrt(dt)
    d = scheme.state_dim
    f = scheme.feature_dim
    if isinstance(scheme, (FullIID, CnnFullIID)):
        dw = rng.standard_normal((d, f)) * (scheme.sigma_w / np.sqrt(d) * sdt)
        db = rng.standard_normal(d) * (scheme.sigma_b * sdt)
        return dw, db
    if isinstance(scheme, MatrixGaussian):
        out_f, in_f, bias_f = scheme._factors
        eps_w = out_f @ rng.standard_normal((d, d)) @ in_f.T
        eps_b = bias_f @ rng.standard_normal(d)
    elif isinstance(scheme, GeneralGaussian):
        w_f, bias_f = scheme._factors
        eps_w = (w_f @ rng.standard_normal(d * d)).reshape(d, d)
        eps_b = bias_f @ rng.standard_normal(d)
    elif isinstance(scheme, CnnTensorGaussian):
        out_f, right_f, bias_f = scheme._factors
        eps_w = out_f @ rng.standard_normal((d, f)) @ right_f.T
        eps_b = bias_f @ rng.standard_normal(d)
    else:
        raise TypeError(f"unknown scheme {type(scheme).__name__}")
    dw = _weight_drift_matrix(scheme) * dt + eps_w * sdt
    db = scheme.bias_drift * dt + eps_b * sdt
    return dw, db


def mean_map(scheme: ParamScheme, u: np.ndarray) -> np.ndarray:
    """Per-unit-time mean of the block input: weight_drift @ u + bias_drift."""
    u = np.asarray(u, dtype=float).reshape(-1)
    drift = _weight_drift_matrix(scheme)
    if drift is None:
        return np.zeros(scheme.state_dim)
    return drift @ u + scheme.bias_drift


def block_cross_cov(scheme: ParamScheme, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Cross-covariance Cov[eps_w u + eps_b, eps_w v + eps_b], a D x D matrix.

    ``u`` and ``v`` are transformed states (or flattened patches for the
    convolutional schemes).  This single quantity drives every drift and
    diffusion formula in the package.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    v = np.asarray(v, dtype=float).reshape(-1)
    f = scheme.feature_dim
    if u.shape != (f,) or v.shape != (f,):
        raise ValueError(f"inputs must have length {f}, got {u.shape} and {v.shape}")
    d = scheme.state_dim
    if isinstance(scheme, (FullIID, CnnFullIID)):
        return (scheme.sigma_b ** 2
                + scheme.sigma_w ** 2 / d * float(u @ v)) * np.eye(d)
    if isinstance(scheme, MatrixGaussian):
        return scheme.bias_cov + scheme.out_cov * float(u @ scheme.in_cov @ v)
    if isinstance(scheme, GeneralGaussian):
        cov4 = scheme.weight_cov.reshape(d, d, d, d)  # [r, i, c, j]
        return scheme.bias_cov + np.einsum("ricj,i,j->rc", cov4, u, v)
    if isinstance(scheme, CnnTensorGaussian):
        k = scheme.filter_size
        u3 = u.reshape(k, k, d)
        v3 = v.reshape(k, k, d)
        weighted = np.einsum("ab,cd,ef,bdf->ace",
                             scheme.row_cov, scheme.col_cov, scheme.in_cov, v3)
        return scheme.bias_cov + scheme.out_cov * float(np.einsum("ace,ace->", u3, weighted))
    raise TypeError(f"unknown scheme {type(scheme).__name__}")
