"""Statistical comparison of the three sampling routes and function-space
diagnostics.

``compare_modes`` draws terminal samples of the same model three ways --
finite recursion, Euler scheme of the joint limit equation, and the analytic
transition density -- and reports per-statistic deviations in Monte Carlo
standard-error units plus two-sample Kolmogorov-Smirnov statistics.  The
other helpers aggregate sample matrices into the correlation grids and
quantile fans behind the function-space figures.  Histograms and moments are
emitted; density smoothing is left to whatever reads the CSV.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import ks_2samp

from .activations import Activation
from .forward import NetConfig, copy_inputs, fc_terminal_samples
from .kernels import transition_density
from .moments import MomentState, integrate_moments
from .paramdist import FullIID
from .rng import substream
from .sde import SdeSimConfig, simulate_fc_iid_joint

__all__ = [
    "SummaryStats", "ModeReport", "summarize", "ks_statistic", "ks_critical",
    "compare_modes", "correlation_grid", "analytic_correlation_surface",
    "function_quantiles",
]


@dataclass(frozen=True)
class SummaryStats:
    """Per-marginal moments with their Monte Carlo standard errors."""

    n_samples: int
    mean: np.ndarray
    variance: np.ndarray          # unbiased
    se_mean: np.ndarray
    se_variance: np.ndarray       # Gaussian-approximation var * sqrt(2/(n-1))
    correlation: np.ndarray
    hist_edges: np.ndarray        # (dims, bins + 1)
    hist_counts: np.ndarray       # (dims, bins)


def summarize(samples: np.ndarray, bins: int = 50) -> SummaryStats:
    """Moments, correlations and histograms of a (draws, dims) sample matrix."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n, dims = samples.shape
    if n < 2:
        raise ValueError("need at least two samples")
    mean = samples.mean(axis=0)
    var = samples.var(axis=0, ddof=1)
    se_mean = np.sqrt(var / n)
    se_var = var * np.sqrt(2.0 / (n - 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        # zero-variance marginals leave their correlations undefined (NaN)
        corr = np.corrcoef(samples, rowvar=False).reshape(dims, dims)
    edges = np.empty((dims, bins + 1))
    counts = np.empty((dims, bins), dtype=int)
    for j in range(dims):
        counts[j], edges[j] = np.histogram(samples[:, j], bins=bins)
    return SummaryStats(n, mean, var, se_mean, se_var, corr, edges, counts)


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    return float(ks_2samp(np.asarray(a), np.asarray(b)).statistic)


def ks_critical(n: int, m: int, alpha: float = 0.01) -> float:
    """Large-sample two-sided critical value c(alpha) sqrt((n+m)/(n m))."""
    c = np.sqrt(-np.log(alpha / 2.0) / 2.0)
    return float(c * np.sqrt((n + m) / (n * m)))


@dataclass
class ModeReport:
    """Agreement summary of the recursion / euler / analytic sampling routes."""

    mode_names: tuple
    stats: dict                      # mode -> SummaryStats
    mean_dev_se: dict                # (mode_a, mode_b) -> per-input deviations / SE
    var_dev_se: dict
    corr_values: dict                # mode -> off-diagonal correlation
    corr_dev: dict                   # pair -> |corr_a - corr_b|
    ks: dict                         # pair -> per-input KS statistics
    ks_threshold: float
    exploded: dict                   # mode -> number of blown-up draws
    se_limit: float = 4.0
    corr_limit: float = 0.03

    @property
    def agree(self) -> bool:
        within = all(np.all(v <= self.se_limit) for v in self.mean_dev_se.values())
        within &= all(np.all(v <= self.se_limit) for v in self.var_dev_se.values())
        within &= all(v <= self.corr_limit for v in self.corr_dev.values())
        within &= all(np.all(v <= self.ks_threshold) for v in self.ks.values())
        return bool(within)


def _analytic_pair_samples(z_pair, phi: Activation, sigma_w2, sigma_b2,
                           horizon, n_draws, seed) -> np.ndarray:
    """Dimension-1 samples from the wide-limit transition law for copied inputs."""
    z_pair = np.asarray(z_pair, dtype=float)
    start = MomentState.create(z_pair, z_pair ** 2, np.outer(z_pair, z_pair))
    traj = integrate_moments(start, horizon, step=1e-3 * horizon,
                             phi1=phi.d1_at_zero, phi2=phi.d2_at_zero,
                             sigma_w2=sigma_w2, sigma_b2=sigma_b2)
    if traj.exploded:
        raise RuntimeError("moment system exploded before the horizon")
    law = transition_density(z_pair, start, traj.final)
    return law.sample(n_draws, substream(seed, 2))


def compare_modes(z_pair, depth: int, width: int, steps: int, n_draws: int,
                  phi: Activation, sigma_w2: float, sigma_b2: float,
                  seed: int, horizon: float = 1.0,
                  se_limit: float = 4.0, corr_limit: float = 0.03,
                  ks_alpha: float = 0.01) -> ModeReport:
    """Run the three routes on copied scalar inputs and compare dimension 1.

    Covers the fully i.i.d. scheme with psi = identity (the setting in which
    the three routes describe the same law).
    """
    z_pair = np.atleast_1d(np.asarray(z_pair, dtype=float))
    scheme = FullIID(width, np.sqrt(sigma_w2), np.sqrt(sigma_b2))
    x0 = copy_inputs(z_pair, width)

    # distinct top-level seeds keep the three routes independent
    net = NetConfig(width, depth, scheme, phi, horizon=horizon)
    rec, rec_exp = fc_terminal_samples(net, x0, n_draws, seed)
    sde_cfg = SdeSimConfig(steps, scheme, phi, horizon=horizon)
    sde, sde_exp = simulate_fc_iid_joint(sde_cfg, x0, n_draws, seed + 1)
    ana = _analytic_pair_samples(z_pair, phi, sigma_w2, sigma_b2, horizon,
                                 n_draws, seed + 2)

    samples = {
        "recursion": rec[~rec_exp][:, :, 0],
        "euler": sde[~sde_exp][:, :, 0],
        "analytic": ana,
    }
    exploded = {"recursion": int(rec_exp.sum()), "euler": int(sde_exp.sum()),
                "analytic": 0}
    stats = {name: summarize(s) for name, s in samples.items()}
    names = tuple(samples)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    mean_dev, var_dev, corr_dev, ks = {}, {}, {}, {}
    corr_values = {name: float(st.correlation[0, 1]) for name, st in stats.items()}
    for a, b in pairs:
        sa, sb = stats[a], stats[b]
        mean_dev[(a, b)] = np.abs(sa.mean - sb.mean) / np.hypot(sa.se_mean, sb.se_mean)
        var_dev[(a, b)] = np.abs(sa.variance - sb.variance) / np.hypot(
            sa.se_variance, sb.se_variance)
        corr_dev[(a, b)] = abs(corr_values[a] - corr_values[b])
        ks[(a, b)] = np.array([
            ks_statistic(samples[a][:, j], samples[b][:, j])
            for j in range(z_pair.size)])
    threshold = ks_critical(n_draws, n_draws, ks_alpha)
    return ModeReport(names, stats, mean_dev, var_dev, corr_values, corr_dev,
                      ks, threshold, exploded, se_limit, corr_limit)


def correlation_grid(samples: np.ndarray) -> np.ndarray:
    """Pairwise output correlations of a (draws, inputs) sample matrix.

    Exactly symmetric (the raw product-moment matrix is symmetrized to kill
    bit-level BLAS asymmetry); blown-up draws (NaN rows) are dropped.
    """
    samples = np.asarray(samples, dtype=float)
    keep = np.isfinite(samples).all(axis=1)
    rho = np.corrcoef(samples[keep], rowvar=False)
    return 0.5 * (rho + rho.T)


def analytic_correlation_surface(z_grid: np.ndarray, ratio: float) -> np.ndarray:
    """Wide-limit output correlations for copied scalar inputs.

    For the non-explosive regime the growth factor cancels and the surface is
    (z z' + ratio) / sqrt((z^2 + ratio)(z'^2 + ratio)) with
    ratio = sigma_b^2 / sigma_w^2.
    """
    z = np.asarray(z_grid, dtype=float)
    num = np.outer(z, z) + ratio
    scale = np.sqrt(z ** 2 + ratio)
    return num / np.outer(scale, scale)


def function_quantiles(samples: np.ndarray,
                       quantiles=(5.0, 50.0, 95.0)) -> np.ndarray:
    """Per-input quantiles (linear interpolation), shape (len(quantiles), inputs)."""
    samples = np.asarray(samples, dtype=float)
    keep = np.isfinite(samples).all(axis=1)
    return np.percentile(samples[keep], quantiles, axis=0)
