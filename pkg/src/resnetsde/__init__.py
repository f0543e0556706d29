"""Deep residual networks, their depth-limit stochastic dynamics, and the
doubly-wide analytic kernels, with kernel regression and gradient training
harnesses for checking every limit claim at desk scale."""

__version__ = "0.1.0"

from . import activations, forward, idx, inference, kernels, moments, \
    paramdist, sde, stats  # noqa: F401
