"""Activation functions with analytic derivatives up to order 3.

Every simulator and every analytic limit object consumes activations
through this module: the discrete recursions need the functions themselves,
while the drift/diffusion/kernel formulas only touch the derivatives at the
origin.  Derivatives are implemented analytically (the drift formulas need
the exact second derivative at zero); finite differences appear only in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["Activation", "ActivationError", "get_activation", "eval_activation",
           "check_admissible", "ACTIVATIONS"]

_ArrayFn = Callable[[np.ndarray], np.ndarray]


class ActivationError(ValueError):
    pass


def _sigmoid(x):
    # tanh form is stable for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class Activation:
    """A scalar activation applied elementwise, with derivatives d1..d3.

    ``smooth`` marks three-times differentiability; non-smooth activations
    (relu) are accepted only by the plain feedforward baseline and rejected
    by everything that relies on a diffusion limit.
    """

    name: str
    value: _ArrayFn
    d1: _ArrayFn
    d2: _ArrayFn
    d3: _ArrayFn
    smooth: bool = True
    d1_at_zero: float = field(init=False)
    d2_at_zero: float = field(init=False)
    d3_at_zero: float = field(init=False)
    zero_at_origin: bool = field(init=False)

    def __post_init__(self):
        z = np.array(0.0)
        object.__setattr__(self, "d1_at_zero", float(self.d1(z)))
        object.__setattr__(self, "d2_at_zero", float(self.d2(z)))
        object.__setattr__(self, "d3_at_zero", float(self.d3(z)))
        object.__setattr__(self, "zero_at_origin", abs(float(self.value(z))) <= 1e-14)

    def __call__(self, x, order: int = 0):
        return eval_activation(self, x, order)


def eval_activation(act: Activation, x, order: int = 0):
    """Evaluate the order-th derivative of ``act`` at ``x`` (order 0..3)."""
    if order == 0:
        return act.value(np.asarray(x, dtype=float))
    if order == 1:
        return act.d1(np.asarray(x, dtype=float))
    if order == 2:
        return act.d2(np.asarray(x, dtype=float))
    if order == 3:
        return act.d3(np.asarray(x, dtype=float))
    raise ActivationError(f"unsupported derivative order {order!r}; expected 0..3")


def check_admissible(act: Activation) -> dict:
    """Report the origin behaviour that gates which components accept ``act``.

    ``phi2_zero`` distinguishes the regime where the second-order drift
    vanishes (no finite-time blow-up) from the explosive regime.
    """
    return {
        "name": act.name,
        "smooth": act.smooth,
        "zero_at_origin": act.zero_at_origin,
        "phi2_zero": act.smooth and abs(act.d2_at_zero) <= 1e-14,
    }


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _tanh_d3(x):
    t = np.tanh(x)
    return (1.0 - t * t) * (6.0 * t * t - 2.0)


def _swish(x):
    return x * _sigmoid(x)


def _swish_d1(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


def _swish_d2(x):
    s = _sigmoid(x)
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    return 2.0 * s1 + x * s2


def _swish_d3(x):
    s = _sigmoid(x)
    s1 = s * (1.0 - s)
    s2 = s1 * (1.0 - 2.0 * s)
    s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1
    return 3.0 * s2 + x * s3


def _zeros_like(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _ones_like(x):
    return np.ones_like(np.asarray(x, dtype=float))


TANH = Activation("tanh", np.tanh, _tanh_d1, _tanh_d2, _tanh_d3)
SWISH = Activation("swish", _swish, _swish_d1, _swish_d2, _swish_d3)
IDENTITY = Activation("identity", lambda x: np.asarray(x, dtype=float),
                      _ones_like, _zeros_like, _zeros_like)
# relu derivatives are almost-everywhere values; smooth=False keeps it out of
# the diffusion machinery, it only serves the feedforward baseline.
RELU = Activation("relu", lambda x: np.maximum(np.asarray(x, dtype=float), 0.0),
                  lambda x: (np.asarray(x, dtype=float) > 0).astype(float),
                  _zeros_like, _zeros_like, smooth=False)

ACTIVATIONS = {a.name: a for a in (TANH, SWISH, IDENTITY, RELU)}


def get_activation(name: str) -> Activation:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ActivationError(
            f"unknown activation {name!r}; available: {sorted(ACTIVATIONS)}") from None


def require_smooth(act: Activation, where: str) -> None:
    """Reject activations outside the diffusion framework (e.g. relu)."""
    if not act.smooth:
        raise ActivationError(f"{where} requires a smooth activation, got {act.name!r}")
    if not act.zero_at_origin:
        raise ActivationError(f"{where} requires value(0)=0, got {act.name!r}")
