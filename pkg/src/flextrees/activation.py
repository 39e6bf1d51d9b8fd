"""Routing activations.

``SmoothStep`` is the cubic that is exactly 0 below ``-gamma/2``, exactly 1
above ``gamma/2`` and C1 in between. The exact saturation is what allows a
subtree to be skipped: both the routing weight and its derivative are
identically zero there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class SmoothStep:
    gamma: float = 1.0

    name = "smoothstep"

    def __post_init__(self):
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise ValueError(f"gamma must be a positive finite number, got {self.gamma}")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return float(self(t[None])[0])
        g = self.gamma
        out = t * t
        out *= -2.0 / g**3
        out += 1.5 / g
        out *= t
        out += 0.5
        out[t <= -g / 2] = 0.0
        out[t >= g / 2] = 1.0
        return out

    def deriv(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return float(self.deriv(t[None])[0])
        g = self.gamma
        out = t * t
        out *= -6.0 / g**3
        out += 1.5 / g
        out[np.abs(t) >= g / 2] = 0.0
        return out


@dataclass(frozen=True)
class Logistic:
    """Sigmoid routing. Never saturates exactly, so nothing is ever skipped."""

    gamma: float = 1.0

    name = "logistic"

    def __call__(self, t):
        out = expit(np.asarray(t, dtype=np.float64) / self.gamma)
        return out if out.ndim else float(out)

    def deriv(self, t):
        s = expit(np.asarray(t, dtype=np.float64) / self.gamma)
        out = s * (1.0 - s) / self.gamma
        return out if out.ndim else float(out)


ACTIVATIONS = {"smoothstep": SmoothStep, "logistic": Logistic}


def make_activation(name: str = "smoothstep", gamma: float = 1.0):
    try:
        return ACTIVATIONS[name](gamma)
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
