"""Linear stochastic-interpolant schedule and velocity/posterior conversions.

Time runs from pure noise at ``t = 0`` to data at ``t = 1``:
``x_t = alpha(t) * x + sigma(t) * eps``.

All functions accept a scalar ``t`` or a per-row vector of times for a
batch of states of shape ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("linear",)


class DomainError(ValueError):
    """Time outside [0, 1] or mismatched vector shapes."""


class SingularityError(DomainError):
    """Conversion requested where sigma(t) = 0."""


@dataclass(frozen=True)
class Schedule:
    kind: str = "linear"
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.horizon != 1.0:
            raise ValueError("horizon is fixed at 1.0")

    def eval(self, t):
        """Return ``(alpha, sigma, alpha_dot, sigma_dot)`` at time(s) ``t``."""
        t = _check_time(t)
        # linear only; other kinds dispatch here
        one = np.ones_like(t)
        return t, 1.0 - t, one, -one

    def denominator(self, t):
        a, s, ad, sd = self.eval(t)
        return a * sd - ad * s

    def interpolate(self, x, eps, t):
        x, eps = _pair(x, eps)
        a, s, _, _ = self.eval(t)
        return _col(a, x) * x + _col(s, x) * eps

    def target_velocity(self, x, eps, t):
        x, eps = _pair(x, eps)
        _, _, ad, sd = self.eval(t)
        return _col(ad, x) * x + _col(sd, x) * eps

    def velocity_to_score(self, x_t, v, t):
        """Score of the marginal at ``x_t`` implied by the velocity ``v``.

        Singular at ``t = 1`` where the state carries no noise.
        """
        x_t, v = _pair(x_t, v)
        a, s, ad, sd = self.eval(t)
        if np.any(s == 0.0):
            raise SingularityError("score is undefined at t=1 (sigma=0)")
        denom = s * (a * sd - ad * s)
        return (_col(ad, x_t) * x_t - _col(a, x_t) * v) / _col(denom, x_t)

    def denoise_expectation(self, x_t, v, t):
        """Posterior mean of the data point given ``x_t`` and the velocity there."""
        x_t, v = _pair(x_t, v)
        a, s, ad, sd = self.eval(t)
        denom = a * sd - ad * s
        return (_col(sd, x_t) * x_t - _col(s, x_t) * v) / _col(denom, x_t)


LINEAR = Schedule()


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim > 1:
        raise DomainError(f"time must be a scalar or 1-D array, got shape {t.shape}")
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"time outside [0, 1]: {t}")
    return t


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DomainError("vectors must have dimension >= 1")
    return a, b


def _col(coef, x):
    # per-row time vector -> column so it scales each row of a (n, d) batch
    if np.ndim(coef) == 1:
        if x.ndim != 2 or x.shape[0] != coef.shape[0]:
            raise DomainError(f"time vector of length {coef.shape[0]} does not match batch {x.shape}")
        return coef[:, None]
    return coef
