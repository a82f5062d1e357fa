"""Smooth reference trajectories and the virtual-vehicle clock."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import Callable

import numpy as np
from numpy.polynomial import polynomial as P

from .flatness import FlatSample


@dataclass(frozen=True)
class ReferenceTrajectory:
    """``evaluate(t)`` returns a (5, 3) stack of derivatives 0..4 at time ``t``.

    Past ``duration`` the trajectory holds its terminal point with zero
    derivatives.  ``duration = inf`` means the reference never ends.
    """

    evaluate: Callable[[float], np.ndarray]
    duration: float = np.inf
    kind: str = "custom"

    def __call__(self, t: float) -> np.ndarray:
        if t >= self.duration:
            out = np.zeros((5, 3))
            out[0] = self.evaluate(self.duration)[0]
            return out
        return self.evaluate(max(t, 0.0))

    def sample(self, t: float) -> FlatSample:
        return FlatSample.from_stack(self(t))


def hover_ref(position) -> ReferenceTrajectory:
    p = np.array(position, dtype=float).reshape(3)

    def evaluate(t):
        out = np.zeros((5, 3))
        out[0] = p
        return out

    return ReferenceTrajectory(evaluate, np.inf, "hover")


def _rest_to_rest_blend(degree: int = 9) -> np.ndarray:
    """Power-basis coefficients of the scalar Bezier blend with clamped ends.

    Control points 0..degree//2 sit at 0 and the rest at 1, so the first
    (degree-1)//2 derivatives vanish at both ends.
    """
    coeffs = np.zeros(degree + 1)
    for k in range(degree // 2 + 1, degree + 1):
        # Bernstein basis C(n,k) tau^k (1 - tau)^(n-k)
        basis = comb(degree, k) * P.polymul(np.eye(1, k + 1, k)[0], P.polypow([1.0, -1.0], degree - k))
        coeffs[: basis.size] += basis
    return coeffs


_BLEND = _rest_to_rest_blend(9)
_BLEND_DERIVS = [P.polyder(_BLEND, k) if k else _BLEND for k in range(5)]


def bezier_interp(p0, p1, T: float) -> ReferenceTrajectory:
    """Degree-9 rest-to-rest Bezier segment from ``p0`` to ``p1`` over ``T`` seconds."""
    if not T > 0:
        raise ValueError(f"duration must be positive, got {T}")
    p0 = np.array(p0, dtype=float).reshape(3)
    p1 = np.array(p1, dtype=float).reshape(3)
    delta = p1 - p0

    def evaluate(t):
        tau = min(max(t / T, 0.0), 1.0)
        out = np.empty((5, 3))
        for k in range(5):
            out[k] = P.polyval(tau, _BLEND_DERIVS[k]) / T**k * delta
        out[0] += p0
        return out

    return ReferenceTrajectory(evaluate, T, "bezier")


def circle_ref(radius: float, angular_rate: float, phase: float = 0.0, z: float = 0.0,
               center=(0.0, 0.0, 0.0)) -> ReferenceTrajectory:
    """Horizontal circle ``center + radius (cos(w t + phase), sin(w t + phase), 0) + (0, 0, z)``."""
    if radius < 0:
        raise ValueError(f"radius must be non-negative, got {radius}")
    c = np.array(center, dtype=float).reshape(3) + np.array([0.0, 0.0, z])
    w = float(angular_rate)

    def evaluate(t):
        a = w * t + phase
        cs, sn = np.cos(a), np.sin(a)
        # d^k/dt^k of (cos a, sin a) cycles through (c,s), (-s,c), (-c,-s), (s,-c)
        cyc = [(cs, sn), (-sn, cs), (-cs, -sn), (sn, -cs)]
        out = np.zeros((5, 3))
        for k in range(5):
            x, y = cyc[k % 4]
            out[k, 0] = radius * w**k * x
            out[k, 1] = radius * w**k * y
        out[0] += c
        return out

    return ReferenceTrajectory(evaluate, np.inf, "circle")


@dataclass(frozen=True)
class VirtualClock:
    s: float = 0.0
    k_s: float = 0.0
    sdot: float = 1.0

    def __post_init__(self):
        if self.k_s < 0:
            raise ValueError(f"k_s must be non-negative, got {self.k_s}")


def clock_rate(k_s: float, e_r) -> float:
    e = np.asarray(e_r, dtype=float)
    return float(np.exp(-k_s * float(e @ e)))


def clock_step(clock: VirtualClock, e_r, dt: float) -> VirtualClock:
    """Advance the virtual time by one Euler step at rate ``exp(-k_s |e_r|^2)``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    sdot = clock_rate(clock.k_s, e_r)
    return VirtualClock(s=clock.s + dt * sdot, k_s=clock.k_s, sdot=sdot)


def eval_parameterized(traj: ReferenceTrajectory, clock: VirtualClock) -> FlatSample:
    """Reference at virtual time ``s`` with time derivatives scaled by ``sdot**k``.

    The rate is treated as constant over a control step, so terms involving
    derivatives of ``sdot`` are dropped.
    """
    stack = traj(clock.s)
    scale = clock.sdot ** np.arange(5)
    return FlatSample.from_stack(stack * scale[:, None])
