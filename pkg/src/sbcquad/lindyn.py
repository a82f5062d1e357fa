"""Quadruple-integrator chain dynamics and pole placement.

Every vehicle is modelled in flat-output space as ``r'''' = v`` where the
snap ``v`` is the virtual control.  The state of one vehicle is the stack of
position, velocity, acceleration and jerk.

Gain convention: a :class:`GainRow` ``k = (c0, c1, c2, c3)`` always multiplies
the stack ``(h, h', h'', h''')`` (or ``(e, e', e'', e''')`` for a tracking
error), lowest derivative first.  The barrier and the tracking controller use
the same ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DERIV_NAMES = ("r", "dr", "ddr", "dddr")


def _vec3(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.shape != (3,):
        raise ValueError(f"{name} must have exactly 3 components, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries: {arr}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class IntegratorState:
    """Flat state ``q = (r, r', r'', r''')`` of a single vehicle."""

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ddr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dddr: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in DERIV_NAMES:
            object.__setattr__(self, name, _vec3(getattr(self, name), name))

    @classmethod
    def from_stack(cls, stack) -> "IntegratorState":
        stack = np.asarray(stack, dtype=float).reshape(4, 3)
        return cls(stack[0], stack[1], stack[2], stack[3])

    @classmethod
    def at_rest(cls, position) -> "IntegratorState":
        return cls(r=position)

    def stack(self) -> np.ndarray:
        """(4, 3) array, row k holding the k-th derivative."""
        return np.vstack([self.r, self.dr, self.ddr, self.dddr])

    def __eq__(self, other):
        if not isinstance(other, IntegratorState):
            return NotImplemented
        return bool(np.array_equal(self.stack(), other.stack()))

    __hash__ = None


@dataclass(frozen=True)
class ChainMatrices:
    """Per-axis shift matrix ``F`` and input vector ``G`` of the integrator chain."""

    F: np.ndarray = field(default_factory=lambda: np.eye(4, k=1))
    G: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def lifted(self):
        """Kronecker lift to the 12-dimensional single-vehicle state."""
        return np.kron(self.F, np.eye(3)), np.kron(self.G.reshape(4, 1), np.eye(3))


CHAIN = ChainMatrices()


@dataclass(frozen=True)
class GainRow:
    k: np.ndarray
    poles: tuple

    def closed_loop(self) -> np.ndarray:
        return CHAIN.F - np.outer(CHAIN.G, self.k)

    @property
    def min_pole(self) -> float:
        return min(self.poles)


DEFAULT_POLES = (2.0, 2.2, 2.4, 2.6)


def place_poles(poles=DEFAULT_POLES) -> GainRow:
    """Gain row placing the eigenvalues of ``F - G k`` at ``-poles``.

    For the integrator chain the closed-loop matrix is a companion matrix, so
    the gains are the coefficients of ``prod(s + p_i)`` (Ackermann's formula
    degenerates to polynomial expansion).
    """
    p = np.asarray(poles, dtype=float).reshape(-1)
    if p.shape != (4,):
        raise ValueError(f"need exactly 4 poles, got {p.shape[0]}")
    if not np.all(np.isfinite(p)) or np.any(p <= 0):
        raise ValueError(f"poles must be finite and strictly positive, got {p.tolist()}")
    coeffs = np.array([1.0])
    # sorted so the float result does not depend on the order poles were given
    for pi in np.sort(p):
        coeffs = np.convolve(coeffs, [1.0, pi])
    # coeffs = [1, c3, c2, c1, c0]
    k = coeffs[:0:-1].copy()
    k.setflags(write=False)
    return GainRow(k=k, poles=tuple(float(x) for x in p))


def euler_step(q: IntegratorState, v, dt: float) -> IntegratorState:
    """One explicit forward-Euler step of the chain under constant snap ``v``."""
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError(f"dt must be positive and finite, got {dt}")
    v = _vec3(v, "v")
    return IntegratorState(
        r=q.r + dt * q.dr,
        dr=q.dr + dt * q.ddr,
        ddr=q.ddr + dt * q.dddr,
        dddr=q.dddr + dt * v,
    )


def euler_step_stack(stack: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    """Array form of :func:`euler_step` for ``(..., 4, 3)`` stacks; no validation."""
    out = stack.copy()
    out[..., :3, :] += dt * stack[..., 1:, :]
    out[..., 3, :] += dt * v
    return out
