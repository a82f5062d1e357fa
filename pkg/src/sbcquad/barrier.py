"""Pairwise super-ellipsoid barrier functions and their ECBF constraint rows.

For a pair ``(i, j)`` let ``d = (x_i - x_j, y_i - y_j, (z_i - z_j)/c)``.  The
rectangle-shaped safe set is ``h = sum(d**4) - D_s**4 >= 0``.  Because the
dynamics are a chain of four integrators, ``h''''`` is affine in the aggregate
snap and the exponential barrier condition ``h'''' + k . eta >= 0`` becomes a
single linear row ``A v <= b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .lindyn import GainRow, IntegratorState


class DegenerateGeometryError(ValueError):
    """Two vehicles share a position, so their barrier row vanishes."""

    def __init__(self, pair, message=None):
        self.pair = tuple(pair)
        super().__init__(message or f"vehicles {self.pair} have coincident positions; no certificate exists")


@dataclass(frozen=True)
class SafetyGeometry:
    D_s: float = 0.25
    c: float = 2.0
    shape: str = "rectangle"
    n: int = 4

    def __post_init__(self):
        if not (np.isfinite(self.D_s) and self.D_s > 0):
            raise ValueError(f"D_s must be positive, got {self.D_s}")
        if not (np.isfinite(self.c) and self.c >= 1):
            raise ValueError(f"c must be >= 1, got {self.c}")
        if self.shape not in ("rectangle", "cylinder"):
            raise ValueError(f"shape must be 'rectangle' or 'cylinder', got {self.shape!r}")
        if self.shape == "rectangle" and self.n != 4:
            raise ValueError("rectangle shape uses exponent 4")
        if self.shape == "cylinder" and (int(self.n) != self.n or self.n < 2 or self.n % 2):
            # odd or fractional exponents make |dz|**n non-smooth at dz = 0
            raise ValueError(f"cylinder exponent must be an even integer >= 2, got {self.n}")

    @property
    def scale(self) -> np.ndarray:
        return np.array([1.0, 1.0, 1.0 / self.c])


@dataclass(frozen=True)
class EtaVector:
    h: float
    dh: float
    ddh: float
    dddh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.h, self.dh, self.ddh, self.dddh])


@dataclass(frozen=True)
class BarrierConstraint:
    """Row ``A v <= b`` over the aggregate snap ``v`` (length ``3m``)."""

    pair: tuple
    A: np.ndarray
    b: float
    eta: EtaVector

    def slack(self, v) -> float:
        return float(self.b - self.A @ v)


@dataclass(frozen=True)
class InitialConditionReport:
    pairs: tuple
    y: np.ndarray  # (n_pairs, 4): y0..y3 per pair
    passed: bool

    @property
    def failing_pairs(self) -> list:
        return [p for p, row in zip(self.pairs, self.y) if np.any(row < 0)]


def _stack(q) -> np.ndarray:
    if isinstance(q, IntegratorState):
        return q.stack()
    return np.asarray(q, dtype=float).reshape(4, 3)


def _relative(q_i, q_j, geom: SafetyGeometry) -> np.ndarray:
    """Scaled relative derivative stack; row k is the k-th derivative of d."""
    return (_stack(q_i) - _stack(q_j)) * geom.scale


# --- truncated Taylor arithmetic (used for the cylinder shape) -------------

def _jmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    out = np.zeros(n)
    for k in range(n):
        out[k] = a[: k + 1] @ b[k::-1]
    return out


def _jpow(a: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros_like(a)
    out[0] = 1.0
    for _ in range(p):
        out = _jmul(out, a)
    return out


_FACT = np.array([1.0, 1.0, 2.0, 6.0, 24.0])


def _taylor_coeffs(d: np.ndarray) -> np.ndarray:
    """Derivative stack (5, 3) -> Taylor coefficients (5, 3)."""
    return d / _FACT[: d.shape[0], None]


def _cylinder_derivs(d: np.ndarray, geom: SafetyGeometry) -> np.ndarray:
    """h, h', ..., h'''' of the cylinder barrier along a relative derivative stack (5, 3)."""
    t = _taylor_coeffs(d)
    half = int(geom.n) // 2
    rho2 = _jmul(t[:, 0], t[:, 0]) + _jmul(t[:, 1], t[:, 1])
    hz = _jpow(t[:, 2], int(geom.n))
    h = _jpow(rho2, half) + hz
    h[0] -= geom.D_s ** geom.n
    return h * _FACT


def _position(q) -> np.ndarray:
    if isinstance(q, IntegratorState):
        return q.r
    return np.asarray(q, dtype=float).reshape(-1, 3)[0]


def barrier_value(q_i, q_j, geom: SafetyGeometry) -> float:
    """Accepts bare positions as well as derivative stacks."""
    d = (_position(q_i) - _position(q_j)) * geom.scale
    if geom.shape == "rectangle":
        return float(np.sum(d**4) - geom.D_s**4)
    n = geom.n
    return float((d[0] ** 2 + d[1] ** 2) ** (n / 2) + d[2] ** n - geom.D_s**n)


def _rect_eta(d: np.ndarray, D_s: float) -> np.ndarray:
    x, dx, ddx, dddx = d
    return np.array([
        np.sum(x**4) - D_s**4,
        np.sum(4 * x**3 * dx),
        np.sum(12 * x**2 * dx**2 + 4 * x**3 * ddx),
        np.sum(24 * x * dx**3 + 36 * x**2 * dx * ddx + 4 * x**3 * dddx),
    ])


def _rect_drift4(d: np.ndarray) -> float:
    """Part of h'''' that does not depend on the snap."""
    x, dx, ddx, dddx = d
    return float(np.sum(24 * dx**4 + 144 * x * dx**2 * ddx + 36 * x**2 * ddx**2 + 48 * x**2 * dx * dddx))


def eta(q_i, q_j, geom: SafetyGeometry) -> EtaVector:
    """Barrier value and its first three derivatives along the drift."""
    d = _relative(q_i, q_j, geom)
    if geom.shape == "rectangle":
        vals = _rect_eta(d, geom.D_s)
    else:
        vals = _cylinder_derivs(np.vstack([d, np.zeros(3)]), geom)[:4]
    return EtaVector(*(float(x) for x in vals))


def _gradient(d0: np.ndarray, geom: SafetyGeometry) -> np.ndarray:
    """dh/d(r_i) in world coordinates."""
    if geom.shape == "rectangle":
        g = 4 * d0**3
    else:
        n = geom.n
        rho2 = d0[0] ** 2 + d0[1] ** 2
        radial = n * rho2 ** (n // 2 - 1)
        g = np.array([radial * d0[0], radial * d0[1], n * d0[2] ** (n - 1)])
    return g * geom.scale


def _row(q_i, q_j, geom: SafetyGeometry, k: np.ndarray):
    d = _relative(q_i, q_j, geom)
    if geom.shape == "rectangle":
        eta_vals = _rect_eta(d, geom.D_s)
        drift4 = _rect_drift4(d)
    else:
        derivs = _cylinder_derivs(np.vstack([d, np.zeros(3)]), geom)
        eta_vals, drift4 = derivs[:4], float(derivs[4])
    grad = _gradient(d[0], geom)
    b = float(k @ eta_vals + drift4)
    return grad, b, eta_vals


def constraint_row(q_i, q_j, geom: SafetyGeometry, gains: GainRow, m: int,
                   i: int = 0, j: int = 1) -> BarrierConstraint:
    """ECBF row for pair ``(i, j)`` embedded in a ``3m``-wide aggregate snap.

    ``h'''' = -A v + b - k . eta`` holds identically in ``v``, so the barrier
    condition ``h'''' + k . eta >= 0`` is ``A v <= b``.
    """
    if i == j:
        raise ValueError("a pair needs two distinct vehicles")
    if not (0 <= i < m and 0 <= j < m):
        raise ValueError(f"pair {(i, j)} out of range for m={m}")
    if np.array_equal(_stack(q_i)[0], _stack(q_j)[0]):
        raise DegenerateGeometryError((i, j))
    grad, b, eta_vals = _row(q_i, q_j, geom, np.asarray(gains.k))
    if not np.any(grad):
        raise DegenerateGeometryError((i, j))
    A = np.zeros(3 * m)
    A[3 * i:3 * i + 3] = -grad
    A[3 * j:3 * j + 3] = grad
    A.setflags(write=False)
    return BarrierConstraint(pair=(i, j), A=A, b=b, eta=EtaVector(*(float(x) for x in eta_vals)))


def assemble_certificates(states: Sequence, geom: SafetyGeometry, gains: GainRow) -> list:
    """All pairwise rows, ordered lexicographically in ``(i, j)`` with ``i < j``."""
    m = len(states)
    return [constraint_row(states[i], states[j], geom, gains, m, i, j)
            for i, j in combinations(range(m), 2)]


def certificate_matrices(states: Sequence, geom: SafetyGeometry, gains: GainRow):
    """Dense ``(A, b, pairs)`` form of :func:`assemble_certificates`."""
    rows = assemble_certificates(states, geom, gains)
    m = len(states)
    if not rows:
        return np.zeros((0, 3 * m)), np.zeros(0), []
    return np.vstack([r.A for r in rows]), np.array([r.b for r in rows]), [r.pair for r in rows]


def output_coefficients(poles) -> np.ndarray:
    """Rows express y_0..y_3 as linear combinations of eta.

    y_i = (d/dt + p_i) y_{i-1}, so the coefficient vector is shifted one slot
    (differentiation) and p_i times the previous one is added.
    """
    coeffs = np.zeros((4, 4))
    coeffs[0, 0] = 1.0
    for i in range(1, 4):
        coeffs[i, 1:] = coeffs[i - 1, :-1]
        coeffs[i] += poles[i - 1] * coeffs[i - 1]
    return coeffs


def check_initial_conditions(states: Sequence, geom: SafetyGeometry, gains: GainRow) -> InitialConditionReport:
    coeffs = output_coefficients(gains.poles)
    pairs = tuple(combinations(range(len(states)), 2))
    y = np.array([coeffs @ eta(states[i], states[j], geom).as_array() for i, j in pairs]).reshape(-1, 4)
    return InitialConditionReport(pairs=pairs, y=y, passed=bool(np.all(y >= 0)))
