"""Endogenous transformation from flat outputs to quadrotor state and input.

Flat outputs are position and yaw, with yaw pinned to zero.  The world frame
is NED by default (``z`` down, gravity ``+g e_z``) and the body frame is FRD,
so the rotor thrust acts along ``-z_b``.  With ``z_up=True`` the world is ENU,
the body is FLU and thrust acts along ``+z_b``.  In both cases a hovering
vehicle has ``R = I``.

Attitude uses Z-Y-X Euler angles.  With yaw fixed, ``x_b`` is chosen
orthogonal to ``y_c = (0, 1, 0)``, which is exactly the Z-Y-X parametrisation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

GIMBAL_WARN_RAD = np.deg2rad(85.0)


class FlatnessSingularityError(ValueError):
    """The required specific thrust vanishes (free fall); attitude is undefined."""

    def __init__(self, message, index: Optional[int] = None):
        self.index = index
        super().__init__(message if index is None else f"sample {index}: {message}")


@dataclass(frozen=True)
class FlatSample:
    r: np.ndarray
    dr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ddr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dddr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ddddr: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("r", "dr", "ddr", "dddr", "ddddr"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            object.__setattr__(self, name, arr)
        if self.yaw != 0.0:
            raise ValueError("only zero yaw is supported")

    @classmethod
    def from_stack(cls, stack) -> "FlatSample":
        stack = np.asarray(stack, dtype=float).reshape(5, 3)
        return cls(*stack)

    def stack(self) -> np.ndarray:
        return np.vstack([self.r, self.dr, self.ddr, self.dddr, self.ddddr])


@dataclass(frozen=True)
class VehicleParams:
    """Defaults are Crazyflie-2.0-like values."""

    mass: float = 0.033
    inertia: np.ndarray = field(default_factory=lambda: np.diag([1.4e-5, 1.4e-5, 2.2e-5]))
    gravity: float = 9.81
    z_up: bool = False

    def __post_init__(self):
        J = np.array(self.inertia, dtype=float).reshape(3, 3)
        object.__setattr__(self, "inertia", J)
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not self.gravity > 0:
            raise ValueError(f"gravity must be positive, got {self.gravity}")
        if not np.allclose(J, J.T) or np.any(np.linalg.eigvalsh(J) <= 0):
            raise ValueError("inertia must be symmetric positive definite")

    @property
    def up(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0 if self.z_up else -1.0])

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


@dataclass(frozen=True)
class FullState:
    position: np.ndarray
    velocity: np.ndarray
    euler: np.ndarray  # (phi, theta, psi)
    omega: np.ndarray  # body rates (p, q, r)
    R: np.ndarray
    thrust_axis: np.ndarray  # unit world vector the thrust acts along
    tilt: float
    gimbal_warning: bool = False


@dataclass(frozen=True)
class ControlInput:
    thrust: float
    torque: np.ndarray
    omega_dot: np.ndarray


@dataclass
class _Kinematics:
    n: float
    b3: np.ndarray
    R: np.ndarray
    euler: np.ndarray
    omega: np.ndarray
    zdot: np.ndarray
    s: float


def _kinematics(sample: FlatSample, params: VehicleParams) -> _Kinematics:
    up = params.up
    t = sample.ddr + params.gravity * up
    n = float(np.linalg.norm(t))
    if n <= 1e-3 * params.gravity:
        raise FlatnessSingularityError(f"specific thrust {n:.3e} m/s^2 is below the free-fall threshold")
    b3 = t / n
    s = 1.0 if params.z_up else -1.0
    z_b = s * b3
    x_b = np.cross([0.0, 1.0, 0.0], z_b)
    x_b /= np.linalg.norm(x_b)
    y_b = np.cross(z_b, x_b)
    R = np.column_stack([x_b, y_b, z_b])

    phi = np.arctan2(R[2, 1], R[2, 2])
    theta = -np.arcsin(np.clip(R[2, 0], -1.0, 1.0))
    psi = np.arctan2(R[1, 0], R[0, 0])

    u = sample.dddr / n
    zdot = s * (u - b3 * (b3 @ u))
    q = x_b @ zdot
    p = -(y_b @ zdot)
    # zero yaw rate under Z-Y-X: q sin(phi) + r cos(phi) = 0
    r = -q * np.tan(phi)
    return _Kinematics(n, b3, R, np.array([phi, theta, psi]), np.array([p, q, r]), zdot, s)


def flat_to_state(sample: FlatSample, params: VehicleParams = VehicleParams()) -> FullState:
    k = _kinematics(sample, params)
    tilt = float(np.arccos(np.clip(k.b3 @ params.up, -1.0, 1.0)))
    warn = bool(abs(k.euler[1]) > GIMBAL_WARN_RAD)
    return FullState(
        position=sample.r.copy(),
        velocity=sample.dr.copy(),
        euler=k.euler,
        omega=k.omega,
        R=k.R,
        thrust_axis=k.b3,
        tilt=tilt,
        gimbal_warning=warn,
    )


def flat_to_input(sample: FlatSample, params: VehicleParams = VehicleParams()) -> ControlInput:
    k = _kinematics(sample, params)
    x_b, y_b = k.R[:, 0], k.R[:, 1]
    p, q, r = k.omega
    phi = k.euler[0]

    u = sample.dddr / k.n
    w = k.b3 @ u
    b3dot = u - k.b3 * w
    udot = sample.ddddr / k.n - u * w
    wdot = b3dot @ u + k.b3 @ udot
    zddot = k.s * (udot - b3dot * w - k.b3 * wdot)

    qdot = x_b @ zddot - p * r
    pdot = q * r - y_b @ zddot
    rdot = -qdot * np.tan(phi) - q * p / np.cos(phi) ** 2
    omega_dot = np.array([pdot, qdot, rdot])

    J = params.inertia
    torque = J @ omega_dot + np.cross(k.omega, J @ k.omega)
    return ControlInput(thrust=params.mass * k.n, torque=torque, omega_dot=omega_dot)


def newton_residual(sample: FlatSample, params: VehicleParams = VehicleParams()) -> float:
    """``|m r'' - m g_vec - f_z b3|`` for the recovered thrust; zero by construction."""
    state = flat_to_state(sample, params)
    f_z = flat_to_input(sample, params).thrust
    gvec = -params.gravity * params.up
    return float(np.linalg.norm(params.mass * sample.ddr - params.mass * gvec - f_z * state.thrust_axis))


@dataclass(frozen=True)
class ActuatorLimits:
    max_tilt: float = np.deg2rad(45.0)  # rad
    max_thrust_ratio: float = 2.0


@dataclass
class AuditReport:
    n_samples: int
    max_tilt: float  # rad
    max_tilt_index: int
    max_thrust_ratio: float
    max_thrust_index: int
    passed: bool
    failures: list = field(default_factory=list)
    singular_index: Optional[int] = None
    dt: Optional[float] = None

    @property
    def max_tilt_deg(self) -> float:
        return float(np.rad2deg(self.max_tilt))

    def to_dict(self) -> dict:
        out = {
            "n_samples": self.n_samples,
            "max_tilt_deg": self.max_tilt_deg,
            "max_tilt_index": self.max_tilt_index,
            "max_thrust_ratio": self.max_thrust_ratio,
            "max_thrust_index": self.max_thrust_index,
            "passed": self.passed,
            "failures": list(self.failures),
            "singular_index": self.singular_index,
        }
        if self.dt is not None:
            out["max_tilt_time"] = self.max_tilt_index * self.dt
            out["max_thrust_time"] = self.max_thrust_index * self.dt
        return out


def actuator_audit(trace: Sequence[FlatSample], params: VehicleParams = VehicleParams(),
                   limits: ActuatorLimits = ActuatorLimits(), dt: Optional[float] = None) -> AuditReport:
    """Worst-case tilt and thrust ratio over a uniformly sampled flat trace."""
    if len(trace) == 0:
        raise ValueError("cannot audit an empty trace")
    tilts = np.empty(len(trace))
    ratios = np.empty(len(trace))
    for idx, sample in enumerate(trace):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                state = flat_to_state(sample, params)
        except FlatnessSingularityError as exc:
            return AuditReport(len(trace), float("nan"), idx, float("nan"), idx, False,
                               [f"singularity at sample {idx}: {exc}"], singular_index=idx, dt=dt)
        tilts[idx] = state.tilt
        ratios[idx] = np.linalg.norm(sample.ddr + params.gravity * params.up) / params.gravity
    it, ir = int(np.argmax(tilts)), int(np.argmax(ratios))
    failures = []
    if tilts[it] > limits.max_tilt:
        failures.append(f"max_tilt {np.rad2deg(tilts[it]):.2f} deg > {np.rad2deg(limits.max_tilt):.2f} deg at sample {it}")
    if ratios[ir] > limits.max_thrust_ratio:
        failures.append(f"max_thrust_ratio {ratios[ir]:.3f} > {limits.max_thrust_ratio:.3f} at sample {ir}")
    return AuditReport(len(trace), float(tilts[it]), it, float(ratios[ir]), ir, not failures, failures, dt=dt)
