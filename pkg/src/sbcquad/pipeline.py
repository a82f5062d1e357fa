"""Closed-loop safe trajectory generation.

Per control step: virtual clocks -> reference samples -> pole-placement
tracking snap -> pairwise certificates -> QP rectification -> forward Euler.
The rectified flat trace is then pushed through the flatness map and audited
against actuator limits; on failure the reference can be re-run with a
larger parameterisation gain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .barrier import barrier_value, certificate_matrices
from .flatness import (AuditReport, FlatSample, FlatnessSingularityError, actuator_audit,
                       flat_to_state)
from .lindyn import GainRow, IntegratorState, euler_step_stack
from .qp import RectificationProblem, Rectifier, RectifierFault
from .reference import clock_rate
from .scenarios import ScenarioConfig

log = logging.getLogger(__name__)

GOAL_TOL = 0.05


class SimulationAborted(RuntimeError):
    """The rectifier faulted; ``trace`` holds every step recorded so far."""

    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)


def nominal_control(q, ref, gains: GainRow) -> np.ndarray:
    """Tracking snap ``r_ref'''' - k . (q - q_ref)``, applied per axis."""
    qs = q.stack() if isinstance(q, IntegratorState) else np.asarray(q, dtype=float).reshape(4, 3)
    rs = ref.stack() if isinstance(ref, FlatSample) else np.asarray(ref, dtype=float).reshape(5, 3)
    return rs[4] - np.asarray(gains.k) @ (qs - rs[:4])


@dataclass
class WorldState:
    step: int
    stacks: np.ndarray  # (m, 4, 3)
    s: np.ndarray  # (m,) virtual times
    rectifier: Rectifier

    @classmethod
    def initial(cls, config: ScenarioConfig) -> "WorldState":
        stacks = np.stack([q.stack() for q in config.initial_states])
        return cls(0, stacks, np.zeros(config.m), Rectifier(warm_start=config.warm_start))


@dataclass
class StepRecord:
    t: float
    stacks: np.ndarray
    ref_pos: np.ndarray
    vhat: np.ndarray
    vstar: np.ndarray
    s: np.ndarray
    sdot: np.ndarray
    h: np.ndarray
    slack: np.ndarray
    slack_nominal: np.ndarray
    active: np.ndarray
    kkt: float
    relaxed: bool


def run_step(world: WorldState, config: ScenarioConfig, gains: Optional[GainRow] = None):
    """Advance the team by one control period; returns ``(new_world, record)``."""
    gains = gains or config.gains
    m, dt = config.m, config.dt
    refs_now = np.empty((m, 5, 3))
    sdot = np.empty(m)
    for i, ref in enumerate(config.references):
        base = ref(world.s[i])
        sdot[i] = clock_rate(config.ks, world.stacks[i, 0] - base[0])
        refs_now[i] = base * (sdot[i] ** np.arange(5))[:, None]

    vhat = np.concatenate([nominal_control(world.stacks[i], refs_now[i], gains) for i in range(m)])
    A, b, pairs = certificate_matrices(list(world.stacks), config.geometry, gains)
    problem = RectificationProblem(vhat, A, b, config.snap_bound, pairs)
    result = world.rectifier.solve(problem)
    vstar = result.v

    active = np.zeros(len(pairs), dtype=bool)
    active[result.active] = True
    h = np.array([barrier_value(world.stacks[i], world.stacks[j], config.geometry) for i, j in pairs])
    record = StepRecord(
        t=world.step * dt,
        stacks=world.stacks.copy(),
        ref_pos=refs_now[:, 0].copy(),
        vhat=vhat.reshape(m, 3),
        vstar=vstar.reshape(m, 3),
        s=world.s.copy(),
        sdot=sdot,
        h=h,
        slack=b - A @ vstar if len(pairs) else np.zeros(0),
        slack_nominal=b - A @ vhat if len(pairs) else np.zeros(0),
        active=active,
        kkt=result.kkt_residual,
        relaxed=result.relaxed_bounds,
    )
    new_world = WorldState(
        step=world.step + 1,
        stacks=euler_step_stack(world.stacks, vstar.reshape(m, 3), dt),
        s=world.s + dt * sdot,
        rectifier=world.rectifier,
    )
    return new_world, record


@dataclass
class SimulationTrace:
    config: ScenarioConfig
    t: np.ndarray
    states: np.ndarray  # (N, m, 4, 3)
    ref_pos: np.ndarray  # (N, m, 3)
    vhat: np.ndarray  # (N, m, 3)
    vstar: np.ndarray
    s: np.ndarray  # (N, m)
    sdot: np.ndarray
    pairs: list
    h: np.ndarray  # (N, P)
    slack: np.ndarray
    slack_nominal: np.ndarray
    active: np.ndarray
    kkt: np.ndarray  # (N,)
    relaxed: np.ndarray
    final_states: np.ndarray  # (m, 4, 3)
    tilt: np.ndarray = None  # (N, m) rad
    thrust_ratio: np.ndarray = None
    euler: np.ndarray = None  # (N, m, 3)

    @property
    def n_steps(self) -> int:
        return self.t.shape[0]

    @property
    def m(self) -> int:
        return self.states.shape[1]

    def flat_samples(self, i: int) -> list:
        """Flat trace of vehicle ``i``: integrator state plus the applied snap."""
        return [FlatSample.from_stack(np.vstack([self.states[k, i], self.vstar[k, i]]))
                for k in range(self.n_steps)]

    def min_h(self):
        """(value, step, pair) of the smallest barrier value, final state included."""
        if not self.pairs:
            return np.inf, None, None
        final = np.array([barrier_value(self.final_states[i], self.final_states[j], self.config.geometry)
                          for i, j in self.pairs])
        allh = np.vstack([self.h, final[None, :]])
        k, p = np.unravel_index(int(np.argmin(allh)), allh.shape)
        return float(allh[k, p]), int(k), self.pairs[p]

    def goal_errors(self) -> np.ndarray:
        out = np.empty(self.m)
        for i, ref in enumerate(self.config.references):
            target = ref(np.inf)[0] if np.isfinite(ref.duration) else ref(self.s[-1, i])[0]
            out[i] = np.linalg.norm(self.final_states[i, 0] - target)
        return out

    def completion_times(self) -> np.ndarray:
        """Earliest time after which each vehicle stays within GOAL_TOL of its terminal point."""
        out = np.full(self.m, np.nan)
        for i, ref in enumerate(self.config.references):
            if not np.isfinite(ref.duration):
                continue
            target = ref(np.inf)[0]
            err = np.linalg.norm(self.states[:, i, 0] - target, axis=1)
            bad = np.nonzero(err >= GOAL_TOL)[0]
            if bad.size == 0:
                out[i] = 0.0
            elif bad[-1] + 1 < self.n_steps:
                out[i] = self.t[bad[-1] + 1]
        return out


def _collect(config: ScenarioConfig, records: list, final: np.ndarray) -> SimulationTrace:
    pairs = list(combinations(range(config.m), 2))
    P = len(pairs)

    def arr(name, shape_tail, dtype=float):
        if not records:
            return np.zeros((0,) + shape_tail, dtype=dtype)
        return np.array([getattr(r, name) for r in records], dtype=dtype).reshape((len(records),) + shape_tail)

    m = config.m
    return SimulationTrace(
        config=config,
        t=arr("t", ()),
        states=arr("stacks", (m, 4, 3)),
        ref_pos=arr("ref_pos", (m, 3)),
        vhat=arr("vhat", (m, 3)),
        vstar=arr("vstar", (m, 3)),
        s=arr("s", (m,)),
        sdot=arr("sdot", (m,)),
        pairs=pairs,
        h=arr("h", (P,)),
        slack=arr("slack", (P,)),
        slack_nominal=arr("slack_nominal", (P,)),
        active=arr("active", (P,), bool),
        kkt=arr("kkt", ()),
        relaxed=arr("relaxed", (), bool),
        final_states=final,
    )


def _attach_flatness(trace: SimulationTrace):
    N, m = trace.n_steps, trace.m
    tilt = np.full((N, m), np.nan)
    ratio = np.full((N, m), np.nan)
    euler = np.full((N, m, 3), np.nan)
    params = trace.config.params
    for k in range(N):
        for i in range(m):
            acc = trace.states[k, i, 2]
            ratio[k, i] = np.linalg.norm(acc + params.gravity * params.up) / params.gravity
            try:
                st = flat_to_state(FlatSample(trace.states[k, i, 0], trace.states[k, i, 1], acc,
                                              trace.states[k, i, 3], trace.vstar[k, i]), params)
            except FlatnessSingularityError:
                continue
            tilt[k, i] = st.tilt
            euler[k, i] = st.euler
    trace.tilt, trace.thrust_ratio, trace.euler = tilt, ratio, euler


def simulate(config: ScenarioConfig) -> SimulationTrace:
    gains = config.gains
    world = WorldState.initial(config)
    records = []
    for _ in range(config.n_steps):
        try:
            world, rec = run_step(world, config, gains)
        except RectifierFault as exc:
            trace = _collect(config, records, world.stacks)
            raise SimulationAborted(f"step {world.step}: {exc}", trace) from exc
        records.append(rec)
    trace = _collect(config, records, world.stacks)
    _attach_flatness(trace)
    return trace


@dataclass
class TeamAudit:
    vehicles: list  # AuditReport per vehicle

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.vehicles)

    @property
    def max_tilt(self) -> float:
        return max(a.max_tilt for a in self.vehicles)

    @property
    def max_thrust_ratio(self) -> float:
        return max(a.max_thrust_ratio for a in self.vehicles)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_tilt_deg": float(np.rad2deg(self.max_tilt)),
            "max_thrust_ratio": self.max_thrust_ratio,
            "vehicles": [a.to_dict() for a in self.vehicles],
        }


def audit_trace(trace: SimulationTrace, limits=None) -> TeamAudit:
    cfg = trace.config
    limits = limits or cfg.limits
    return TeamAudit([actuator_audit(trace.flat_samples(i), cfg.params, limits, dt=cfg.dt)
                      for i in range(trace.m)])


@dataclass
class Attempt:
    ks: float
    trace: SimulationTrace
    audit: TeamAudit


@dataclass
class ScenarioResult:
    attempts: list = field(default_factory=list)
    best: int = 0

    @property
    def trace(self) -> SimulationTrace:
        return self.attempts[self.best].trace

    @property
    def audit(self) -> TeamAudit:
        return self.attempts[self.best].audit

    @property
    def feasible(self) -> bool:
        return self.audit.passed


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    """Simulate, audit and (optionally) re-run with a larger clock gain until the audit passes."""
    result = ScenarioResult()
    cfg = config
    while True:
        trace = simulate(cfg)
        audit = audit_trace(trace)
        result.attempts.append(Attempt(cfg.ks, trace, audit))
        log.info("ks=%g audit %s (tilt %.1f deg, thrust %.2f)", cfg.ks, "pass" if audit.passed else "fail",
                 np.rad2deg(audit.max_tilt), audit.max_thrust_ratio)
        if audit.passed or not cfg.retune.enabled or len(result.attempts) > cfg.retune.max_retries:
            break
        cfg = cfg.with_ks(cfg.retune.next_ks(cfg.ks))
    passing = [k for k, a in enumerate(result.attempts) if a.audit.passed]
    if passing:
        result.best = passing[0]
    else:
        result.best = min(range(len(result.attempts)),
                          key=lambda k: (result.attempts[k].audit.max_tilt, result.attempts[k].audit.max_thrust_ratio))
    return result
