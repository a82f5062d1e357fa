"""Randomised property checks: certificate feasibility, Lie-derivative algebra, QP optimality.

Every trial draws from its own child of a single ``SeedSequence``, so a
report depends only on ``(seed, trials)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .barrier import SafetyGeometry, barrier_value, constraint_row
from .lindyn import GainRow, place_poles
from .qp import RectificationProblem, feasibility_probe, solve, solve_by_enumeration

PASS, FAIL, REJECTED = "pass", "fail", "rejected-precondition"

# 4th-derivative central stencil, O(h^4)
_FD4 = np.array([-1 / 6, 2.0, -13 / 2, 28 / 3, -13 / 2, 2.0, -1 / 6])
_FD4_OFFSETS = np.arange(-3, 4)

LIE_RTOL = 1e-3
QP_TOL = 1e-6


def random_geometry(rng: np.random.Generator) -> SafetyGeometry:
    if rng.random() < 0.75:
        return SafetyGeometry(D_s=float(rng.uniform(0.1, 0.5)), c=float(rng.uniform(1.0, 3.0)))
    return SafetyGeometry(D_s=float(rng.uniform(0.1, 0.5)), c=float(rng.uniform(1.0, 3.0)),
                          shape="cylinder", n=int(rng.choice([2, 4, 6])))


def random_gains(rng: np.random.Generator) -> GainRow:
    return place_poles(np.sort(rng.uniform(0.5, 10.0, 4)))


def random_team(rng: np.random.Generator, m: int, geom: SafetyGeometry, spread: float = 1.5,
                max_tries: int = 1000) -> np.ndarray:
    """(m, 4, 3) stacks with pairwise ``h > 0``; higher derivatives are unconstrained."""
    for _ in range(max_tries):
        stacks = rng.normal(scale=[[spread], [1.0], [2.0], [4.0]], size=(m, 4, 3))
        if all(barrier_value(stacks[i], stacks[j], geom) > 0 for i, j in combinations(range(m), 2)):
            return stacks
    raise RuntimeError("could not draw a non-colliding team")


@dataclass
class TrialResult:
    check: str
    index: int
    status: str
    detail: float = 0.0
    instance: Optional[dict] = None


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, SafetyGeometry):
        return {"D_s": x.D_s, "c": x.c, "shape": x.shape, "n": x.n}
    if isinstance(x, GainRow):
        return {"poles": list(x.poles), "k": list(x.k)}
    return x


def feasibility_trial(stacks: np.ndarray, geom: SafetyGeometry, gains: GainRow, index: int = 0) -> TrialResult:
    instance = {"stacks": stacks, "geometry": geom, "gains": gains}
    m = stacks.shape[0]
    for i, j in combinations(range(m), 2):
        if not barrier_value(stacks[i], stacks[j], geom) > 0:
            return TrialResult("feasibility", index, REJECTED, 0.0, instance)
    w = feasibility_probe(list(stacks), geom, gains)
    return TrialResult("feasibility", index, PASS if w.found else FAIL, float(w.margin), instance)


def fourth_derivative_fd(q_i: np.ndarray, q_j: np.ndarray, v_i, v_j, geom: SafetyGeometry,
                         step: float = 1e-2) -> float:
    """d^4 h / dt^4 at t = 0 along the exact polynomial flow under constant snaps."""
    fact = np.array([1.0, 1.0, 2.0, 6.0, 24.0])

    def pos(q, v, t):
        coeffs = np.vstack([q, v])
        return (t ** np.arange(5) / fact) @ coeffs

    vals = np.array([barrier_value(pos(q_i, v_i, o * step), pos(q_j, v_j, o * step), geom)
                     for o in _FD4_OFFSETS])
    return float(_FD4 @ vals / step**4)


def lie_trial(rng: np.random.Generator, index: int = 0) -> TrialResult:
    geom = random_geometry(rng)
    gains = random_gains(rng)
    stacks = random_team(rng, 2, geom, spread=1.0)
    v = rng.normal(scale=5.0, size=6)
    row = constraint_row(stacks[0], stacks[1], geom, gains, m=2)
    eta = row.eta.as_array()
    k = np.asarray(gains.k)
    analytic = float(-row.A @ v + row.b - k @ eta)
    fd = fourth_derivative_fd(stacks[0], stacks[1], v[:3], v[3:], geom)
    scale = max(abs(analytic), 1e-3 * (abs(row.A @ v) + abs(row.b) + abs(k @ eta)))
    err = abs(fd - analytic) / scale
    instance = {"stacks": stacks, "snap": v, "geometry": geom, "gains": gains,
                "analytic": analytic, "finite_difference": fd}
    return TrialResult("lie_derivative", index, PASS if err <= LIE_RTOL else FAIL, err, instance)


def random_qp(rng: np.random.Generator):
    """Small feasible QP: ``n <= 9`` variables, ``p <= 5`` rows, some of them active."""
    n = 3 * int(rng.integers(1, 4))
    p = int(rng.integers(1, 6))
    A = rng.normal(size=(p, n))
    x0 = rng.normal(size=n)
    b = A @ x0 + rng.uniform(0.0, 1.0, p)
    vhat = x0 + rng.normal(scale=3.0, size=n)
    return vhat, A, b


def qp_trial(rng: np.random.Generator, index: int = 0) -> TrialResult:
    vhat, A, b = random_qp(rng)
    got = solve(RectificationProblem(vhat, A, b)).v
    ref = solve_by_enumeration(vhat, A, b)
    err = float(np.max(np.abs(got - ref)))
    instance = {"vhat": vhat, "A": A, "b": b, "solve": got, "enumeration": ref}
    return TrialResult("qp_oracle", index, PASS if err <= QP_TOL else FAIL, err, instance)


@dataclass
class VerifyReport:
    seed: int
    trials: int
    results: list = field(default_factory=list)

    def counts(self, check: str) -> dict:
        out = {PASS: 0, FAIL: 0, REJECTED: 0}
        for r in self.results:
            if r.check == check:
                out[r.status] += 1
        return out

    @property
    def checks(self) -> list:
        return list(dict.fromkeys(r.check for r in self.results))

    @property
    def failures(self) -> list:
        return [r for r in self.results if r.status == FAIL]

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "trials": self.trials,
            "passed": self.passed,
            "checks": {c: self.counts(c) for c in self.checks},
            "failures": [failure_record(r) for r in self.failures],
        }

    def lines(self) -> list:
        out = [f"seed {self.seed}, {self.trials} trials per check"]
        for c in self.checks:
            n = self.counts(c)
            out.append(f"{c}: {n[PASS]} passed, {n[FAIL]} failed, {n[REJECTED]} rejected-precondition")
        out.append("PASS" if self.passed else "FAIL")
        return out


def failure_record(r: TrialResult) -> dict:
    inst = {k: _jsonable(v) for k, v in (r.instance or {}).items()}
    return {"check": r.check, "index": r.index, "detail": r.detail, "instance": inst}


def dumps_failure(r: TrialResult) -> str:
    return json.dumps(failure_record(r), sort_keys=True)


def colliding_team(rng: np.random.Generator, m: int, geom: SafetyGeometry) -> np.ndarray:
    stacks = random_team(rng, m, geom)
    stacks[1, 0] = stacks[0, 0]
    return stacks


def run_verify(seed: int = 0, trials: int = 1000, inject_collision: bool = False,
               m_range=(2, 6)) -> VerifyReport:
    children = np.random.SeedSequence(seed).spawn(3 * trials + 1)
    report = VerifyReport(seed, trials)
    for k in range(trials):
        rng = np.random.default_rng(children[k])
        geom = random_geometry(rng)
        gains = random_gains(rng)
        m = int(rng.integers(m_range[0], m_range[1] + 1))
        report.results.append(feasibility_trial(random_team(rng, m, geom), geom, gains, k))
    if inject_collision:
        rng = np.random.default_rng(children[-1])
        geom = random_geometry(rng)
        report.results.append(feasibility_trial(colliding_team(rng, 3, geom), geom, random_gains(rng), trials))
    for k in range(trials):
        report.results.append(lie_trial(np.random.default_rng(children[trials + k]), k))
    for k in range(trials):
        report.results.append(qp_trial(np.random.default_rng(children[2 * trials + k]), k))
    return report
