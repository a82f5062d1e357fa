"""Minimally invasive rectification of the aggregate snap command.

Solves::

    min_v  sum_i |v_i - vhat_i|^2
    s.t.   A_ij v <= b_ij          for every pair i < j
           |v_i|_inf <= alpha_i    (optional)

with a dual active-set method (Goldfarb-Idnani) specialised to the identity
Hessian.  The iteration starts from the unconstrained minimiser ``vhat`` and
only ever adds violated rows, so a safe nominal command is returned untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from .barrier import SafetyGeometry, certificate_matrices
from .lindyn import GainRow

log = logging.getLogger(__name__)

FEAS_TOL = 1e-8
KKT_TOL = 1e-6
_ADD_TOL = 1e-10  # violation threshold for adding a row during the iteration
_MAX_ITER = 500


class InfeasibleProblemError(RuntimeError):
    pass


class RectifierFault(RuntimeError):
    """The barrier-only problem was infeasible: upstream states must be colliding."""


@dataclass
class RectificationProblem:
    vhat: np.ndarray
    A: np.ndarray = None
    b: np.ndarray = None
    snap_bound: Optional[object] = None  # scalar or per-vehicle sequence
    pairs: Optional[list] = None

    def __post_init__(self):
        self.vhat = np.asarray(self.vhat, dtype=float).reshape(-1)
        n = self.vhat.shape[0]
        self.A = np.zeros((0, n)) if self.A is None else np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.zeros(0) if self.b is None else np.asarray(self.b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.shape[0]} entries")
        if self.snap_bound is not None:
            if n % 3:
                raise ValueError("snap bounds need a 3m-dimensional command")
            alpha = np.broadcast_to(np.asarray(self.snap_bound, dtype=float), (n // 3,))
            if np.any(alpha <= 0):
                raise ValueError("snap bounds must be positive")
            self.snap_bound = np.array(alpha)
        if self.pairs is None:
            self.pairs = list(range(self.A.shape[0]))

    @classmethod
    def from_constraints(cls, vhat, constraints: Sequence, snap_bound=None):
        vhat = np.asarray(vhat, dtype=float).reshape(-1)
        if constraints:
            A = np.vstack([c.A for c in constraints])
            b = np.array([c.b for c in constraints])
        else:
            A, b = None, None
        return cls(vhat, A, b, snap_bound, [c.pair for c in constraints])

    def box_rows(self):
        n = self.vhat.shape[0]
        alpha = np.repeat(self.snap_bound, 3)
        return np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([alpha, alpha])


@dataclass
class RectifiedControl:
    v: np.ndarray
    active: list  # indices of barrier rows in the active set
    multipliers: np.ndarray  # per barrier row, for 2(v - vhat) + sum lam A^T = 0
    kkt_residual: float
    relaxed_bounds: bool = False
    worst_bound_violation: float = 0.0
    modified: bool = False
    iterations: int = 0

    @property
    def active_pairs(self):
        return self.active


def _directions(N: np.ndarray, n_p: np.ndarray):
    """Primal step ``z`` (n_p projected off the active normals) and dual step ``r``."""
    if N.shape[1] == 0:
        return n_p.copy(), np.zeros(0)
    Q, Rm = np.linalg.qr(N)
    r = np.linalg.solve(Rm, Q.T @ n_p)
    z = n_p - Q @ (Q.T @ n_p)
    return z, r


def _goldfarb_idnani(x0: np.ndarray, C: np.ndarray, e: np.ndarray):
    """min 1/2|x - x0|^2 s.t. C x >= e.  Returns (x, active rows, their multipliers, iterations)."""
    x = x0.copy()
    act: list = []
    u = np.zeros(0)
    iters = 0
    while True:
        s = C @ x - e
        if act:
            s_masked = s.copy()
            s_masked[act] = np.inf
        else:
            s_masked = s
        p = int(np.argmin(s_masked)) if s.size else -1
        if p < 0 or s_masked[p] >= -_ADD_TOL:
            return x, act, u, iters
        n_p = C[p]
        u_p = 0.0
        while True:
            iters += 1
            if iters > _MAX_ITER:
                raise InfeasibleProblemError("active-set iteration limit reached")
            N = C[act].T if act else np.zeros((x.size, 0))
            z, r = _directions(N, n_p)
            t1, l = np.inf, -1
            for jdx, rj in enumerate(r):
                if rj > 1e-14:
                    ratio = u[jdx] / rj
                    if ratio < t1:
                        t1, l = ratio, jdx
            zn = z @ n_p
            if np.linalg.norm(z) > 1e-12 * np.linalg.norm(n_p) and zn > 0:
                t2 = -(n_p @ x - e[p]) / zn
            else:
                t2 = np.inf
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise InfeasibleProblemError(f"row {p} cannot be satisfied together with rows {act}")
            if not np.isfinite(t2):
                u = u - t1 * r
                u_p += t1
                act.pop(l)
                u = np.delete(u, l)
                continue
            t = min(t1, t2)
            x = x + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                act.append(p)
                u = np.append(u, u_p)
                break
            act.pop(l)
            u = np.delete(u, l)


def _equality_projection(x0, C, e, rows):
    """Projection of x0 onto {C_W x = e_W}; returns (x, u) or None if rank deficient."""
    Cw = C[rows]
    G = Cw @ Cw.T
    try:
        u = np.linalg.solve(G, e[rows] - Cw @ x0)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(u)):
        return None
    return x0 + Cw.T @ u, u


def _refine(x, u, C, e, rows, passes: int = 2):
    """Iterative refinement of an equality projection.

    When ``vhat`` is large the active rows are only met up to
    ``eps * |vhat|``; re-projecting the residual evaluated at ``x`` recovers
    accuracy relative to ``|x|`` instead.
    """
    if not rows:
        return x, u
    Cw = C[rows]
    G = Cw @ Cw.T
    for _ in range(passes):
        resid = Cw @ x - e[rows]
        corr = np.linalg.solve(G, resid)
        x = x - Cw.T @ corr
        u = u - corr
    return x, u


def kkt_residual(v, vhat, A, b, lam, box=None, lam_box=None) -> float:
    """Largest violation among stationarity, primal/dual feasibility and complementarity."""
    grad = 2 * (v - vhat)
    slack = b - A @ v if A.size else np.zeros(0)
    terms = [0.0]
    if A.size:
        grad = grad + A.T @ lam
        terms += [np.max(-slack, initial=0.0), np.max(-lam, initial=0.0), np.max(np.abs(lam * slack), initial=0.0)]
    if box is not None:
        Ab, bb = box
        sb = bb - Ab @ v
        grad = grad + Ab.T @ lam_box
        terms += [np.max(-sb, initial=0.0), np.max(-lam_box, initial=0.0),
                  np.max(np.abs(lam_box * sb), initial=0.0)]
    terms.append(float(np.max(np.abs(grad), initial=0.0)))
    return float(max(terms))


class Rectifier:
    """Stateful solver holding the warm-start active set between calls."""

    def __init__(self, warm_start: bool = True):
        self.warm_start = warm_start
        self._last_active: Optional[tuple] = None

    def reset(self):
        self._last_active = None

    def solve(self, problem: RectificationProblem) -> RectifiedControl:
        try:
            return self._solve(problem, use_box=problem.snap_bound is not None)
        except InfeasibleProblemError:
            if problem.snap_bound is None:
                raise RectifierFault("barrier constraints are infeasible; states are colliding upstream")
        log.debug("snap bounds conflict with barrier rows; solving without bounds")
        try:
            out = self._solve(problem, use_box=False)
        except InfeasibleProblemError as exc:
            raise RectifierFault("barrier constraints are infeasible; states are colliding upstream") from exc
        out.relaxed_bounds = True
        alpha = np.repeat(problem.snap_bound, 3)
        out.worst_bound_violation = float(np.max(np.abs(out.v) - alpha, initial=0.0))
        return out

    def _solve(self, problem: RectificationProblem, use_box: bool) -> RectifiedControl:
        vhat, A, b = problem.vhat, problem.A, problem.b
        n_bar = A.shape[0]
        if use_box:
            Ab, bb = problem.box_rows()
            A_all, b_all = np.vstack([A, Ab]), np.concatenate([b, bb])
        else:
            A_all, b_all = A, b
        # C x >= e form
        C, e = -A_all, -b_all

        if np.all(A_all @ vhat <= b_all):
            v = vhat.copy()
            self._last_active = ()
            return self._package(problem, v, [], np.zeros(0), n_bar, use_box, 0)

        if self.warm_start and self._last_active:
            rows = [k for k in self._last_active if k < A_all.shape[0]]
            sol = _equality_projection(vhat, C, e, rows) if rows else None
            if sol is not None:
                x, u = sol
                if np.all(u >= 0) and np.all(C @ x - e >= -_ADD_TOL):
                    x, u = _refine(x, u, C, e, rows)
                    self._last_active = tuple(rows)
                    return self._package(problem, x, rows, u, n_bar, use_box, 0)

        x, act, u, iters = _goldfarb_idnani(vhat, C, e)
        order = np.argsort(act, kind="stable")
        act = [act[k] for k in order]
        u = u[order]
        x, u = _refine(x, u, C, e, act)
        self._last_active = tuple(act)
        return self._package(problem, x, act, u, n_bar, use_box, iters)

    @staticmethod
    def _package(problem, v, act, u, n_bar, use_box, iters) -> RectifiedControl:
        lam_all = np.zeros(n_bar + (6 * (problem.vhat.size // 3) if use_box else 0))
        lam_all[list(act)] = 2 * np.maximum(u, 0.0)
        lam = lam_all[:n_bar]
        box = problem.box_rows() if use_box else None
        res = kkt_residual(v, problem.vhat, problem.A, problem.b, lam,
                           box, lam_all[n_bar:] if use_box else None)
        return RectifiedControl(
            v=v,
            active=[k for k in act if k < n_bar],
            multipliers=lam,
            kkt_residual=res,
            modified=bool(act),
            iterations=iters,
        )


def solve(problem: RectificationProblem) -> RectifiedControl:
    """Cold-start solve of a single rectification problem."""
    return Rectifier(warm_start=False).solve(problem)


def solve_by_enumeration(vhat, A, b, tol: float = 1e-9) -> np.ndarray:
    """Reference solver: try every subset of rows as the active set.

    Exponential in the number of rows, intended for small problems only.
    Among candidate points satisfying all rows (within ``tol``) whose
    multipliers are non-negative, the one nearest ``vhat`` is returned.
    """
    vhat = np.asarray(vhat, dtype=float)
    A = np.asarray(A, dtype=float).reshape(-1, vhat.size)
    b = np.asarray(b, dtype=float).reshape(-1)
    best, best_cost = None, np.inf
    for size in range(0, min(A.shape[0], vhat.size) + 1):
        for rows in combinations(range(A.shape[0]), size):
            rows = list(rows)
            if rows:
                Aw = A[rows]
                G = Aw @ Aw.T
                if np.linalg.matrix_rank(G) < size:
                    continue
                mu = np.linalg.solve(G, Aw @ vhat - b[rows])
                if np.any(mu < -tol):
                    continue
                x = vhat - Aw.T @ mu
            else:
                x = vhat.copy()
            if np.all(A @ x <= b + tol * np.maximum(1.0, np.abs(b))):
                cost = float(np.sum((x - vhat) ** 2))
                if cost < best_cost:
                    best, best_cost = x, cost
    if best is None:
        raise InfeasibleProblemError("no subset of rows yields a feasible KKT point")
    return best


@dataclass
class FeasibilityWitness:
    v: np.ndarray
    margin: float  # min_k (b_k - A_k v) / |A_k|
    found: bool
    status: str = ""


def feasibility_probe(states: Sequence, geom: SafetyGeometry, gains: GainRow,
                      cap: float = 1.0) -> FeasibilityWitness:
    """Find a snap satisfying every barrier row strictly, via a linear program.

    Maximises the normalised common slack ``t`` (capped at ``cap``) subject to
    ``A_k v + t |A_k| <= b_k``.  A positive optimum is a strict witness.
    """
    from scipy.optimize import linprog

    A, b, _ = certificate_matrices(states, geom, gains)
    n = 3 * len(states)
    if A.shape[0] == 0:
        return FeasibilityWitness(np.zeros(n), np.inf, True, "no constraints")
    norms = np.linalg.norm(A, axis=1)
    An, bn = A / norms[:, None], b / norms
    c = np.zeros(n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.hstack([An, np.ones((A.shape[0], 1))]), b_ub=bn,
                  bounds=[(None, None)] * n + [(None, cap)], method="highs")
    if res.status != 0:
        return FeasibilityWitness(np.full(n, np.nan), -np.inf, False, res.message)
    v = res.x[:n]
    margin = float(np.min(bn - An @ v))
    return FeasibilityWitness(v, margin, margin > 0, res.message)
