import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from sbcquad.barrier import SafetyGeometry, barrier_value
from sbcquad.lindyn import place_poles
from sbcquad.qp import (InfeasibleProblemError, RectificationProblem, Rectifier, RectifierFault,
                        feasibility_probe, kkt_residual, solve, solve_by_enumeration)
from sbcquad.verify import random_qp, random_team


def dual_nnls_projection(vhat, A, b):
    """Projection of ``vhat`` onto ``{A v <= b}`` for full-row-rank ``A`` via the NNLS dual."""
    L = np.linalg.cholesky(A @ A.T)
    target = np.linalg.solve(L, A @ vhat - b)
    mu, _ = nnls(L.T, target)
    return vhat - A.T @ mu


def test_unconstrained_returns_nominal():
    vhat = np.array([1.0, -2.0, 3.0])
    out = solve(RectificationProblem(vhat))
    assert np.array_equal(out.v, vhat) and out.active == [] and not out.modified


def test_single_halfspace_projection():
    out = solve(RectificationProblem(np.array([2.0]), np.array([[1.0]]), np.array([0.0])))
    assert out.v[0] == pytest.approx(0.0, abs=1e-15)
    assert out.active == [0]
    assert out.multipliers[0] == pytest.approx(4.0)  # 2 (v - vhat) + lam a = 0


def test_single_halfspace_general_direction():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=6)
        vhat = rng.normal(size=6)
        b = a @ vhat - abs(rng.normal())
        out = solve(RectificationProblem(vhat, a[None], np.array([b])))
        assert np.allclose(out.v, vhat - a * (a @ vhat - b) / (a @ a), atol=1e-12)


def test_feasible_nominal_returned_bitwise():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 6))
    vhat = rng.normal(size=6)
    b = A @ vhat + 0.5
    out = Rectifier().solve(RectificationProblem(vhat, A, b))
    assert out.v.tobytes() == vhat.tobytes()
    assert out.kkt_residual == 0.0


def test_matches_enumeration_and_nnls_oracles():
    rng = np.random.default_rng(2)
    for _ in range(200):
        vhat, A, b = random_qp(rng)
        got = solve(RectificationProblem(vhat, A, b))
        assert np.allclose(got.v, solve_by_enumeration(vhat, A, b), atol=1e-6)
        if A.shape[0] <= A.shape[1]:
            assert np.allclose(got.v, dual_nnls_projection(vhat, A, b), atol=1e-6)
        assert got.kkt_residual < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_solution_is_feasible_and_optimal(m, p, seed):
    rng = np.random.default_rng(seed)
    n = 3 * m
    A = rng.normal(size=(p, n))
    b = A @ rng.normal(size=n) + rng.uniform(0, 1, p)
    vhat = rng.normal(scale=4, size=n)
    out = solve(RectificationProblem(vhat, A, b))
    assert np.all(A @ out.v <= b + 1e-9)
    # no feasible perturbation towards vhat improves the objective
    ref = solve_by_enumeration(vhat, A, b)
    assert np.sum((out.v - vhat) ** 2) <= np.sum((ref - vhat) ** 2) + 1e-9
    assert np.all(out.multipliers >= 0)
    assert kkt_residual(out.v, vhat, A, b, out.multipliers) < 1e-6


def test_warm_start_agrees_with_cold_start_along_a_drifting_sequence():
    rng = np.random.default_rng(3)
    A0 = rng.normal(size=(5, 9))
    x0 = rng.normal(size=9)
    warm = Rectifier(warm_start=True)
    for k in range(50):
        A = A0 + 0.01 * k * np.sin(np.arange(45).reshape(5, 9) + k)
        b = A @ x0 + 0.1
        vhat = x0 + 3 * np.cos(np.arange(9) + 0.05 * k)
        pw = warm.solve(RectificationProblem(vhat, A, b))
        pc = solve(RectificationProblem(vhat, A, b))
        assert np.allclose(pw.v, pc.v, atol=1e-9)
        assert sorted(pw.active) == sorted(pc.active)


def test_degenerate_duplicate_rows():
    A = np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    b = np.array([0.0, 0.0, 0.0])
    out = solve(RectificationProblem(np.array([1.0, 1.0]), A, b))
    assert np.allclose(out.v, [0.0, 1.0], atol=1e-12)
    assert out.kkt_residual < 1e-9


def test_infeasible_rows_fault():
    A = np.array([[1.0], [-1.0]])
    b = np.array([-1.0, -1.0])  # v <= -1 and v >= 1
    with pytest.raises(RectifierFault):
        Rectifier().solve(RectificationProblem(np.array([0.0]), A, b))
    with pytest.raises(InfeasibleProblemError):
        solve_by_enumeration(np.array([0.0]), A, b)


def test_snap_bound_is_enforced_when_compatible():
    vhat = np.array([10.0, -10.0, 0.5])
    A = np.array([[0.0, 0.0, 1.0]])
    b = np.array([0.0])
    out = solve(RectificationProblem(vhat, A, b, snap_bound=2.0))
    assert np.allclose(out.v, [2.0, -2.0, 0.0], atol=1e-12)
    assert not out.relaxed_bounds and out.active == [0]


def test_snap_bound_relaxed_when_it_conflicts_with_barrier():
    vhat = np.zeros(3)
    A = np.array([[-1.0, 0.0, 0.0]])
    b = np.array([-5.0])  # requires v_x >= 5
    out = solve(RectificationProblem(vhat, A, b, snap_bound=2.0))
    assert out.relaxed_bounds
    assert out.v[0] == pytest.approx(5.0)
    assert out.worst_bound_violation == pytest.approx(3.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        RectificationProblem(np.zeros(3), np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        RectificationProblem(np.zeros(3), snap_bound=-1.0)


# --- feasibility probe -----------------------------------------------------

def test_probe_two_vehicles():
    rng = np.random.default_rng(4)
    geom = SafetyGeometry()
    for _ in range(20):
        w = feasibility_probe(list(random_team(rng, 2, geom)), geom, place_poles())
        assert w.found and w.margin > 0


def test_probe_five_vehicles_fuzz():
    rng = np.random.default_rng(5)
    geom = SafetyGeometry(0.25, 2.0)
    gains = place_poles()
    for _ in range(200):
        stacks = rng.normal(scale=[[0.5], [1], [2], [4]], size=(5, 4, 3))
        gaps = [np.linalg.norm(stacks[i, 0] - stacks[j, 0]) for i in range(5) for j in range(i + 1, 5)]
        if min(gaps) < 1e-3:
            continue
        w = feasibility_probe(list(stacks), geom, gains)
        assert w.found, w.status


def test_probe_clustered_near_boundary():
    rng = np.random.default_rng(6)
    geom = SafetyGeometry(0.25, 2.0)
    gains = place_poles((4, 5, 6, 7))
    for _ in range(50):
        # ring of vehicles all just outside contact with their neighbours
        m = int(rng.integers(3, 7))
        ang = 2 * np.pi * np.arange(m) / m
        radius = 0.2501 / (2 * np.sin(np.pi / m)) * 2 ** 0.25
        stacks = np.zeros((m, 4, 3))
        stacks[:, 0, 0], stacks[:, 0, 1] = radius * np.cos(ang), radius * np.sin(ang)
        stacks[:, 1:] = rng.normal(scale=0.5, size=(m, 3, 3))
        assert all(barrier_value(stacks[i], stacks[j], geom) > 0 for i in range(m) for j in range(i + 1, m))
        w = feasibility_probe(list(stacks), geom, gains)
        assert w.found


def test_probe_single_vehicle_trivial():
    w = feasibility_probe([np.zeros((4, 3))], SafetyGeometry(), place_poles())
    assert w.found and w.margin == np.inf
