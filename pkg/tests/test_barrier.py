import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbcquad.barrier import (DegenerateGeometryError, SafetyGeometry, assemble_certificates,
                             barrier_value, certificate_matrices, check_initial_conditions,
                             constraint_row, eta, output_coefficients)
from sbcquad.lindyn import IntegratorState, euler_step_stack, place_poles

K1234 = place_poles((1, 2, 3, 4))


def pair_at(offset, **rel):
    """Vehicle i at ``offset`` from vehicle j (at the origin), with optional relative derivatives."""
    qi = np.zeros((4, 3))
    qi[0] = offset
    for k, name in enumerate(("dr", "ddr", "dddr"), start=1):
        if name in rel:
            qi[k] = rel[name]
    return qi, np.zeros((4, 3))


# --- barrier value ---------------------------------------------------------

def test_h_zero_on_contact():
    for c in (1.0, 2.0, 3.5):
        assert barrier_value(*pair_at((0.25, 0, 0)), SafetyGeometry(0.25, c)) == 0.0


def test_h_worked_value():
    h = barrier_value(*pair_at((0.35, -0.6, 0)), SafetyGeometry(0.25, 1.0))
    # 0.01500625 + 0.1296 - 0.00390625
    assert h == pytest.approx(0.1407, abs=1e-15)


def test_h_vertical_scaling_boundary():
    assert barrier_value(*pair_at((0, 0, 0.5)), SafetyGeometry(0.25, 2.0)) == 0.0


def test_h_accepts_positions_states_and_stacks():
    geom = SafetyGeometry(0.25, 2.0)
    a, b = np.array([0.3, 0.1, -0.2]), np.array([-0.1, 0.0, 0.4])
    ref = barrier_value(a, b, geom)
    assert barrier_value(IntegratorState.at_rest(a), IntegratorState.at_rest(b), geom) == ref
    assert barrier_value(np.vstack([a, np.ones((3, 3))]), np.vstack([b, np.zeros((3, 3))]), geom) == ref


def test_h_symmetric_in_pair():
    rng = np.random.default_rng(1)
    geom = SafetyGeometry(0.3, 1.7)
    for _ in range(10):
        a, b = rng.normal(size=(2, 4, 3))
        assert barrier_value(a, b, geom) == barrier_value(b, a, geom)


def test_cylinder_value():
    geom = SafetyGeometry(0.25, 2.0, shape="cylinder", n=4)
    h = barrier_value(*pair_at((0.3, 0.4, 0.2)), geom)
    assert h == pytest.approx((0.3**2 + 0.4**2) ** 2 + 0.1**4 - 0.25**4, rel=1e-14)


@pytest.mark.parametrize("kwargs", [dict(D_s=0), dict(D_s=-0.1), dict(c=0.5), dict(shape="sphere"),
                                    dict(n=6), dict(shape="cylinder", n=3), dict(shape="cylinder", n=2.5)])
def test_geometry_validation(kwargs):
    with pytest.raises(ValueError):
        SafetyGeometry(**kwargs)


# --- eta -------------------------------------------------------------------

def test_eta_of_t4():
    # h = x^4 along x = t evaluated at t = 1
    e = eta(*pair_at((1, 0, 0), dr=(1, 0, 0)), SafetyGeometry(D_s=1e-300, c=1.0))
    assert np.allclose(e.as_array(), (1, 4, 12, 24), rtol=1e-15, atol=0)


def test_eta_static_pair():
    geom = SafetyGeometry(0.25, 2.0)
    qi, qj = pair_at((0.4, -0.3, 0.5))
    e = eta(qi, qj, geom).as_array()
    assert e[0] == barrier_value(qi, qj, geom)
    assert np.array_equal(e[1:], np.zeros(3))


T = sp.symbols("t")


def _sym_h(qi, qj, geom):
    fact = [1, 1, 2, 6, 24]
    rel = [sum(sp.Float(float(qi[k, a] - qj[k, a]), 30) * T**k / fact[k] for k in range(qi.shape[0]))
           for a in range(3)]
    rel[2] = rel[2] / sp.Float(geom.c, 30)
    if geom.shape == "rectangle":
        return rel[0] ** 4 + rel[1] ** 4 + rel[2] ** 4 - sp.Float(geom.D_s, 30) ** 4
    n = int(geom.n)
    return (rel[0] ** 2 + rel[1] ** 2) ** (n // 2) + rel[2] ** n - sp.Float(geom.D_s, 30) ** n


def _sym_derivs(qi5, qj5, geom):
    h = sp.expand(_sym_h(qi5, qj5, geom))
    return np.array([float(sp.diff(h, T, k).subs(T, 0)) for k in range(5)])


GEOMS = [SafetyGeometry(0.25, 2.0), SafetyGeometry(0.4, 1.0), SafetyGeometry(0.3, 2.5, "cylinder", 2),
         SafetyGeometry(0.3, 1.5, "cylinder", 4), SafetyGeometry(0.2, 2.0, "cylinder", 6)]


@pytest.mark.parametrize("geom", GEOMS, ids=lambda g: f"{g.shape}{g.n}-c{g.c}")
def test_eta_and_snap_row_match_symbolic_differentiation(geom):
    rng = np.random.default_rng(11)
    gains = place_poles((1.5, 2.0, 3.0, 5.0))
    k = np.asarray(gains.k)
    for _ in range(6):
        qi, qj = rng.normal(size=(2, 5, 3))
        ref = _sym_derivs(qi, qj, geom)
        row = constraint_row(qi[:4], qj[:4], geom, gains, m=2)
        assert np.allclose(row.eta.as_array(), ref[:4], rtol=1e-10, atol=1e-12)
        v = np.concatenate([qi[4], qj[4]])
        h4 = -row.A @ v + row.b - k @ row.eta.as_array()
        assert h4 == pytest.approx(ref[4], rel=1e-9, abs=1e-10)


@settings(max_examples=100, deadline=None)
@given(arrays(float, (2, 4, 3), elements=st.floats(-2, 2)), st.sampled_from(GEOMS))
def test_eta_chain_matches_centered_difference_along_euler_flow(stacks, geom):
    qi, qj = stacks
    if barrier_value(qi, qj, geom) <= 0 or np.array_equal(qi[0], qj[0]):
        return
    v = np.zeros(3)
    dt = 1e-5
    e0 = eta(qi, qj, geom).as_array()
    fwd = eta(euler_step_stack(qi, v, dt), euler_step_stack(qj, v, dt), geom).as_array()
    bwd = eta(euler_step_stack(qi, v, -dt), euler_step_stack(qj, v, -dt), geom).as_array()
    fd = (fwd - bwd) / (2 * dt)
    scale = np.max(np.abs(e0)) + 1e-3
    assert np.allclose(fd[:3], e0[1:], rtol=1e-5, atol=1e-5 * scale)


# --- constraint rows -------------------------------------------------------

def test_row_worked_example():
    qi, qj = pair_at((1, 0, 0))
    row = constraint_row(qi, qj, SafetyGeometry(0.5, 1.0), K1234, m=2)
    assert np.array_equal(row.A, np.array([-4.0, 0, 0, 4.0, 0, 0]))
    assert row.b == pytest.approx(22.5, abs=1e-14)
    assert row.pair == (0, 1)


def test_row_on_boundary_has_zero_offset():
    qi, qj = pair_at((0.5, 0, 0))
    row = constraint_row(qi, qj, SafetyGeometry(0.5, 1.0), K1234, m=2)
    assert row.b == 0.0
    # snaps that push the pair together at 4th order are excluded, others allowed
    assert row.slack(np.array([-1.0, 0, 0, 0, 0, 0])) < 0
    assert row.slack(np.array([1.0, 0, 0, 0, 0, 0])) > 0
    assert row.slack(np.zeros(6)) == 0.0


def test_row_embedding_in_wider_team():
    qi, qj = pair_at((0.6, 0.2, -0.1), dr=(0.1, 0, 0))
    geom = SafetyGeometry()
    small = constraint_row(qi, qj, geom, K1234, m=2)
    wide = constraint_row(qi, qj, geom, K1234, m=4, i=1, j=3)
    assert np.array_equal(wide.A[3:6], small.A[:3])
    assert np.array_equal(wide.A[9:12], small.A[3:])
    assert not np.any(wide.A[[0, 1, 2, 6, 7, 8]])
    assert wide.b == small.b


def test_coincident_pair_is_degenerate():
    q = np.zeros((4, 3))
    with pytest.raises(DegenerateGeometryError) as err:
        constraint_row(q, q.copy(), SafetyGeometry(), K1234, m=3, i=0, j=2)
    assert err.value.pair == (0, 2)


def test_assemble_counts_and_order():
    rng = np.random.default_rng(5)
    geom = SafetyGeometry()
    assert assemble_certificates([rng.normal(size=(4, 3))], geom, K1234) == []
    states = list(rng.normal(size=(5, 4, 3)))
    rows = assemble_certificates(states, geom, K1234)
    assert len(rows) == 10
    assert [r.pair for r in rows] == [(i, j) for i in range(5) for j in range(i + 1, 5)]
    two = assemble_certificates(states[:2], geom, K1234)
    single = constraint_row(states[0], states[1], geom, K1234, m=2)
    assert np.array_equal(two[0].A, single.A) and two[0].b == single.b
    A, b, pairs = certificate_matrices(states, geom, K1234)
    assert A.shape == (10, 15) and b.shape == (10,) and pairs == [r.pair for r in rows]


# --- initial conditions ----------------------------------------------------

def test_output_coefficients_recursion():
    p = (1.0, 2.0, 3.0, 4.0)
    c = output_coefficients(p)
    # y3 = (d/dt + 3)(d/dt + 2)(d/dt + 1) h
    assert np.allclose(c[3], (6, 11, 6, 1))
    assert np.allclose(c[1], (1, 1, 0, 0))


def test_static_formation_initial_outputs():
    states = [pair_at((0, 0, 0))[0], pair_at((1, 0, 0))[0], pair_at((0, 1, 0))[0]]
    gains = place_poles((1, 2, 3, 4))
    rep = check_initial_conditions(states, SafetyGeometry(0.25, 2.0), gains)
    assert rep.passed and rep.failing_pairs == []
    for (i, j), y in zip(rep.pairs, rep.y):
        h = barrier_value(states[i], states[j], SafetyGeometry(0.25, 2.0))
        assert np.allclose(y, h * np.array([1, 1, 2, 6]))


def test_boundary_pair_passes_non_strictly():
    rep = check_initial_conditions(list(pair_at((0.25, 0, 0))), SafetyGeometry(0.25, 2.0), K1234)
    assert rep.passed
    assert np.array_equal(rep.y, np.zeros((1, 4)))


def test_fast_closing_pair_fails_first_output():
    qi, qj = pair_at((1, 0, 0), dr=(-1, 0, 0))
    geom = SafetyGeometry(0.5, 1.0)
    rep = check_initial_conditions([qi, qj], geom, K1234)
    assert barrier_value(qi, qj, geom) > 0
    assert rep.y[0, 1] == pytest.approx(-4 + 0.9375)
    assert not rep.passed and rep.failing_pairs == [(0, 1)]
