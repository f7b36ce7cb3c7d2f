from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delayadapt.core import (
    CFLError,
    ConfigurationError,
    PlantParams,
    SystemState,
    assumption2_lhs,
    double_integral_lower,
    double_integral_square,
    double_integral_upper,
    l2sq,
    lower_volterra_weights,
    make_grid,
    upper_volterra_weights,
    validate_assumptions,
)


def plant(**kw):
    base = dict(q1=1.0, q2=1.0, d1=0.0, d2=0.0, d3=0.0, d4=0.0, p=0.1, q=0.1, c0=1.0,
                A=[[0.5]], B=[1.0], C=[1.0], K=[-2.0], Dmin=0.5, Dmax=2.0, Dtrue=1.0)
    base.update(kw)
    return PlantParams(**base)


def test_small_pq_passes_boundary_coupling():
    rep = validate_assumptions(plant())
    c = rep["boundary_coupling"]
    assert c.passed
    assert c.value == pytest.approx(0.01, abs=1e-15)
    assert c.margin == pytest.approx(1 / np.sqrt(2) - 0.01)


def test_zero_input_map_is_uncontrollable():
    rep = validate_assumptions(plant(B=[0.0]))
    assert not rep["controllability"].passed


def test_dcv_target_matrix_hurwitz(dcv_plant):
    P = dcv_plant
    assert P.A[0, 0] == pytest.approx(-0.33192, abs=5e-6)
    assert P.B[0] == pytest.approx(-0.010933, abs=5e-7)
    eig = np.linalg.eigvals(P.A + np.outer(P.B, P.K))
    assert eig[0].real == pytest.approx(-0.1351374, abs=5e-7)
    rep = validate_assumptions(P)
    assert rep["hurwitz"].passed
    assert rep["hurwitz"].value == pytest.approx(eig.real.max(), rel=1e-12)


def test_dcv_boundary_coupling_flagged(dcv_plant):
    getcontext().prec = 40
    q = Decimal(repr(dcv_plant.q1))
    d = Decimal(repr(dcv_plant.d1))
    ref = float((2 * d / q).exp())
    c = validate_assumptions(dcv_plant)["boundary_coupling"]
    assert not c.passed
    assert c.value == pytest.approx(ref, rel=1e-12)
    assert c.margin == pytest.approx(1 / np.sqrt(2) - ref, rel=1e-9)


def test_strict_mode_raises(dcv_plant):
    with pytest.raises(ConfigurationError, match="boundary_coupling"):
        validate_assumptions(dcv_plant, strict=True)


def test_dimension_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        plant(A=np.eye(2), B=[1.0], C=[1.0, 0.0], K=[1.0, 1.0])
    with pytest.raises(ConfigurationError):
        plant(A=np.ones((2, 3)))


def test_delay_bounds_order_reported():
    rep = validate_assumptions(plant(Dtrue=3.0))
    assert not rep["delay_bounds"].passed


def test_grid_rejects_dmin_cfl(dcv_plant):
    with pytest.raises(CFLError, match=r"1/D\(dmin\)"):
        make_grid(51, 0.001, 40.0, dcv_plant)


def test_grid_accepts_slow_speeds():
    g = make_grid(51, 0.001, 1.0, plant(Dmin=1.0))
    assert g.dx == pytest.approx(0.02)
    assert g.n_steps == 1000


def test_grid_minimum_resolution():
    with pytest.raises(ConfigurationError):
        make_grid(2, 0.001, 1.0, plant())


@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0), st.floats(-1, 1), st.floats(-1, 1))
def test_boundary_coupling_linear_in_pq(p, q, d1, d4):
    a = plant(p=p, q=q, d1=d1, d4=d4)
    b = a.replace(p=2 * p)
    assert assumption2_lhs(b) == pytest.approx(2 * assumption2_lhs(a), rel=1e-13)


@given(st.floats(-5, 5), st.floats(0.1, 3.0))
def test_hurwitz_flip(a, b):
    # scalar: A + B K crosses zero at K = -a/b
    k_cross = -a / b
    assert validate_assumptions(plant(A=[[a]], B=[b], K=[k_cross - 0.5])).__getitem__("hurwitz").passed
    assert not validate_assumptions(plant(A=[[a]], B=[b], K=[k_cross + 0.5]))["hurwitz"].passed


@given(st.integers(3, 200), st.floats(1e-4, 1e-2))
def test_grid_deterministic(nx, dt):
    P = plant(Dmin=1.0)
    try:
        g1 = make_grid(nx, dt, 1.0, P)
    except CFLError:
        return
    g2 = make_grid(nx, dt, 1.0, P)
    assert g1 == g2
    assert np.array_equal(g1.x, g2.x)


def test_state_zeros_and_scaling():
    s = SystemState.zeros(5, 2)
    assert not s.v.any() and s.X.shape == (2,)
    s2 = SystemState(np.ones(5), np.ones(5), np.ones(5), np.ones(2)).scaled(3.0)
    assert np.all(s2.z == 3.0)


def test_volterra_weights_integrate_polynomials():
    n, dx = 41, 1 / 40
    x = np.linspace(0, 1, n)
    WL = lower_volterra_weights(n, dx)
    WU = upper_volterra_weights(n, dx)
    f = 1 + x
    assert np.allclose(WL @ f, x + x**2 / 2, atol=1e-14)
    assert np.allclose(WU @ f, (1 + 0.5) - (x + x**2 / 2), atol=1e-14)
    assert l2sq(np.ones(n), dx) == pytest.approx(1.0)
    X, Y = np.meshgrid(x, x, indexing="ij")
    assert double_integral_lower(np.ones((n, n)), dx) == pytest.approx(0.5, abs=1e-12)
    assert double_integral_upper(np.ones((n, n)), dx) == pytest.approx(0.5, abs=1e-12)
    assert double_integral_square(X * Y, dx) == pytest.approx(0.25, abs=1e-12)
