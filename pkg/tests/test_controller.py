import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delayadapt.controller import (
    StaleGainsError,
    adaptive_control,
    auto_lyapunov_constants,
    build_gains,
    lyapunov_feasibility,
    lyapunov_of_state,
    lyapunov_solution,
    nominal_control,
    norm_constants,
    target_law,
)
from delayadapt.core import SystemState, make_grid
from delayadapt.kernels import GridMismatchError, Stage3Kernels, forward_transform, solve_stage1, solve_stage2, solve_stage3

from conftest import dcv_grid_for

tz = np.trapezoid


def stages(P, nx=41, D=1.0):
    G = make_grid(nx, 1e-3, 1.0, P, against="dtrue")
    s1 = solve_stage1(P, G)
    s2 = solve_stage2(s1, 1.0 / D, P, G)
    return G, s1, s2, solve_stage3(s2, P, G)


def nested_gains(s1, s2, s3):
    """Closed-form gain integrals, each evaluated with its own trapezoid rule.

    M1 and M2 are returned without the leading minus they carry in the law.
    """
    n, x = s1.n, s1.x
    R0, P = s3.R[0], s3.P

    def N(Kt):
        out = np.empty(n)
        for s in range(n):
            inner = np.array([tz(P[a, a:] * Kt[a:, s], x[a:]) if a < n - 1 else 0.0 for a in range(n)])
            out[s] = tz(R0 * Kt[:, s], x) - Kt[0, s] + tz(R0 * inner, x)
        return out

    N1, N2 = N(s2.K1), N(s2.K2)

    def tail(f, F, y):
        return tz(f[y:] * F[y:, y], x[y:]) if y < n - 1 else 0.0

    M1 = np.array([N1[y] - tail(N1, s1.phi, y) - tail(N2, s1.Psi, y) for y in range(n)])
    M2 = np.array([N2[y] - tail(N1, s1.varphi, y) - tail(N2, s1.Phi, y) for y in range(n)])
    M3 = np.array([R0[y] + (tz(R0[: y + 1] * P[: y + 1, y], x[: y + 1]) if y > 0 else 0.0) for y in range(n)])
    inner = np.array([tz(P[a, a:] * s2.eta[a:, 0], x[a:]) if a < n - 1 else 0.0 for a in range(n)])
    M4 = (tz(R0 * s2.eta[:, 0], x) - s2.eta[0, 0] + tz(R0 * inner, x)
          - tz(N2 * s1.lam[:, 0], x) - tz(N1 * s1.gamma[:, 0], x))
    return M1, M2, M3, M4


def rel(a, b):
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_zero_kernels_give_zero_gains(zero_plant):
    _, s1, s2, s3 = stages(zero_plant)
    g = build_gains(s1, s2, s3)
    for M in (g.M1, g.M2, g.M3, g.M4):
        assert not np.any(M)


def test_M3_reduces_to_R_without_P(generic_plant):
    _, s1, s2, s3 = stages(generic_plant)
    s3z = Stage3Kernels(R=s3.R, P=np.zeros_like(s3.P), d=s3.d, dx=s3.dx)
    g = build_gains(s1, s2, s3z)
    assert np.allclose(g.M3, s3.R[0], rtol=1e-13, atol=1e-13)


def test_unit_constants_give_minus_one():
    from delayadapt.controller import ControlGains

    n = 21
    g = ControlGains(np.ones(n), np.ones(n), np.ones(n), np.zeros(1), D_used=1.0, dx=1 / (n - 1))
    s = SystemState(np.ones(n), np.ones(n), np.ones(n), np.zeros(1))
    assert nominal_control(s, g) == pytest.approx(-1.0, abs=1e-14)
    assert nominal_control(SystemState.zeros(n, 1), g) == 0.0


@pytest.mark.slow
def test_gains_match_nested_quadrature(dcv_plant):
    errs = {}
    for nx in (51, 101):
        _, s1, s2, s3 = stages(dcv_plant, nx)
        g = build_gains(s1, s2, s3)
        M1, M2, M3, M4 = nested_gains(s1, s2, s3)
        errs[nx] = (rel(g.M1, -M1), rel(g.M2, -M2), rel(g.M3, M3))
        assert g.M4[0] == pytest.approx(M4, rel=1e-12)
        assert max(errs[nx]) < 2e-2
    for a, b in zip(errs[51], errs[101]):
        assert 0.35 <= b / a <= 0.65


def test_gains_converge_first_order(dcv_plant):
    g = {nx: build_gains(*stages(dcv_plant, nx)[1:]) for nx in (51, 101, 201)}
    for k in ("M1", "M2", "M3"):
        a, b, c = (getattr(g[n], k) for n in (51, 101, 201))
        e1 = np.max(np.abs(a - b[::2]))
        e2 = np.max(np.abs(b[::2] - c[::4]))
        assert 0.35 <= e2 / e1 <= 0.65, k


@given(seed=st.integers(0, 2**31), D=st.floats(0.5, 2.0))
def test_law_equals_target_law(generic_plant, seed, D):
    G, s1, s2, s3 = stages(generic_plant, 31, D)
    g = build_gains(s1, s2, s3)
    rng = np.random.default_rng(seed)
    s = SystemState(*rng.standard_normal((3, G.nx)), rng.standard_normal(1))
    U = nominal_control(s, g)
    Ut = target_law(forward_transform(s, s1, s2, s3), s2, s3)
    assert U == pytest.approx(Ut, rel=1e-10, abs=1e-10 * (1 + abs(U)))


def test_law_equals_target_law_dcv(dcv_kernels, dcv_grid):
    s1, s2, s3 = dcv_kernels
    g = build_gains(s1, s2, s3, dcv_grid)
    rng = np.random.default_rng(3)
    s = SystemState(*rng.standard_normal((3, dcv_grid.nx)), rng.standard_normal(1))
    assert nominal_control(s, g) == pytest.approx(target_law(forward_transform(s, s1, s2, s3), s2, s3), rel=1e-11)


def test_adaptive_law_at_true_delay(dcv_kernels, dcv_grid):
    g = build_gains(*dcv_kernels)
    rng = np.random.default_rng(4)
    s = SystemState(*rng.standard_normal((3, dcv_grid.nx)), rng.standard_normal(1))
    assert adaptive_control(s, g, 1.0) == nominal_control(s, g)
    assert adaptive_control(SystemState.zeros(dcv_grid.nx, 1), g) == 0.0
    with pytest.raises(StaleGainsError):
        adaptive_control(s, g, 0.25)


def test_zero_kernel_norm_constants(zero_plant):
    _, s1, s2, s3 = stages(zero_plant)
    L = lyapunov_feasibility(zero_plant, 0.1, 1.0, 1.0, 0.1)
    nc = norm_constants(s1, s2, s3, L)
    assert (nc.eta1, nc.eta2, nc.eta3, nc.eta4) == (4.0, 4.0, 4.0, 4.0)
    assert (nc.eta5, nc.eta6) == (2.0, 2.0)
    assert nc.xi1 == pytest.approx(1 / 17, rel=1e-15)
    assert nc.xi2 == pytest.approx(81.0, rel=1e-15)


def test_dcv_norm_constants(dcv_kernels, dcv_plant):
    L = lyapunov_feasibility(dcv_plant, -0.36, 1.02, 1.0, 0.02)
    nc = norm_constants(*dcv_kernels, L)
    P1 = float(L.P1[0, 0])
    assert nc.xi3 == pytest.approx(0.5 * min(0.02 * P1, 1.02, np.exp(0.36), np.exp(-1.0)), rel=1e-14)
    assert nc.xi4 == pytest.approx(0.5 * max(0.02 * P1, 1.02 * np.exp(-0.36), 1.0, 1.0), rel=1e-14)
    assert np.isfinite(nc.Upsilon) and nc.Upsilon > 1
    assert 0 < nc.xi1 < 1 < nc.xi2


def test_lyapunov_equation(dcv_plant):
    Am = dcv_plant.Am
    P1 = lyapunov_solution(Am, np.eye(1))
    assert np.allclose(Am.T @ P1 + P1 @ Am, -np.eye(1), atol=1e-14)
    assert P1[0, 0] == pytest.approx(-1 / (2 * Am[0, 0]), rel=1e-13)
    assert P1[0, 0] == pytest.approx(3.700, abs=5e-4)


def test_dcv_margins_at_design_constants(dcv_plant):
    L = lyapunov_feasibility(dcv_plant, -0.36, 1.02, 1.0, 0.02)
    assert L["ra_upper"].passed and L["ra_upper"].lhs == pytest.approx(0.5 * np.exp(0.72), rel=1e-14)
    assert L["rc"].passed and L["rc"].rhs == pytest.approx(2.645e-7, rel=1e-3)
    assert L["rd"].passed
    assert not L["delta_left"].passed
    assert not L.feasible
    assert L.lambda1 < 0
    assert any(line.startswith("FAIL lambda1") for line in L.lines())


def test_auto_constants_feasible(generic_plant):
    consts = auto_lyapunov_constants(generic_plant)
    L = lyapunov_feasibility(generic_plant, *consts)
    assert L.feasible, L.lines()
    assert L.lambda1 > 0


def test_lyapunov_of_zero_state(dcv_kernels, dcv_plant, dcv_grid):
    L = lyapunov_feasibility(dcv_plant, -0.36, 1.02, 1.0, 0.02)
    assert lyapunov_of_state(SystemState.zeros(dcv_grid.nx, 1), *dcv_kernels, L) == (0.0, 0.0)


def test_gain_grid_check(dcv_kernels, dcv_plant):
    with pytest.raises(GridMismatchError):
        build_gains(*dcv_kernels, dcv_grid_for(dcv_plant, nx=21))
