"""Plant parameters, grids, state containers and assumption checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

log = logging.getLogger(__name__)

SQRT_HALF = 1.0 / np.sqrt(2.0)


class ConfigurationError(ValueError):
    """Malformed or inconsistent parameter set."""


class CFLError(ConfigurationError):
    """Time step too large for the explicit transport scheme."""


def _as_matrix(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise ConfigurationError(f"{name} must be square, got shape {a.shape}")
    return a


def _as_vector(a, m, name):
    a = np.atleast_1d(np.asarray(a, dtype=float)).ravel()
    if a.shape != (m,):
        raise ConfigurationError(f"{name} must have length {m}, got {a.shape[0]}")
    return a


@dataclass(frozen=True)
class PlantParams:
    """Coefficients of the 2x2 hyperbolic PDE-ODE plant with delayed input.

    ``A`` is m x m; ``B``, ``C`` and ``K`` are stored as length-m vectors
    (``B`` acts as a column, ``C`` and ``K`` as rows). ``Dtrue`` is only read
    by the simulator.
    """

    q1: float
    q2: float
    d1: float
    d2: float
    d3: float
    d4: float
    p: float
    q: float
    c0: float
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    K: np.ndarray
    Dmin: float
    Dmax: float
    Dtrue: float

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        m = A.shape[0]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", _as_vector(self.B, m, "B"))
        object.__setattr__(self, "C", _as_vector(self.C, m, "C"))
        object.__setattr__(self, "K", _as_vector(self.K, m, "K"))
        for name in ("q1", "q2", "d1", "d2", "d3", "d4", "p", "q", "c0", "Dmin", "Dmax", "Dtrue"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for arr in (self.A, self.B, self.C, self.K):
            arr.setflags(write=False)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def Am(self) -> np.ndarray:
        """Target ODE matrix A + B K^T."""
        return self.A + np.outer(self.B, self.K)

    def replace(self, **changes) -> "PlantParams":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return PlantParams(**kw)


@dataclass(frozen=True)
class Grid:
    nx: int
    dx: float
    dt: float
    t_end: float

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.nx)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SystemState:
    """Discretized plant (z, w), actuator (v) and ODE (X) state at time t."""

    z: np.ndarray
    w: np.ndarray
    v: np.ndarray
    X: np.ndarray
    t: float = 0.0

    def copy(self) -> "SystemState":
        return SystemState(self.z.copy(), self.w.copy(), self.v.copy(), self.X.copy(), self.t)

    def scaled(self, a: float) -> "SystemState":
        return SystemState(a * self.z, a * self.w, a * self.v, a * self.X, self.t)

    @classmethod
    def zeros(cls, nx: int, m: int, t: float = 0.0) -> "SystemState":
        return cls(np.zeros(nx), np.zeros(nx), np.zeros(nx), np.zeros(m), t)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    margin: float  # positive when satisfied
    detail: str = ""


@dataclass
class AssumptionReport:
    checks: list[CheckResult] = field(default_factory=list)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            flag = "PASS" if c.passed else "FAIL"
            out.append(f"{flag:4s} {c.name:18s} value={c.value:.6g} margin={c.margin:+.6g} {c.detail}")
        return out


# relative singular-value tolerance for the controllability rank
CTRB_RTOL = 1e-10


def controllability_matrix(A, B) -> np.ndarray:
    m = A.shape[0]
    cols = [B]
    for _ in range(m - 1):
        cols.append(A @ cols[-1])
    return np.column_stack(cols)


def assumption2_lhs(params: PlantParams) -> float:
    expo = max(2 * params.d4 / params.q2, 2 * params.d1 / params.q1)
    return abs(params.p * params.q) * np.exp(expo)


def validate_assumptions(params: PlantParams, strict: bool = False) -> AssumptionReport:
    """Evaluate the standing assumptions and report signed margins.

    Never raises on a violated assumption unless ``strict`` is set.
    """
    rep = AssumptionReport()

    sv = np.linalg.svd(controllability_matrix(params.A, params.B), compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    rank = int(np.sum(sv > CTRB_RTOL * max(smax, np.finfo(float).tiny))) if smax > 0 else 0
    smin_rel = sv[-1] / smax if smax > 0 else 0.0
    rep.checks.append(CheckResult(
        "controllability", rank == params.m, float(rank), smin_rel - CTRB_RTOL,
        f"rank {rank}/{params.m}"))

    lhs = assumption2_lhs(params)
    rep.checks.append(CheckResult(
        "boundary_coupling", lhs <= SQRT_HALF, lhs, SQRT_HALF - lhs, "|pq| exp(max(2d4/q2, 2d1/q1)) <= 1/sqrt(2)"))

    dm = min(params.Dmin, params.Dtrue - params.Dmin, params.Dmax - params.Dtrue)
    rep.checks.append(CheckResult(
        "delay_bounds", dm > 0 or (params.Dmin > 0 and params.Dmin <= params.Dtrue <= params.Dmax),
        params.Dtrue, dm, f"{params.Dmin} <= {params.Dtrue} <= {params.Dmax}"))

    eig = np.linalg.eigvals(params.Am)
    re = float(np.max(eig.real))
    rep.checks.append(CheckResult("hurwitz", re < 0, re, -re, "max Re eig(A + B K^T)"))

    for name, val in (("q1", params.q1), ("q2", params.q2)):
        if val <= 0:
            rep.checks.append(CheckResult(f"{name}_positive", False, val, val))
    for name, val in (("p", params.p), ("c0", params.c0)):
        if val == 0:
            rep.checks.append(CheckResult(f"{name}_nonzero", False, val, 0.0))

    for c in rep.checks:
        if not c.passed:
            log.warning("assumption %s violated (margin %+.4g)", c.name, c.margin)
    if strict and not rep.all_passed:
        bad = ", ".join(c.name for c in rep.checks if not c.passed)
        raise ConfigurationError(f"assumptions violated: {bad}")
    return rep


def make_grid(nx: int, dt: float, t_end: float, params: PlantParams, against: str = "dmin") -> Grid:
    """Uniform grid on [0, 1] with an explicit-upwind CFL check.

    ``against="dmin"`` checks the actuator speed at the smallest admissible
    delay; ``against="dtrue"`` checks only the speeds the time stepper
    actually advects.
    """
    if nx < 3:
        raise ConfigurationError(f"nx must be >= 3, got {nx}")
    if dt <= 0 or t_end <= 0:
        raise ConfigurationError("dt and t_end must be positive")
    if against not in ("dmin", "dtrue"):
        raise ConfigurationError(f"unknown CFL reference {against!r}")
    dx = 1.0 / (nx - 1)
    delay = params.Dmin if against == "dmin" else params.Dtrue
    speeds = {"q1": params.q1, "q2": params.q2, f"1/D({against})": 1.0 / delay}
    name, fastest = max(speeds.items(), key=lambda kv: kv[1])
    cfl = fastest * dt / dx
    if cfl > 1.0 + 1e-12:
        raise CFLError(f"CFL {cfl:.4g} > 1 for speed {name}={fastest:.6g} (dt={dt}, dx={dx:.6g})")
    return Grid(nx=int(nx), dx=dx, dt=float(dt), t_end=float(t_end))


# -- quadrature helpers (trapezoid everywhere) ------------------------------

def trap_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = dx / 2
    return w


def trapz(f: np.ndarray, dx: float, axis: int = -1) -> np.ndarray:
    return np.trapezoid(f, dx=dx, axis=axis)


def l2sq(f: np.ndarray, dx: float) -> float:
    """Squared L2 norm on [0, 1]; for 2-D input the columns are vector components."""
    f = np.asarray(f)
    if f.ndim == 1:
        return float(trapz(f * f, dx))
    return float(trapz(np.sum(f * f, axis=1), dx))


@lru_cache(maxsize=32)
def lower_volterra_weights(n: int, dx: float) -> np.ndarray:
    """W[i, j]: trapezoid weights for the integral over [0, x_i] (zero for j > i)."""
    W = np.tril(np.full((n, n), dx))
    idx = np.arange(n)
    W[:, 0] = dx / 2
    W[idx, idx] = dx / 2
    W[0, 0] = 0.0
    W.setflags(write=False)
    return W


@lru_cache(maxsize=32)
def upper_volterra_weights(n: int, dx: float) -> np.ndarray:
    """W[i, j]: trapezoid weights for the integral over [x_i, 1] (zero for j < i)."""
    W = np.triu(np.full((n, n), dx))
    idx = np.arange(n)
    W[:, -1] = dx / 2
    W[idx, idx] = dx / 2
    W[-1, -1] = 0.0
    W = np.triu(W)
    W.setflags(write=False)
    return W


def double_integral_lower(F: np.ndarray, dx: float) -> float:
    """Integral of F over the triangle 0 <= y <= x <= 1."""
    W = lower_volterra_weights(F.shape[0], dx)
    return float(trapz(np.sum(W * F, axis=1), dx))


def double_integral_upper(F: np.ndarray, dx: float) -> float:
    """Integral of F over the triangle 0 <= x <= y <= 1."""
    W = upper_volterra_weights(F.shape[0], dx)
    return float(trapz(np.sum(W * F, axis=1), dx))


def double_integral_square(F: np.ndarray, dx: float) -> float:
    return float(trapz(trapz(F, dx, axis=1), dx))
