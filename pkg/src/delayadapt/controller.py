"""Control gains, Lyapunov constants, norm-equivalence bounds and control laws.

Sign convention of the feedback (both nominal and adaptive):

    U = -int M1 z - int M2 w + int M3 v + M4 X

M1 and M2 are stored so that this law reproduces the target-coordinate
boundary condition uhat(0, t) = 0 exactly at the discrete level.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .core import (
    PlantParams,
    SystemState,
    double_integral_lower,
    double_integral_square,
    double_integral_upper,
    l2sq,
    lower_volterra_weights,
    trap_weights,
    trapz,
    upper_volterra_weights,
)
from .kernels import GridMismatchError, Stage1Kernels, Stage2Kernels, Stage3Kernels, TargetState, forward_transform

log = logging.getLogger(__name__)


class StaleGainsError(RuntimeError):
    """Gains were built for a delay other than the one currently announced."""


@dataclass(frozen=True)
class ControlGains:
    M1: np.ndarray
    M2: np.ndarray
    M3: np.ndarray
    M4: np.ndarray
    D_used: float
    dx: float

    @property
    def n(self) -> int:
        return self.M1.size


def build_gains(s1: Stage1Kernels, s2: Stage2Kernels, s3: Stage3Kernels, grid=None) -> ControlGains:
    """Assemble M1..M4 by composing the three transformations.

    The boundary law in target coordinates is
        U = int R(0,y) uhat - int K1(0,y) alpha - int K2(0,y) beta - eta(0) X.
    Pulling each trapezoid functional back through uhat <- u <- (alpha,
    beta, v, X) <- (z, w, X) yields nodal gain profiles; this is the nested
    quadrature of the closed-form gain expressions, evaluated right to left.
    """
    n = s1.n
    for k in (s2, s3):
        if k.n != n:
            raise GridMismatchError("kernel tables do not share a grid")
    if grid is not None and grid.nx != n:
        raise GridMismatchError(f"grid nx={grid.nx} but kernels have {n} nodes")
    dx = s1.dx
    wt = trap_weights(n, dx)
    WL = lower_volterra_weights(n, dx)
    WU = upper_volterra_weights(n, dx)

    c_uhat = wt * s3.R[0, :]
    c_u = c_uhat + (WU * s3.P).T @ c_uhat
    c_v = c_u
    c_alpha = (s2.K1 * wt[None, :]).T @ c_u - wt * s2.K1[0, :]
    c_beta = (s2.K2 * wt[None, :]).T @ c_u - wt * s2.K2[0, :]
    c_X = c_u @ s2.eta - s2.eta[0]

    c_z = c_alpha - (WL * s1.phi).T @ c_alpha - (WL * s1.Psi).T @ c_beta
    c_w = c_beta - (WL * s1.varphi).T @ c_alpha - (WL * s1.Phi).T @ c_beta
    c_X = c_X - c_alpha @ s1.gamma - c_beta @ s1.lam

    return ControlGains(M1=-c_z / wt, M2=-c_w / wt, M3=c_v / wt, M4=np.asarray(c_X, dtype=float),
                        D_used=s2.D, dx=dx)


def _law(state: SystemState, g: ControlGains) -> float:
    if state.z.size != g.n:
        raise GridMismatchError(f"state has {state.z.size} nodes, gains have {g.n}")
    dx = g.dx
    return float(-trapz(g.M1 * state.z, dx) - trapz(g.M2 * state.w, dx)
                 + trapz(g.M3 * state.v, dx) + g.M4 @ state.X)


def nominal_control(state: SystemState, gains: ControlGains) -> float:
    return _law(state, gains)


def adaptive_control(state: SystemState, gains_at_estimate: ControlGains, Dhat: float | None = None) -> float:
    """Certainty-equivalence law with gains frozen at the last event.

    Passing ``Dhat`` guards against evaluating gains built for another delay.
    """
    if Dhat is not None and round(float(Dhat), 9) != round(gains_at_estimate.D_used, 9):
        raise StaleGainsError(f"gains built at D={gains_at_estimate.D_used:.9g}, estimate is {Dhat:.9g}")
    return _law(state, gains_at_estimate)


def target_law(target: TargetState, s2: Stage2Kernels, s3: Stage3Kernels) -> float:
    """Control evaluated directly in target coordinates; used as a cross-check."""
    dx = s2.dx
    return float(trapz(s3.R[0, :] * target.uhat, dx) - trapz(s2.K1[0, :] * target.alpha, dx)
                 - trapz(s2.K2[0, :] * target.beta, dx) - s2.eta[0] @ target.X)


# -- Lyapunov constants ------------------------------------------------------

@dataclass
class Margin:
    name: str
    passed: bool
    lhs: float
    rhs: float
    margin: float
    detail: str = ""


@dataclass
class LyapunovParams:
    delta: float
    ra: float
    rc: float
    rd: float
    lambda1: float
    Q1: np.ndarray
    P1: np.ndarray
    margins: list[Margin] = field(default_factory=list)
    lambda1_terms: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Margin:
        for m in self.margins:
            if m.name == name:
                return m
        raise KeyError(name)

    @property
    def feasible(self) -> bool:
        return all(m.passed for m in self.margins)

    def lines(self) -> list[str]:
        out = [f"{'PASS' if m.passed else 'FAIL':4s} {m.name:14s} lhs={m.lhs:.6g} rhs={m.rhs:.6g} "
               f"margin={m.margin:+.6g} {m.detail}" for m in self.margins]
        terms = ", ".join(f"{k}={v:.6g}" for k, v in self.lambda1_terms.items())
        out.append(f"{'PASS' if self.lambda1 > 0 else 'FAIL':4s} lambda1        value={self.lambda1:.6g} ({terms})")
        return out


def lyapunov_solution(Am: np.ndarray, Q1: np.ndarray) -> np.ndarray:
    """P1 with Am^T P1 + P1 Am = -Q1."""
    P1 = sla.solve_continuous_lyapunov(Am.T, -Q1)
    return 0.5 * (P1 + P1.T)


def auto_lyapunov_constants(params: PlantParams, Q1=None, D: float | None = None) -> tuple[float, float, float, float]:
    """Centered choice of (delta, ra, rc, rd) inside the feasibility intervals."""
    Q1 = np.eye(params.m) if Q1 is None else np.asarray(Q1, float)
    q1, q2, p, q = params.q1, params.q2, params.p, params.q
    lo = max(2 * params.d4 / q2, 2 * params.d1 / q1)
    pq2 = 2 * p * p * q * q
    hi = -0.5 * np.log(pq2) if pq2 > 0 else lo + 2.0
    if hi <= lo:
        log.warning("delta interval empty (lo=%.4g, hi=%.4g); using its upper end", lo, hi)
        delta = hi
    else:
        delta = 0.5 * (lo + hi)
    ra_lo = p * p * q1 / q2
    ra_hi = q1 / (2 * q2 * q * q) * np.exp(-2 * delta) if q != 0 else ra_lo + 2.0
    ra = 0.5 * (ra_lo + ra_hi)
    Dbar = params.Dmax if D is None else D
    rc_bound = 2 * Dbar * q2 * ra * np.exp(delta) * params.c0**2
    rc = 2 * rc_bound if rc_bound > 0 else 1.0
    P1 = lyapunov_solution(params.Am, Q1)
    pb = float(np.sum((P1 @ params.B) ** 2))
    rd_bound = np.min(np.linalg.eigvalsh(Q1)) / (2 * pb) * (q2 * ra - p * p * q1) if pb > 0 else 1.0
    rd = 0.5 * rd_bound
    return float(delta), float(ra), float(rc), float(rd)


def lyapunov_feasibility(params: PlantParams, delta=None, ra=None, rc=None, rd=None, Q1=None,
                         D: float | None = None) -> LyapunovParams:
    """Evaluate the four design inequalities and the decay rate lambda1.

    Missing constants are auto-selected. ``D`` is the delay used in the
    1/D term of lambda1 (defaults to Dtrue); the rc condition always uses Dmax.
    """
    Q1 = np.eye(params.m) if Q1 is None else np.asarray(Q1, float)
    if None in (delta, ra, rc, rd):
        auto = auto_lyapunov_constants(params, Q1)
        delta, ra, rc, rd = (v if v is not None else a for v, a in zip((delta, ra, rc, rd), auto))
    q1, q2, p, q, c0 = params.q1, params.q2, params.p, params.q, params.c0
    d1, d4 = params.d1, params.d4
    P1 = lyapunov_solution(params.Am, Q1)
    lq = float(np.min(np.linalg.eigvalsh(Q1)))
    m = []

    e_max = np.exp(-2 * max(2 * d4 / q2, 2 * d1 / q1))
    e_del = np.exp(-2 * delta)
    m.append(Margin("delta_left", e_max > e_del, e_max, e_del, e_max - e_del,
                    "exp(-2 max(2d4/q2, 2d1/q1)) > exp(-2 delta)"))
    m.append(Margin("delta_right", e_del > 2 * p * p * q * q, e_del, 2 * p * p * q * q,
                    e_del - 2 * p * p * q * q, "exp(-2 delta) > 2 p^2 q^2"))
    ra_hi = q1 / (2 * q2 * q * q) * e_del if q != 0 else np.inf
    ra_lo = p * p * q1 / q2
    m.append(Margin("ra_upper", ra_hi >= ra, ra_hi, ra, ra_hi - ra, "q1 exp(-2 delta)/(2 q2 q^2) >= ra"))
    m.append(Margin("ra_lower", ra > ra_lo, ra, ra_lo, ra - ra_lo, "ra > p^2 q1/q2"))
    rc_b = 2 * params.Dmax * q2 * ra * np.exp(delta) * c0**2
    m.append(Margin("rc", rc >= rc_b, rc, rc_b, rc - rc_b, "rc >= 2 Dmax q2 ra exp(delta) c0^2"))
    pb = float(np.sum((P1 @ params.B) ** 2))
    rd_b = lq / (2 * pb) * (q2 * ra - p * p * q1) if pb > 0 else np.inf
    m.append(Margin("rd", 0 < rd <= rd_b, rd, rd_b, min(rd, rd_b - rd), "0 < rd <= lmin(Q1)(q2 ra - p^2 q1)/(2|P1 B|^2)"))

    Dl = params.Dtrue if D is None else D
    terms = {
        "ode": lq / (2 * float(np.max(np.linalg.eigvalsh(P1)))),
        "beta": delta * q2 - 2 * d4,
        "alpha": delta * q1 - 2 * d1,
        "actuator": 1.0 / Dl,
    }
    lam1 = min(terms.values())
    out = LyapunovParams(delta=float(delta), ra=float(ra), rc=float(rc), rd=float(rd), lambda1=float(lam1),
                         Q1=Q1, P1=P1, margins=m, lambda1_terms=terms)
    for mm in m:
        if not mm.passed:
            log.warning("Lyapunov condition %s fails (margin %+.4g)", mm.name, mm.margin)
    if lam1 <= 0:
        log.warning("lambda1 = %.4g is not positive", lam1)
    return out


# -- norm equivalence --------------------------------------------------------

@dataclass(frozen=True)
class NormConstants:
    eta1: float
    eta2: float
    eta3: float
    eta4: float
    eta5: float
    eta6: float
    xi1: float
    xi2: float
    xi3: float
    xi4: float
    Upsilon: float

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def norm_constants(s1: Stage1Kernels, s2: Stage2Kernels, s3: Stage3Kernels, lyap: LyapunovParams, grid=None) -> NormConstants:
    dx = s1.dx
    tri = lambda F: double_integral_lower(F * F, dx)  # noqa: E731
    sq = lambda F: double_integral_square(F * F, dx)  # noqa: E731
    e1 = 4 * (1 + tri(s1.phi) + tri(s1.varphi) + l2sq(s1.gamma, dx))
    e2 = 4 * (1 + tri(s1.Psi) + tri(s1.Phi) + l2sq(s1.lam, dx))
    e3 = 4 * (1 + tri(s1.bphi) + tri(s1.bvarphi) + l2sq(s1.bgamma, dx))
    e4 = 4 * (1 + tri(s1.bPsi) + tri(s1.bPhi) + l2sq(s1.blam, dx))
    e5 = 2 * (1 + double_integral_upper(s3.R * s3.R, dx))
    e6 = 2 * (1 + double_integral_upper(s3.P * s3.P, dx))
    kk = sq(s2.K1) + sq(s2.K2) + l2sq(s2.eta, dx)
    xi1 = 1.0 / (1 + e3 + e4 + 4 * e5 + 4 * kk)
    xi2 = 1 + e1 + e2 + 4 * e6 * (e1 + e2 + 1) * (1 + kk)
    ev = np.linalg.eigvalsh(lyap.P1)
    d = lyap.delta
    xi3 = 0.5 * min(lyap.rd * ev[0], lyap.ra, np.exp(-d), lyap.rc * np.exp(-1.0))
    xi4 = 0.5 * max(lyap.rd * ev[-1], lyap.ra * np.exp(d), 1.0, lyap.rc)
    if not xi1 > 0:
        raise ArithmeticError(f"xi1 = {xi1} is not positive")
    return NormConstants(e1, e2, e3, e4, e5, e6, xi1, xi2, xi3, xi4, xi2 * xi4 / (xi1 * xi3))


def omega_bar(target: TargetState, dx: float) -> float:
    return l2sq(target.alpha, dx) + l2sq(target.beta, dx) + l2sq(target.uhat, dx) + float(target.X @ target.X)


def lyapunov_value(target: TargetState, lyap: LyapunovParams, dx: float) -> float:
    x = np.linspace(0.0, 1.0, target.alpha.size)
    d = lyap.delta
    return float(0.5 * lyap.rd * target.X @ lyap.P1 @ target.X
                 + 0.5 * lyap.ra * trapz(np.exp(d * x) * target.beta**2, dx)
                 + 0.5 * trapz(np.exp(-d * x) * target.alpha**2, dx)
                 + 0.5 * lyap.rc * trapz(np.exp(-x) * target.uhat**2, dx))


def lyapunov_of_state(state: SystemState, s1, s2, s3, lyap: LyapunovParams) -> tuple[float, float]:
    """(V, Omega_bar) of a plant state."""
    tg = forward_transform(state, s1, s2, s3)
    return lyapunov_value(tg, lyap, s1.dx), omega_bar(tg, s1.dx)
