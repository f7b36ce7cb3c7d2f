"""Event trigger and batch least-squares identification of the input delay.

For the actuator transport v_t = -(1/D) v_x with v(x, 0) = 0, integration
by parts gives, per sine mode n,

    f_n(t) = n pi int_0^t int_0^1 cos(n pi x) v(x, s) dx ds
           = D g_n(t),     g_n(t) = int_0^1 sin(n pi x) v(x, t) dx,

so D is the least-squares slope of f_n against g_n over any window where
g_n does not vanish identically.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigurationError, SystemState, trap_weights

log = logging.getLogger(__name__)

# relative slack on the timeout comparison (events are step-aligned)
_TIME_EPS = 1e-9


@dataclass
class AdaptationState:
    Dhat: float
    Dmin: float
    Dmax: float
    a: float = 2.0
    T: float = 3.12
    Ntilde: int = 10
    nbar: int = 2
    margin: float = 0.02
    event_times: list[float] = field(default_factory=list)
    estimates: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not (0 < self.Dmin <= self.Dmax):
            raise ConfigurationError("need 0 < Dmin <= Dmax")
        if not (self.Dmin <= self.Dhat <= self.Dmax):
            raise ConfigurationError(f"initial estimate {self.Dhat} outside [{self.Dmin}, {self.Dmax}]")
        if self.a <= 0 or self.T <= 0 or self.Ntilde < 1 or self.nbar < 1 or self.margin < 0:
            raise ConfigurationError("a, T must be positive; Ntilde, nbar >= 1; margin >= 0")

    def record_event(self, t: float) -> None:
        if self.event_times and t <= self.event_times[-1]:
            raise ValueError(f"event time {t} not after {self.event_times[-1]}")
        self.event_times.append(float(t))
        self.estimates.append(float(self.Dhat))


def trigger_check(Omega_now: float, Omega_at_event: float, Upsilon_hat: float,
                  acc: AdaptationState, elapsed: float) -> tuple[bool, str]:
    """Return (fire, reason) with reason in {"timeout", "threshold", ""}."""
    if elapsed >= acc.T * (1 - _TIME_EPS):
        return True, "timeout"
    if Omega_at_event > 0 and Omega_now >= (1 + acc.a) * Upsilon_hat * Omega_at_event:
        return True, "threshold"
    return False, ""


class IdentifierAccumulators:
    """Streaming f_n, g_n for n = 1..nbar plus their sampled histories."""

    def __init__(self, nx: int, nbar: int):
        self.nbar = int(nbar)
        self.dx = 1.0 / (nx - 1)
        x = np.linspace(0.0, 1.0, nx)
        n = np.arange(1, self.nbar + 1)[:, None]
        w = trap_weights(nx, self.dx)
        self._sin = np.sin(n * np.pi * x) * w
        self._cos = (n * np.pi) * np.cos(n * np.pi * x) * w
        self.fn = np.zeros(self.nbar)
        self.gn = np.zeros(self.nbar)
        self._t: list[float] = []
        self._f: list[np.ndarray] = []
        self._g: list[np.ndarray] = []

    def accumulate(self, state: SystemState, dt: float) -> None:
        """Sample (f_n, g_n) at state.t, then advance f_n to state.t + dt."""
        self.gn = self._sin @ state.v
        self._t.append(float(state.t))
        self._f.append(self.fn.copy())
        self._g.append(self.gn.copy())
        self.fn = self.fn + dt * (self._cos @ state.v)

    def window(self, t0: float, t1: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Samples with t0 <= t <= t1 as (t, f[k, n], g[k, n])."""
        lo = bisect.bisect_left(self._t, t0 - 1e-12)
        hi = bisect.bisect_right(self._t, t1 + 1e-12)
        if hi <= lo:
            return np.empty(0), np.empty((0, self.nbar)), np.empty((0, self.nbar))
        return np.asarray(self._t[lo:hi]), np.asarray(self._f[lo:hi]), np.asarray(self._g[lo:hi])

    def prune(self, t_keep: float) -> None:
        k = bisect.bisect_left(self._t, t_keep - 1e-12)
        if k:
            del self._t[:k], self._f[:k], self._g[:k]


def accumulate(state: SystemState, acc: IdentifierAccumulators, dt: float) -> IdentifierAccumulators:
    acc.accumulate(state, dt)
    return acc


def window_start(t_next: float, event_times, Ntilde: int, T: float) -> float:
    """Earliest recorded event time no earlier than t_next - Ntilde*T."""
    if not len(event_times):
        raise ValueError("no recorded events")
    horizon = t_next - Ntilde * T
    k = bisect.bisect_left(list(event_times), horizon - 1e-12)
    if k >= len(event_times):
        return float(event_times[-1])
    return float(event_times[k])


@dataclass
class IdentifyResult:
    Dhat: float
    n_used: int | None
    H: np.ndarray
    G: np.ndarray
    candidate: float | None
    clamped: float | None
    decision: str  # "updated" | "kept_margin" | "kept_zero" | "kept_degenerate"
    mode_spread: float = 0.0


def default_g_tol(dt: float, dx: float, window: float) -> float:
    return dt * dx * dx * window


def identify(t: np.ndarray, f: np.ndarray, g: np.ndarray, Dhat_prev: float, Dmin: float, Dmax: float,
             nbar: int = 2, margin: float = 0.02, g_tol: float | None = None,
             dt: float | None = None, dx: float | None = None) -> IdentifyResult:
    """Batch least squares on the first mode whose window energy exceeds g_tol.

    ``t`` is (k,), ``f`` and ``g`` are (k, >=nbar). The margin rule keeps the
    previous estimate when the clamped candidate is within margin*Dhat_prev.
    """
    t = np.asarray(t, float)
    f = np.asarray(f, float).reshape(t.size, -1)[:, :nbar]
    g = np.asarray(g, float).reshape(t.size, -1)[:, :nbar]
    if t.size < 2 or t[-1] <= t[0]:
        return IdentifyResult(Dhat_prev, None, np.zeros(nbar), np.zeros(nbar), None, None, "kept_degenerate")
    if g_tol is None:
        step = dt if dt is not None else float(np.min(np.diff(t)))
        g_tol = default_g_tol(step, dx if dx is not None else step, t[-1] - t[0])
    H = np.trapezoid(g * f, t, axis=0)
    G = np.trapezoid(g * g, t, axis=0)
    live = np.flatnonzero(G > g_tol)
    if live.size == 0:
        return IdentifyResult(Dhat_prev, None, H, G, None, None, "kept_zero")
    n0 = int(live[0])
    cand = float(H[n0] / G[n0])
    ratios = H[live] / G[live]
    spread = float(np.max(ratios) - np.min(ratios))
    if spread > margin * max(abs(cand), 1e-300):
        log.info("modal candidates disagree: %s", np.array2string(ratios, precision=6))
    clamped = float(np.clip(cand, Dmin, Dmax))
    if abs(clamped - Dhat_prev) <= margin * Dhat_prev:
        return IdentifyResult(Dhat_prev, n0 + 1, H, G, cand, clamped, "kept_margin", spread)
    return IdentifyResult(clamped, n0 + 1, H, G, cand, clamped, "updated", spread)
