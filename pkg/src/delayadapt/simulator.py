"""Explicit upwind time stepping and closed-loop orchestration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .adaptation import (
    AdaptationState,
    IdentifierAccumulators,
    default_g_tol,
    identify,
    trigger_check,
    window_start,
)
from .controller import (
    ControlGains,
    LyapunovParams,
    NormConstants,
    adaptive_control,
    build_gains,
    lyapunov_feasibility,
    lyapunov_value,
    nominal_control,
    norm_constants,
    omega_bar,
)
from .core import ConfigurationError, Grid, PlantParams, SystemState, l2sq
from .kernels import KernelCache, forward_transform, solve_stage1

log = logging.getLogger(__name__)

MODES = ("open_loop", "nominal", "adaptive")


class SimulationBlowUp(FloatingPointError):
    """Non-finite state; ``log`` holds the trajectory up to the failure."""

    def __init__(self, msg, field_name=None, log=None):
        super().__init__(msg)
        self.field = field_name
        self.log = log


class ZenoError(RuntimeError):
    pass


def step(state: SystemState, U_now: float, params: PlantParams, grid: Grid) -> SystemState:
    """One explicit Euler / first-order upwind step of plant and actuator."""
    dt, dx = grid.dt, grid.dx
    z, w, v, X = state.z, state.w, state.v, state.X
    q1, q2, d1, d2, d3, d4 = params.q1, params.q2, params.d1, params.d2, params.d3, params.d4
    zs = dt * (d1 * z + d2 * w)
    ws = dt * (d3 * z + d4 * w)

    zn = np.empty_like(z)
    wn = np.empty_like(w)
    vn = np.empty_like(v)
    zn[1:] = z[1:] - (q1 * dt / dx) * (z[1:] - z[:-1]) + zs[1:]
    wn[:-1] = w[:-1] + (q2 * dt / dx) * (w[1:] - w[:-1]) + ws[:-1]
    vn[1:] = v[1:] - (dt / (params.Dtrue * dx)) * (v[1:] - v[:-1])

    vn[0] = U_now
    wn[-1] = params.c0 * vn[-1] + params.q * zn[-1]
    zn[0] = params.C @ X - params.p * wn[0]
    Xn = X + dt * (params.A @ X + params.B * w[0])

    for name, arr in (("z", zn), ("w", wn), ("v", vn), ("X", Xn)):
        if not np.all(np.isfinite(arr)):
            raise SimulationBlowUp(f"non-finite {name} at t={state.t + dt:.6g}", name)
    return SystemState(zn, wn, vn, Xn, state.t + dt)


def omega(state: SystemState, dx: float | None = None) -> float:
    if dx is None:
        dx = 1.0 / (state.z.size - 1)
    return l2sq(state.z, dx) + l2sq(state.w, dx) + l2sq(state.v, dx) + float(state.X @ state.X)


@dataclass
class SimConfig:
    params: PlantParams
    grid: Grid
    initial: SystemState
    mode: str = "adaptive"
    Dhat0: float | None = None  # defaults to Dtrue in nominal mode
    identifier: bool = True
    a: float = 2.0
    T: float = 3.12
    Ntilde: int = 10
    nbar: int = 2
    margin: float = 0.02
    g_tol: float | None = None
    delta: float | None = None
    ra: float | None = None
    rc: float | None = None
    rd: float | None = None
    log_stride: int = 10
    track_lyapunov: bool = True
    energy_rho: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.log_stride < 1:
            raise ConfigurationError("log_stride must be >= 1")
        if self.initial.z.size != self.grid.nx:
            raise ConfigurationError("initial profiles do not match the grid")


@dataclass
class TrajectoryLog:
    t: list = field(default_factory=list)
    Omega: list = field(default_factory=list)
    V: list = field(default_factory=list)
    Omega_bar: list = field(default_factory=list)
    X: list = field(default_factory=list)
    z1: list = field(default_factory=list)
    w0: list = field(default_factory=list)
    v1: list = field(default_factory=list)
    U: list = field(default_factory=list)
    Dhat: list = field(default_factory=list)
    event_flag: list = field(default_factory=list)
    xi: list = field(default_factory=list)  # (xi1, xi2, xi3, xi4) in force at each row
    E: list = field(default_factory=list)
    events: list = field(default_factory=list)  # dicts: t, Dhat, Upsilon, reason, diagnostics
    lyapunov: LyapunovParams | None = None
    aborted: str | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: np.asarray(getattr(self, k), dtype=float)
               for k in ("t", "Omega", "V", "Omega_bar", "z1", "w0", "v1", "U", "Dhat", "event_flag")}
        out["X"] = np.asarray(self.X, dtype=float).reshape(len(self.t), -1)
        out["xi"] = np.asarray(self.xi, dtype=float).reshape(len(self.t), 4)
        if self.E:
            out["E"] = np.asarray(self.E, dtype=float)
        return out

    @property
    def event_times(self) -> np.ndarray:
        return np.array([e["t"] for e in self.events])

    def columns(self) -> tuple[list[str], np.ndarray]:
        a = self.arrays()
        m = a["X"].shape[1]
        names = ["t", "Omega", "V"] + [f"X{k + 1}" for k in range(m)] + ["z1", "w0", "v1", "U", "Dhat", "event_flag",
                                                                      "Omega_bar", "xi1", "xi2", "xi3", "xi4"]
        cols = [a["t"], a["Omega"], a["V"], *a["X"].T, a["z1"], a["w0"], a["v1"], a["U"], a["Dhat"],
                a["event_flag"], a["Omega_bar"], *a["xi"].T]
        if "E" in a:
            names.append("E")
            cols.append(a["E"])
        return names, np.column_stack(cols) if len(self.t) else np.empty((0, len(names)))


class _Design:
    """Kernels, gains and norm constants at one delay value."""

    def __init__(self, cache: KernelCache, lyap: LyapunovParams | None, D: float):
        self.D = cache.key(D)
        self.s2, self.s3 = cache.get(self.D)
        self.s1 = cache.s1
        self.gains: ControlGains = build_gains(self.s1, self.s2, self.s3)
        self.nc: NormConstants | None = norm_constants(self.s1, self.s2, self.s3, lyap) if lyap is not None else None

    @property
    def Upsilon(self) -> float:
        return self.nc.Upsilon if self.nc is not None else np.inf


def run_closed_loop(cfg: SimConfig) -> TrajectoryLog:
    """Simulate the closed loop; returns the sampled trajectory and event record."""
    P, G = cfg.params, cfg.grid
    dt, dx = G.dt, G.dx
    n_steps = G.n_steps
    state = cfg.initial.copy()
    state.t = 0.0
    tl = TrajectoryLog()

    adaptive = cfg.mode == "adaptive"
    closed = cfg.mode != "open_loop"
    D0 = cfg.Dhat0 if cfg.Dhat0 is not None else (P.Dtrue if cfg.mode == "nominal" else None)
    if adaptive and D0 is None:
        raise ConfigurationError("adaptive mode needs Dhat0")
    design = None
    lyap = None
    if closed:
        lyap = lyapunov_feasibility(P, cfg.delta, cfg.ra, cfg.rc, cfg.rd, D=P.Dtrue)
        tl.lyapunov = lyap
        cache = KernelCache(solve_stage1(P, G), P, G)
        design = _Design(cache, lyap, D0)
    ad = AdaptationState(Dhat=D0 if D0 is not None else P.Dtrue, Dmin=P.Dmin, Dmax=P.Dmax, a=cfg.a, T=cfg.T,
                         Ntilde=cfg.Ntilde, nbar=cfg.nbar, margin=cfg.margin)
    acc = IdentifierAccumulators(G.nx, cfg.nbar) if adaptive and cfg.identifier else None
    T_steps = int(round(cfg.T / dt))

    om = omega(state, dx)
    om_event = om
    k_event = 0
    if adaptive:
        ad.record_event(0.0)
        tl.events.append({"t": 0.0, "Dhat": ad.Dhat, "Upsilon": design.Upsilon, "reason": "start", "diag": None})

    def log_row(k, U, flag):
        tl.t.append(state.t)
        tl.Omega.append(om)
        tl.X.append(state.X.copy())
        tl.z1.append(state.z[-1])
        tl.w0.append(state.w[0])
        tl.v1.append(state.v[-1])
        tl.U.append(U)
        tl.Dhat.append(ad.Dhat if closed else np.nan)
        tl.event_flag.append(flag)
        if design is not None and cfg.track_lyapunov:
            tg = forward_transform(state, design.s1, design.s2, design.s3)
            tl.V.append(lyapunov_value(tg, lyap, dx))
            tl.Omega_bar.append(omega_bar(tg, dx))
            nc = design.nc
            tl.xi.append((nc.xi1, nc.xi2, nc.xi3, nc.xi4))
        else:
            tl.V.append(np.nan)
            tl.Omega_bar.append(np.nan)
            tl.xi.append((np.nan,) * 4)
        if cfg.energy_rho is not None:
            from .dcv import cable_energy

            tl.E.append(cable_energy(state, cfg.energy_rho, dx))

    try:
        for k in range(n_steps + 1):
            if acc is not None:
                acc.accumulate(state, dt)
            flag = 0
            if adaptive and k > 0:
                fire, reason = trigger_check(om, om_event, design.Upsilon, ad, (k - k_event) * dt)
                if (k - k_event) >= T_steps and reason != "timeout":
                    fire, reason = True, "timeout"
                if fire:
                    flag = 1
                    diag = None
                    if acc is not None:
                        mu = window_start(state.t, ad.event_times, ad.Ntilde, ad.T)
                        tw, fw, gw = acc.window(mu, state.t)
                        gt = cfg.g_tol if cfg.g_tol is not None else default_g_tol(dt, dx, state.t - mu)
                        res = identify(tw, fw, gw, ad.Dhat, P.Dmin, P.Dmax, cfg.nbar, cfg.margin, gt)
                        diag = {"mu": mu, "n": res.n_used, "H": res.H.tolist(), "G": res.G.tolist(),
                                "candidate": res.candidate, "clamped": res.clamped, "decision": res.decision,
                                "mode_spread": res.mode_spread}
                        if res.decision == "updated":
                            ad.Dhat = res.Dhat
                            design = _Design(cache, lyap, ad.Dhat)
                        acc.prune(state.t - ad.Ntilde * ad.T - ad.T)
                    ad.record_event(state.t)
                    tl.events.append({"t": state.t, "Dhat": ad.Dhat, "Upsilon": design.Upsilon,
                                      "reason": reason, "diag": diag})
                    om_event = om
                    k_event = k
                    if len(tl.events) > n_steps + 1:
                        raise ZenoError(f"{len(tl.events)} events in {state.t:.6g} time units")
            if not closed:
                U = 0.0
            elif adaptive:
                U = adaptive_control(state, design.gains, ad.Dhat)
            else:
                U = nominal_control(state, design.gains)
            if k % cfg.log_stride == 0 or k == n_steps:
                log_row(k, U, flag)
            elif flag:
                log_row(k, U, flag)
            if k == n_steps:
                break
            state = step(state, U, P, G)
            state.t = (k + 1) * dt  # avoid drift from repeated addition
            om = omega(state, dx)
    except SimulationBlowUp as exc:
        tl.aborted = str(exc)
        exc.log = tl
        raise
    return tl
