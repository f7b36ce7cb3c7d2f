"""INI-style run configuration.

Sections: [plant], [dcv], [grid], [control], [trigger], [identifier],
[lyapunov], [output]. Unknown sections or keys are rejected with their line
number. Vectors are comma-separated; matrix rows are separated by ';'.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigurationError, Grid, PlantParams, SystemState, make_grid
from .dcv import DCV_DESIGN, DcvParams, dcv_initial_state, dcv_to_plant

OUTPUT_ROOT_ENV = "DELAYADAPT_OUTPUT_ROOT"

PLANT_COEFFS = ("q1", "q2", "d1", "d2", "d3", "d4", "p", "q", "c0", "A", "B", "C")


def _f(s):
    return float(s)


def _opt_f(s):
    s = s.strip()
    return None if s.lower() in ("auto", "none", "") else float(s)


def _vec(s):
    return tuple(float(v) for v in re.split(r"[,\s]+", s.strip()) if v)


def _mat(s):
    return tuple(_vec(r) for r in s.split(";") if r.strip())


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _fmt(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(", ".join(repr(x) for x in r) for r in v)
        return ", ".join(repr(x) for x in v)
    return str(v)


_COEFF_TYPES = {k: _f for k in PLANT_COEFFS}
_COEFF_TYPES.update(A=_mat, B=_vec, C=_vec)

# section -> key -> (field, parser)
SCHEMA = {
    "plant": {"scenario": ("scenario", str), "Dmin": ("Dmin", _f), "Dmax": ("Dmax", _f), "Dtrue": ("Dtrue", _f),
              "z0": ("z0", str), "w0": ("w0", str), "X0": ("X0", _vec)},
    "dcv": {"initial": ("initial", str)},
    "grid": {"nx": ("nx", int), "dt": ("dt", _f), "t_end": ("t_end", _f), "cfl_reference": ("cfl_reference", str)},
    "control": {"mode": ("mode", str), "Dhat0": ("Dhat0", _opt_f), "K": ("K", _vec), "identifier": ("identifier", _bool)},
    "trigger": {"a": ("a", _f), "T": ("T", _f)},
    "identifier": {"Ntilde": ("Ntilde", int), "nbar": ("nbar", int), "margin": ("margin", _f), "g_tol": ("g_tol", _opt_f)},
    "lyapunov": {"delta": ("delta", _opt_f), "ra": ("ra", _opt_f), "rc": ("rc", _opt_f), "rd": ("rd", _opt_f)},
    "output": {"directory": ("directory", str), "log_stride": ("log_stride", int), "energy": ("energy", _bool)},
}
# dict-valued overrides
_DICT_SECTIONS = {"plant": ("plant", _COEFF_TYPES), "dcv": ("dcv", {k: _f for k in DcvParams.field_names()})}


@dataclass
class RunConfig:
    scenario: str = "dcv"
    plant: dict = field(default_factory=dict)
    dcv: dict = field(default_factory=dict)
    Dmin: float = DCV_DESIGN["Dmin"]
    Dmax: float = DCV_DESIGN["Dmax"]
    Dtrue: float = DCV_DESIGN["Dtrue"]
    z0: str = "0*x"
    w0: str = "0*x"
    X0: tuple = (0.0,)
    initial: str = "nominal"
    nx: int = DCV_DESIGN["nx"]
    dt: float = DCV_DESIGN["dt"]
    t_end: float = DCV_DESIGN["t_end"]
    cfl_reference: str = "dtrue"
    mode: str = "adaptive"
    Dhat0: float | None = 0.25
    K: tuple = (DCV_DESIGN["K"],)
    identifier: bool = True
    a: float = DCV_DESIGN["a"]
    T: float = DCV_DESIGN["T"]
    Ntilde: int = DCV_DESIGN["Ntilde"]
    nbar: int = DCV_DESIGN["nbar"]
    margin: float = DCV_DESIGN["margin"]
    g_tol: float | None = None
    delta: float | None = DCV_DESIGN["delta"]
    ra: float | None = DCV_DESIGN["ra"]
    rc: float | None = DCV_DESIGN["rc"]
    rd: float | None = DCV_DESIGN["rd"]
    directory: str = "runs"
    log_stride: int = 10
    energy: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scenario not in ("dcv", "custom"):
            raise ConfigurationError(f"scenario must be 'dcv' or 'custom', got {self.scenario!r}")
        if self.mode not in ("open_loop", "nominal", "adaptive"):
            raise ConfigurationError(f"unknown control mode {self.mode!r}")
        if self.initial not in ("nominal", "compatible"):
            raise ConfigurationError(f"unknown initial-condition mode {self.initial!r}")
        if self.cfl_reference not in ("dmin", "dtrue"):
            raise ConfigurationError(f"cfl_reference must be dmin or dtrue, got {self.cfl_reference!r}")
        if self.mode == "adaptive" and self.Dhat0 is None:
            raise ConfigurationError("adaptive mode needs Dhat0")
        if self.Dhat0 is not None and not (self.Dmin <= self.Dhat0 <= self.Dmax):
            raise ConfigurationError(f"Dhat0={self.Dhat0} outside [{self.Dmin}, {self.Dmax}]")
        if self.scenario == "custom":
            missing = [k for k in PLANT_COEFFS if k not in self.plant]
            if missing:
                raise ConfigurationError(f"custom scenario needs [plant] keys: {', '.join(missing)}")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # -- builders --------------------------------------------------------

    def plant_params(self) -> PlantParams:
        K = np.asarray(self.K, float)
        if self.scenario == "dcv":
            base = dcv_to_plant(DcvParams(**self.dcv), K=float(K[0]) if K.size == 1 else 0.0,
                                Dmin=self.Dmin, Dmax=self.Dmax, Dtrue=self.Dtrue)
            ch = {k: (np.asarray(v, float) if isinstance(v, tuple) else v) for k, v in self.plant.items()}
            if K.size != 1:
                ch["K"] = K
            return base.replace(**ch) if ch else base
        kw = {k: (np.asarray(v, float) if isinstance(v, tuple) else v) for k, v in self.plant.items()}
        return PlantParams(**kw, K=K, Dmin=self.Dmin, Dmax=self.Dmax, Dtrue=self.Dtrue)

    def make_grid(self, params: PlantParams | None = None) -> Grid:
        params = params or self.plant_params()
        return make_grid(self.nx, self.dt, self.t_end, params, against=self.cfl_reference)

    def initial_state(self, grid: Grid, params: PlantParams) -> SystemState:
        if self.scenario == "dcv":
            return dcv_initial_state(grid, params, self.initial)
        x = grid.x
        ns = {"x": x, "np": np, "pi": np.pi, "sin": np.sin, "cos": np.cos, "exp": np.exp}
        z = np.broadcast_to(eval(self.z0, {"__builtins__": {}}, ns), x.shape).astype(float)  # noqa: S307
        w = np.broadcast_to(eval(self.w0, {"__builtins__": {}}, ns), x.shape).astype(float)  # noqa: S307
        X = np.asarray(self.X0, float)
        if X.size != params.m:
            raise ConfigurationError(f"X0 has {X.size} entries, plant order is {params.m}")
        return SystemState(z=z.copy(), w=w.copy(), v=np.zeros_like(x), X=X, t=0.0)

    def output_dir(self) -> Path:
        p = Path(self.directory)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return p if p.is_absolute() or not root else Path(root) / p

    def sim_config(self):
        from .simulator import SimConfig

        P = self.plant_params()
        G = self.make_grid(P)
        rho = DcvParams(**self.dcv).rho if (self.scenario == "dcv" and self.energy) else None
        return SimConfig(
            params=P, grid=G, initial=self.initial_state(G, P), mode=self.mode, Dhat0=self.Dhat0,
            identifier=self.identifier, a=self.a, T=self.T, Ntilde=self.Ntilde, nbar=self.nbar,
            margin=self.margin, g_tol=self.g_tol, delta=self.delta, ra=self.ra, rc=self.rc, rd=self.rd,
            log_stride=self.log_stride, energy_rho=rho,
        )


def _line_of(text: str, section: str, key: str | None) -> int:
    cur = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]", s)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return no
            continue
        if cur == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return no
    return 0


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; ``overrides`` maps "section.key" to raw strings."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from exc
    raw: dict[tuple[str, str], str] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigurationError(f"line {_line_of(text, sec, None)}: unknown section [{sec}]")
        for key, val in cp.items(sec):
            raw[(sec, key)] = val
    for dotted, val in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigurationError(f"override {dotted!r} must be section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA:
            raise ConfigurationError(f"override: unknown section [{sec}]")
        raw[(sec, key)] = val

    kw: dict = {"plant": {}, "dcv": {}}
    for (sec, key), val in raw.items():
        try:
            if key in SCHEMA[sec]:
                fname, parse = SCHEMA[sec][key]
                kw[fname] = parse(val)
            elif sec in _DICT_SECTIONS and key in _DICT_SECTIONS[sec][1]:
                kw[_DICT_SECTIONS[sec][0]][key] = _DICT_SECTIONS[sec][1][key](val)
            else:
                raise ConfigurationError(f"line {_line_of(text, sec, key)}: unknown key '{key}' in [{sec}]")
        except ValueError as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"line {_line_of(text, sec, key)}: bad value for [{sec}] {key}: {exc}") from exc
    return RunConfig(**kw)


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    return parse_config(Path(path).read_text(), overrides)


def to_ini(cfg: RunConfig) -> str:
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (fname, _) in keys.items():
            lines.append(f"{key} = {_fmt(getattr(cfg, fname))}")
        if sec in _DICT_SECTIONS:
            for key, val in getattr(cfg, _DICT_SECTIONS[sec][0]).items():
                lines.append(f"{key} = {_fmt(val)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_ini(cfg))
    return path
