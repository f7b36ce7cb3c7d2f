"""Command-line entry point: validate, kernels, simulate, reproduce-dcv."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .config import RunConfig, load_config, parse_config, save_config
from .controller import build_gains, lyapunov_feasibility, norm_constants
from .core import ConfigurationError, validate_assumptions
from .dcv import DCV_K_BY_DHAT0
from .kernels import solve_stage1, solve_stage2, solve_stage3
from .simulator import SimulationBlowUp, run_closed_loop

log = logging.getLogger("delayadapt")


def _overrides(pairs):
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ConfigurationError(f"--set expects section.key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args) -> RunConfig:
    ov = _overrides(args.set)
    if args.config:
        cfg = load_config(args.config, ov)
    else:
        cfg = parse_config("", ov)
    if getattr(args, "out", None):
        cfg = cfg.replace(directory=args.out)
    return cfg


def cmd_validate(cfg: RunConfig, args) -> int:
    P = cfg.plant_params()
    rep = validate_assumptions(P)
    lyap = lyapunov_feasibility(P, cfg.delta, cfg.ra, cfg.rc, cfg.rd)
    print("# assumptions")
    print("\n".join(rep.lines()))
    print("# Lyapunov design conditions")
    print("\n".join(lyap.lines()))
    try:
        G = cfg.make_grid(P)
        print(f"# grid nx={G.nx} dx={G.dx:.6g} dt={G.dt} CFL reference={cfg.cfl_reference}: ok")
    except ConfigurationError as exc:
        print(f"# grid: {exc}")
        return 1
    return 0 if rep.all_passed and lyap.feasible and lyap.lambda1 > 0 else 2


def cmd_kernels(cfg: RunConfig, args) -> int:
    P = cfg.plant_params()
    G = cfg.make_grid(P)
    D = float(args.D) if args.D is not None else P.Dtrue
    out = cfg.output_dir() / f"kernels_D{D:g}"
    s1 = solve_stage1(P, G)
    s2 = solve_stage2(s1, 1.0 / D, P, G)
    s3 = solve_stage3(s2, P, G)
    for name, F in s1.tables().items():
        io.write_kernel_table(out / f"{name}.csv", F, "lower")
    io.write_kernel_table(out / "K1.csv", s2.K1)
    io.write_kernel_table(out / "K2.csv", s2.K2)
    io.write_kernel_table(out / "R.csv", s3.R, "upper")
    io.write_kernel_table(out / "P.csv", s3.P, "upper")
    prof = dict(s1.profiles())
    prof["eta"] = s2.eta
    io.write_profiles(out / "profiles.csv", G.x, prof)
    g = build_gains(s1, s2, s3, G)
    io.write_profiles(out / "gains.csv", G.x, {"M1": g.M1, "M2": g.M2, "M3": g.M3})
    lyap = lyapunov_feasibility(P, cfg.delta, cfg.ra, cfg.rc, cfg.rd, D=D)
    nc = norm_constants(s1, s2, s3, lyap)
    io.write_table(out / "constants.csv", ["name", "value"],
                   [[f"M4_{k + 1}", float(v)] for k, v in enumerate(g.M4)] + [[k, v] for k, v in nc.as_dict().items()])
    print(f"kernel tables at D={D:g} written to {out}")
    return 0


def _run_case(cfg: RunConfig, name: str, out: Path):
    try:
        tl = run_closed_loop(cfg.sim_config())
    except SimulationBlowUp as exc:
        log.error("%s: %s", name, exc)
        tl = exc.log
    io.write_trajectory(out / f"{name}.csv", tl)
    io.write_events(out / f"{name}_events.csv", tl)
    return tl


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = cfg.output_dir()
    save_config(cfg, out / "config.ini")
    tl = _run_case(cfg, args.name, out)
    print(f"trajectory: {out / (args.name + '.csv')}  events: {len(tl.events)}")
    return 1 if tl.aborted else 0


DCV_CASES = (
    ("open_loop", dict(mode="open_loop", Dhat0=None, identifier=False)),
    ("nonadaptive", dict(mode="adaptive", Dhat0=0.25, identifier=False)),
    ("adaptive_025", dict(mode="adaptive", Dhat0=0.25, identifier=True)),
    ("adaptive_150", dict(mode="adaptive", Dhat0=1.5, identifier=True)),
)


def dcv_case_configs(base: RunConfig) -> list[tuple[str, RunConfig]]:
    out = []
    for name, kw in DCV_CASES:
        K = DCV_K_BY_DHAT0.get(kw["Dhat0"], DCV_K_BY_DHAT0[0.25])
        out.append((name, base.replace(scenario="dcv", K=(K,), **kw)))
    return out


def cmd_reproduce(cfg: RunConfig, args) -> int:
    out = cfg.output_dir()
    rows = []
    for name, c in dcv_case_configs(cfg):
        tl = _run_case(c, name, out)
        ev = [e for e in tl.events if e["reason"] != "start"]
        a = tl.arrays()
        rows.append([name, c.mode, c.Dhat0, ev[0]["t"] if ev else None, ev[0]["Dhat"] if ev else None,
                     len(tl.events), a["Omega"][0], a["Omega"][-1], a["X"][-1, 0],
                     a["E"][-1] if "E" in a else None, tl.aborted or ""])
        print(f"{name:14s} first-event Dhat={rows[-1][4]}  Omega(end)/Omega(0)={a['Omega'][-1] / a['Omega'][0]:.4g}")
    io.write_table(out / "summary.csv", ["case", "mode", "Dhat0", "t_first_event", "Dhat_first_event", "n_events",
                                         "Omega_0", "Omega_end", "X_end", "E_end", "aborted"], rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="delayadapt", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("-c", "--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("-o", "--out", help="output directory (relative paths resolve under $DELAYADAPT_OUTPUT_ROOT)")
        return p

    common(sub.add_parser("validate", help="assumption and Lyapunov feasibility report"))
    k = common(sub.add_parser("kernels", help="solve and export kernel tables at one delay"))
    k.add_argument("--D", type=float, default=None, help="delay value (default: Dtrue)")
    s = common(sub.add_parser("simulate", help="one closed-loop run"))
    s.add_argument("--name", default="trajectory")
    common(sub.add_parser("reproduce-dcv", help="the four DCV cases and a summary"))
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return {"validate": cmd_validate, "kernels": cmd_kernels, "simulate": cmd_simulate,
                "reproduce-dcv": cmd_reproduce}[args.cmd](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
