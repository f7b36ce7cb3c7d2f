"""Grid refinement on the DCV instance: kernel residuals, gains and round-trip error.

Writes convergence.csv to the directory given as the first argument (default runs/convergence).
"""

import sys
from pathlib import Path

import numpy as np

from delayadapt import DcvParams, dcv_to_plant, make_grid
from delayadapt.controller import build_gains
from delayadapt.core import SystemState
from delayadapt.io import write_table
from delayadapt.kernels import (
    forward_transform,
    inverse_transform,
    solve_stage1,
    solve_stage2,
    solve_stage3,
    stage1_residuals,
    stage2_residuals,
    stage3_residuals,
)


def study(nxs=(26, 51, 101, 201), D=1.0):
    P = dcv_to_plant(DcvParams())
    rng = np.random.default_rng(0)
    rows, gains = [], {}
    for nx in nxs:
        G = make_grid(nx, 1e-3, 1.0, P, against="dtrue")
        s1 = solve_stage1(P, G)
        s2 = solve_stage2(s1, 1.0 / D, P, G)
        s3 = solve_stage3(s2, P, G)
        r = dict(stage1_residuals(s1, P))
        r.update({k: v for k, v in stage2_residuals(s2, s1, P).items() if k != "smooth_fraction"})
        r.update(stage3_residuals(s3, s2, P))
        st = SystemState(*rng.standard_normal((3, nx)), rng.standard_normal(1))
        back = inverse_transform(forward_transform(st, s1, s2, s3), s1, s2, s3)
        rt = max(np.max(np.abs(back.z - st.z)), np.max(np.abs(back.w - st.w)), np.max(np.abs(back.v - st.v)))
        gains[nx] = build_gains(s1, s2, s3)
        rows.append([nx, G.dx, max(r.values()), rt, float(gains[nx].M4[0])])
    for k in range(1, len(nxs)):
        a, b = gains[nxs[k - 1]], gains[nxs[k]]
        rows[k].append(float(np.max(np.abs(b.M3[::2] - a.M3))))
    rows[0].append(None)
    return rows


if __name__ == "__main__":
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/convergence")
    rows = study()
    header = ["nx", "dx", "max_residual", "round_trip", "M4", "M3_change"]
    write_table(out / "convergence.csv", header, rows)
    for r in rows:
        print("  ".join(f"{h}={v:.4g}" if isinstance(v, float) else f"{h}={v}" for h, v in zip(header, r)))
