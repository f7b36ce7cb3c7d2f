"""Comma-separated tables with a single header row."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_table(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(v) for v in r])
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if v is None:
        return ""
    return v


def _parse(s: str):
    if s == "":
        return None
    try:
        return float(s)
    except ValueError:
        return s


def read_table(path) -> tuple[list[str], list[list]]:
    """Header and rows; numeric cells become floats, empty cells None."""
    with Path(path).open(newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [[_parse(c) for c in r] for r in rd]
    return header, rows


def write_array(path, names, data: np.ndarray) -> Path:
    return write_table(path, names, np.asarray(data, dtype=float).tolist())


def read_array(path) -> tuple[list[str], np.ndarray]:
    header, rows = read_table(path)
    arr = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=float)
    return header, arr.reshape(len(rows), len(header))


def write_kernel_table(path, F: np.ndarray, domain: str = "square") -> Path:
    """One row per node in the kernel's domain: x, y, value."""
    n = F.shape[0]
    x = np.linspace(0.0, 1.0, n)
    if domain == "lower":
        ii, jj = np.tril_indices(n)
    elif domain == "upper":
        ii, jj = np.triu_indices(n)
    else:
        ii, jj = np.indices((n, n)).reshape(2, -1)
    return write_array(path, ["x", "y", "value"], np.column_stack([x[ii], x[jj], F[ii, jj]]))


def read_kernel_table(path, n: int | None = None) -> np.ndarray:
    _, a = read_array(path)
    if n is None:
        n = int(round(1 / np.min(np.diff(np.unique(a[:, 0]))))) + 1
    F = np.zeros((n, n))
    i = np.rint(a[:, 0] * (n - 1)).astype(int)
    j = np.rint(a[:, 1] * (n - 1)).astype(int)
    F[i, j] = a[:, 2]
    return F


def write_profiles(path, x: np.ndarray, profiles: dict[str, np.ndarray]) -> Path:
    names = ["x"]
    cols = [x]
    for k, v in profiles.items():
        v = np.asarray(v).reshape(x.size, -1)
        if v.shape[1] == 1:
            names.append(k)
            cols.append(v[:, 0])
        else:
            for c in range(v.shape[1]):
                names.append(f"{k}{c + 1}")
                cols.append(v[:, c])
    return write_array(path, names, np.column_stack(cols))


def write_trajectory(path, log) -> Path:
    names, data = log.columns()
    return write_array(path, names, data)


def write_events(path, log) -> Path:
    rows = []
    for e in log.events:
        d = e.get("diag") or {}
        G = d.get("G") or []
        H = d.get("H") or []
        rows.append([e["t"], e["Dhat"], e["Upsilon"], e["reason"], d.get("mu"), d.get("n"),
                     G[0] if G else None, H[0] if H else None, d.get("candidate"), d.get("clamped"),
                     d.get("decision"), d.get("mode_spread")])
    return write_table(path, ["t", "Dhat", "Upsilon", "reason", "mu", "n_used", "G1", "H1",
                              "candidate", "clamped", "decision", "mode_spread"], rows)
