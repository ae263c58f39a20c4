"""One plot function (and console entry point) per figure type.

All functions read only the documented CSV/VTU schemas and write a PNG.
Missing columns raise SchemaError; empty series are skipped with a warning
rather than drawn as zeros.
"""

import argparse
import csv
import sys
import warnings
from collections import defaultdict

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import matplotlib.tri as mtri

from .vtk import read_vtu


class SchemaError(Exception):
    pass


_MARKERS = {1: "o", 2: "s", 3: "^"}


def _read_csv(path, required):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty table")
    missing = [c for c in required if c not in rows[0]]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")
    return rows


# -- convergence ---------------------------------------------------------------


def _convergence_series(path):
    rows = _read_csv(path, ["k", "n", "h", "err_Q_L2", "err_p_L2"])
    series = defaultdict(list)
    for r in rows:
        series[int(r["k"])].append(
            (float(r["h"]), float(r["err_Q_L2"]), float(r["err_p_L2"]))
        )
    return {k: np.array(sorted(v, reverse=True)) for k, v in series.items()}


def fitted_slopes(path):
    """{k: (slope_Q, slope_p)} from least-squares fits in log-log space."""
    out = {}
    for k, data in _convergence_series(path).items():
        if len(data) < 2:
            raise SchemaError(f"need at least two grid sizes for k={k}")
        lh = np.log(data[:, 0])
        out[k] = (
            float(np.polyfit(lh, np.log(data[:, 1]), 1)[0]),
            float(np.polyfit(lh, np.log(data[:, 2]), 1)[0]),
        )
    return out


def plot_convergence(path, out):
    """Log-log velocity/pressure error vs h with h^k reference slopes."""
    series = _convergence_series(path)
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), sharex=True)
    for ax, col, label in ((axes[0], 1, "velocity"), (axes[1], 2, "pressure")):
        for k, data in sorted(series.items()):
            h, err = data[:, 0], data[:, col]
            ax.loglog(h, err, _MARKERS.get(k, "x") + "-", label=f"k = {k}")
            # reference triangle anchored at the finest point
            href = np.array([h[-1], h[0]])
            ax.loglog(href, err[-1] * (href / h[-1]) ** k, "k--", lw=0.8,
                      label=f"$h^{k}$")
        ax.set_xlabel("h")
        ax.set_title(f"{label} $L_2$ error")
        ax.legend(fontsize=8)
    axes[0].set_ylabel("$L_2$ error")
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


# -- iterations / cost / breakdown -----------------------------------------------


def plot_iterations(path, out):
    """Mean iterations vs grid size, one line per (k, solve kind)."""
    rows = _read_csv(path, ["k", "n", "kind", "mean_iterations"])
    series = defaultdict(list)
    for r in rows:
        if r["mean_iterations"].startswith("nan"):
            continue
        series[(int(r["k"]), r["kind"])].append(
            (int(r["n"]), float(r["mean_iterations"]))
        )
    fig, ax = plt.subplots(figsize=(5.5, 4))
    plotted = False
    for (k, kind), pts in sorted(series.items()):
        if not pts:
            warnings.warn(f"no data for k={k} kind={kind}; omitted")
            continue
        pts = np.array(sorted(pts))
        ax.plot(pts[:, 0], pts[:, 1], _MARKERS.get(k, "x") + "-",
                label=f"k = {k}, {kind}")
        plotted = True
    if not plotted:
        raise SchemaError(f"{path}: no usable iteration data")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("grid size n")
    ax.set_ylabel("mean GMRES iterations")
    ax.set_ylim(bottom=0)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def plot_cost(path, out):
    """Log-log time per step vs unknown count with a linear reference."""
    rows = _read_csv(path, ["k", "n", "N", "seconds_per_step"])
    N, t = [], []
    for r in rows:
        if r["seconds_per_step"].startswith("nan"):
            warnings.warn(f"skipping failed row n={r['n']}")
            continue
        N.append(float(r["N"]))
        t.append(float(r["seconds_per_step"]))
    if not N:
        raise SchemaError(f"{path}: no usable cost data")
    N, t = np.array(N), np.array(t)
    order = np.argsort(N)
    N, t = N[order], t[order]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(N, t, "o-", label="measured")
    ax.loglog(N, t[0] * N / N[0], "k--", lw=0.8, label="linear")
    ax.set_xlabel("DG unknowns N")
    ax.set_ylabel("seconds per step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def breakdown_fractions(path):
    """Fraction of solver wall time per solve kind from a solvelog."""
    rows = _read_csv(path, ["step", "stage", "kind", "seconds"])
    totals = defaultdict(float)
    for r in rows:
        totals[r["kind"]] += float(r["seconds"])
    total = sum(totals.values())
    if total <= 0:
        raise SchemaError(f"{path}: no recorded solve time")
    return {kind: sec / total for kind, sec in sorted(totals.items())}


def plot_breakdown(path, out):
    fractions = breakdown_fractions(path)
    fig, ax = plt.subplots(figsize=(5, 4))
    bottom = 0.0
    for kind, frac in fractions.items():
        ax.bar(["run"], [frac], bottom=[bottom], label=kind)
        bottom += frac
    ax.set_ylabel("fraction of solver time")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


# -- field heatmaps -----------------------------------------------------------------


def plot_field(path, field, out):
    """Colormapped point data over the triangulation; vorticity uses a
    symmetric range so the two layers keep opposite colors."""
    data = read_vtu(path)
    if field not in data:
        raise SchemaError(f"{path}: field '{field}' not present")
    values = data[field]
    if values.ndim == 2:  # vector field: draw the magnitude
        values = np.linalg.norm(values, axis=1)
    tri = mtri.Triangulation(
        data["points"][:, 0], data["points"][:, 1], data["cells"]
    )
    fig, ax = plt.subplots(figsize=(5, 4.2))
    kwargs = {"cmap": "RdBu_r"}
    if field == "vorticity":
        vmax = np.max(np.abs(values))
        kwargs.update(vmin=-vmax, vmax=vmax)
    img = ax.tripcolor(tri, values, shading="gouraud", **kwargs)
    ax.set_aspect("equal")
    ax.set_title(field)
    fig.colorbar(img, ax=ax)
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


# -- console entry points --------------------------------------------------------------


def _simple_main(fn, what):
    def main(argv=None):
        ap = argparse.ArgumentParser(description=f"Plot {what}")
        ap.add_argument("input")
        ap.add_argument("output")
        args = ap.parse_args(argv)
        try:
            fn(args.input, args.output)
        except (SchemaError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        return 0

    return main


main_convergence = _simple_main(plot_convergence, "convergence orders")
main_iterations = _simple_main(plot_iterations, "iteration counts")
main_cost = _simple_main(plot_cost, "cost scaling")
main_breakdown = _simple_main(plot_breakdown, "runtime breakdown")


def main_field(argv=None):
    ap = argparse.ArgumentParser(description="Plot a snapshot field")
    ap.add_argument("input")
    ap.add_argument("field")
    ap.add_argument("output")
    args = ap.parse_args(argv)
    try:
        plot_field(args.input, args.field, args.output)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0
