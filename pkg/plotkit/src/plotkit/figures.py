"""Figure renderers for the simulation harness's CSV/JSON outputs.

Each figure kind consumes only the documented output files (never the
simulator's internal state):

* ``valley_growth``      <- valleys.csv (t, replica, valley_len,
                            sup_over_valley, saturated)
* ``mass_decay``         <- series.csv (t, replica, l1, sup, clip_count)
* ``moment_vs_oracle``   <- moments.csv (t, k, estimate, ci, oracle_value)
* ``dim_partial_sums``   <- dim_partial_sums.csv (rho, n, nu, partial_sum)

When a report.json carrying a scaling fit is supplied, the fitted line is
drawn and annotated with its slope and r^2.  Rendering is read-only and
deterministic: equal inputs produce byte-identical vector output.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

FIGURE_KINDS = ("valley_growth", "mass_decay", "moment_vs_oracle",
                "dim_partial_sums")

# stable ids make SVG output reproducible across renders; keep text as
# text elements so annotations stay machine-checkable
matplotlib.rcParams["svg.hashsalt"] = "plotkit"
matplotlib.rcParams["svg.fonttype"] = "none"


class PlotError(ValueError):
    """Bad figure spec or input files not matching the documented schema."""


@dataclass(frozen=True)
class FigureSpec:
    kind: str
    inputs: dict
    output: str

    @classmethod
    def from_json(cls, path) -> "FigureSpec":
        with open(path) as fh:
            payload = json.load(fh)
        extra = set(payload) - {"kind", "inputs", "output"}
        if extra:
            raise PlotError(f"unknown spec key '{sorted(extra)[0]}'")
        for key in ("kind", "inputs", "output"):
            if key not in payload:
                raise PlotError(f"missing spec key '{key}'")
        return cls(payload["kind"], payload["inputs"], payload["output"])


def read_csv(path, required_columns) -> dict:
    """Load a CSV as float column arrays, checking the documented schema."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = list(reader)
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise PlotError(f"{path}: empty file")
    for col in required_columns:
        if col not in header:
            raise PlotError(f"{path}: missing column '{col}'")
    idx = {col: header.index(col) for col in header}
    data = {}
    for col in header:
        j = idx[col]
        vals = []
        for row in rows:
            cell = row[j]
            if cell == "true":
                vals.append(1.0)
            elif cell in ("false", ""):
                vals.append(0.0)
            else:
                vals.append(float(cell))
        data[col] = np.asarray(vals)
    return data


def _load_fit(inputs, *names):
    """First matching scaling fit from an optional report.json."""
    path = inputs.get("report_json")
    if not path:
        return None
    with open(path) as fh:
        report = json.load(fh)
    fits = report.get("fits", {})
    if "fit" in report:
        fits = {"fit": report["fit"], **fits}
    for name in names:
        if name in fits:
            return fits[name]
    return None


def _annotate_fit(ax, fit, x_line):
    y_line = np.exp(fit["intercept"] + fit["slope"] * x_line)
    ax.plot(x_line, y_line, "k--", linewidth=1.2,
            label=f"fit: slope={fit['slope']:.4f}, r2={fit['r_squared']:.4f}")


def _quartiles(t, y):
    ts = np.unique(t)
    q1, q2, q3 = [], [], []
    for tv in ts:
        vals = y[t == tv]
        a, b, c = np.percentile(vals, [25, 50, 75])
        q1.append(a)
        q2.append(b)
        q3.append(c)
    return ts, np.array(q1), np.array(q2), np.array(q3)


def _render_valley_growth(spec, ax):
    data = read_csv(spec.inputs["valleys_csv"],
                    ("t", "replica", "valley_len", "sup_over_valley",
                     "saturated"))
    ts, q1, q2, q3 = _quartiles(data["t"], data["valley_len"])
    x = np.cbrt(ts)
    positive = q2 > 0
    ax.scatter(x, np.where(q2 > 0, q2, np.nan), color="C0", zorder=3,
               label="median valley half-length")
    if positive.sum() >= 2:
        ax.fill_between(x, np.maximum(q1, 1e-12), np.maximum(q3, 1e-12),
                        alpha=0.25, color="C0", label="interquartile range")
        ax.set_yscale("log")
        fit = _load_fit(spec.inputs, "valley_length")
        if fit is not None:
            _annotate_fit(ax, fit, x)
    ax.set_xlabel(r"$t^{1/3}$  (time$^{1/3}$)")
    ax.set_ylabel(r"valley half-length $\mathcal{L}(t)$  (space units)")
    ax.set_title("valley growth")


def _render_mass_decay(spec, ax):
    data = read_csv(spec.inputs["series_csv"],
                    ("t", "replica", "l1", "sup", "clip_count"))
    ts, q1, q2, q3 = _quartiles(data["t"], data["l1"])
    x = np.cbrt(ts)
    ax.plot(x, q2, "o-", color="C1", label="median total mass")
    ax.fill_between(x, np.maximum(q1, 1e-300), np.maximum(q3, 1e-300),
                    alpha=0.25, color="C1", label="interquartile range")
    ax.set_yscale("log")
    fit = _load_fit(spec.inputs, "fit", "mass_decay")
    if fit is not None:
        _annotate_fit(ax, fit, x)
    ax.set_xlabel(r"$t^{1/3}$  (time$^{1/3}$)")
    ax.set_ylabel(r"$\|v(t)\|_{L^1}$  (mass)")
    ax.set_title("total-mass dissipation")


def _render_moment_vs_oracle(spec, ax):
    data = read_csv(spec.inputs["moments_csv"],
                    ("t", "k", "estimate", "ci", "oracle_value"))
    ks = np.unique(data["k"])
    k = float(spec.inputs.get("k", max(ks)))
    sel = data["k"] == k
    if not sel.any():
        raise PlotError(f"moments csv has no rows with k={k}")
    t, est, ci = data["t"][sel], data["estimate"][sel], data["ci"][sel]
    order = np.argsort(t)
    t, est, ci = t[order], est[order], ci[order]
    ax.errorbar(t, est, yerr=ci, fmt="o-", color="C0", capsize=3,
                label=f"Monte Carlo E[u(t,0)^{k:g}] with 95% CI")
    oracle = data["oracle_value"][sel][order]
    have = oracle != 0.0
    if have.any():
        ax.plot(t[have], oracle[have], "s--", color="C3",
                label="integral-equation oracle")
    oracle_csv = spec.inputs.get("oracle_csv")
    if oracle_csv:
        dense = read_csv(oracle_csv, ("t", "m2"))
        ax.plot(dense["t"], dense["m2"], "-", color="C3", alpha=0.6,
                label="oracle curve")
    ax.set_xlabel("t  (time)")
    ax.set_ylabel(f"E[u(t,0)^{k:g}]")
    ax.set_title("point moments vs oracle")


def _render_dim_partial_sums(spec, ax):
    data = read_csv(spec.inputs["dim_csv"], ("rho", "n", "nu", "partial_sum"))
    report_path = spec.inputs.get("report_json")
    estimate = None
    if report_path:
        with open(report_path) as fh:
            estimate = json.load(fh).get("estimate")
    for rho in np.unique(data["rho"]):
        sel = data["rho"] == rho
        n = data["n"][sel]
        order = np.argsort(n)
        ax.plot(n[order], data["partial_sum"][sel][order], "o-",
                label=rf"$\rho$ = {rho:g}")
    ax.set_xlabel("shell index n")
    ax.set_ylabel(r"$\sum_{m\leq n} \nu_\rho^m$  (cover value)")
    title = "macroscopic-dimension partial sums"
    if estimate is not None:
        title += f"  (estimate = {estimate:g})"
    ax.set_title(title)


_RENDERERS = {
    "valley_growth": _render_valley_growth,
    "mass_decay": _render_mass_decay,
    "moment_vs_oracle": _render_moment_vs_oracle,
    "dim_partial_sums": _render_dim_partial_sums,
}


def render(spec: FigureSpec) -> str:
    """Render one figure to the spec's output path; returns the path.

    SVG by default (PNG when the output path ends in .png); inputs are
    opened read-only and the output is deterministic for equal inputs.
    """
    if spec.kind not in _RENDERERS:
        raise PlotError(f"unknown figure kind '{spec.kind}' "
                        f"(expected one of {', '.join(FIGURE_KINDS)})")
    ext = os.path.splitext(spec.output)[1].lower()
    if ext not in (".svg", ".png"):
        raise PlotError(f"unsupported output format '{ext}' (use .svg or .png)")
    fig, ax = plt.subplots(figsize=(7, 4.5), constrained_layout=True)
    try:
        _RENDERERS[spec.kind](spec, ax)
        ax.legend(loc="best", fontsize=8)
        fig.savefig(spec.output, format=ext[1:], metadata=_metadata(ext))
    finally:
        plt.close(fig)
    return spec.output


def _metadata(ext):
    # drop timestamps so re-rendering is byte-identical
    if ext == ".svg":
        return {"Date": None}
    return None
