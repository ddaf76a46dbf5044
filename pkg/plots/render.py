#!/usr/bin/env python3
"""Render figures from the trial engine's CSV outputs.

The script consumes only the two documented CSV schemas and knows nothing
about how the files were produced:

* power-curve CSV (columns m, c, pi0, pi1, icc, alpha, power), written by
  ``crtsim power-formula --curve`` and ``--effect-curve``
* results CSV (columns scenario_id, cer, delta, n_per_arm, coef_set, icc_v,
  method, n_reps, n_reject, rate, mcse, ci_low, ci_high, fail_rate), written
  by ``crtsim run``

Four figure kinds::

    formula-curve    analytic power vs cluster size, one line per ICC, with
                     the finite plateau limit overlaid per ICC
    formula-effect   analytic power vs absolute improvement pi1 - pi0
    sim-power        simulated rejection rate vs villages per arm (delta > 0)
    type1-forest     null rejection rates with Monte Carlo CIs (delta == 0)

Rendering is deterministic: the Agg backend is forced, fonts and PNG
metadata are pinned, and groups are drawn in sorted order, so the same CSV
always produces the same image bytes.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.figure import Figure

KINDS = ("formula-curve", "formula-effect", "sim-power", "type1-forest")

CURVE_COLUMNS = ("m", "c", "pi0", "pi1", "icc", "alpha", "power")
RESULTS_COLUMNS = (
    "scenario_id",
    "cer",
    "delta",
    "n_per_arm",
    "coef_set",
    "icc_v",
    "method",
    "n_reps",
    "n_reject",
    "rate",
    "mcse",
    "ci_low",
    "ci_high",
    "fail_rate",
)

_CURVE_NUMERIC = ("m", "c", "pi0", "pi1", "icc", "alpha", "power")
_RESULTS_NUMERIC = (
    "cer",
    "delta",
    "n_per_arm",
    "icc_v",
    "n_reps",
    "n_reject",
    "rate",
    "mcse",
    "ci_low",
    "ci_high",
    "fail_rate",
)

# Pinned style so reruns and machines agree byte for byte.  DejaVu ships
# with matplotlib, so no system font lookup is involved.
_RC = {
    "font.family": "DejaVu Sans",
    "font.size": 10.0,
    "figure.dpi": 100.0,
    "savefig.dpi": 150.0,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8.5,
}

_COLORS = plt.rcParams["axes.prop_cycle"].by_key()["color"]


class InputError(Exception):
    """Unusable input: bad kind, missing columns, no rows, malformed cells."""


@dataclass(frozen=True)
class PlotSpec:
    """One rendering request.

    ``facets`` lists the result columns whose values distinguish lines
    (sim-power) or forest slots (type1-forest); curve kinds ignore it.
    """

    kind: str
    source: Path
    target: Path
    alpha_line: float = 0.05
    facets: tuple[str, ...] = ()


def _phi(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def _phi_inv(p: float) -> float:
    # Bisection is plenty here: only called once per ICC group, and the
    # tails involved (alpha around 0.05) are far from the extremes.
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _phi(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def plateau_limit(c: float, pi0: float, pi1: float, icc: float, alpha: float) -> float | None:
    """Large-cluster power limit implied by one curve group, None if unbounded.

    Recomputed from the CSV's own columns so this script stays decoupled
    from whatever produced the file.
    """
    if icc <= 0.0:
        return None
    var = (pi0 * (1.0 - pi0) + pi1 * (1.0 - pi1)) * icc
    ncp = math.sqrt((c - 1.0) * (pi1 - pi0) ** 2 / var)
    return _phi(ncp - _phi_inv(1.0 - alpha))


def read_rows(path: Path, required: tuple[str, ...], numeric: tuple[str, ...]) -> list[dict]:
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [col for col in required if col not in header]
        if missing:
            raise InputError(f"{path}: missing columns: {', '.join(missing)}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            row = dict(raw)
            for col in numeric:
                try:
                    row[col] = float(raw[col])
                except (TypeError, ValueError):
                    raise InputError(
                        f"{path}: line {lineno}: column {col!r} is not numeric: {raw[col]!r}"
                    ) from None
            rows.append(row)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _label(parts: list[tuple[str, object]]) -> str:
    return ", ".join(f"{name} {value:g}" if isinstance(value, float) else f"{name} {value}" for name, value in parts)


def _varying(rows: list[dict], columns: tuple[str, ...]) -> list[str]:
    """Columns that take more than one value, in the given order."""
    return [col for col in columns if len({row[col] for row in rows}) > 1]


def _group(rows: list[dict], columns: list[str]) -> list[tuple[tuple, list[dict]]]:
    buckets: dict[tuple, list[dict]] = {}
    for row in rows:
        buckets.setdefault(tuple(row[col] for col in columns), []).append(row)
    return sorted(buckets.items(), key=lambda item: item[0])


def _new_axes(figsize=(6.4, 4.2)):
    fig = Figure(figsize=figsize, layout="tight")
    ax = fig.add_subplot(111)
    return fig, ax


def figure_formula_curve(rows: list[dict]) -> Figure:
    fig, ax = _new_axes()
    # One line per distinct parameter combination; in practice only the ICC
    # varies, so the legend names ICC and any other column that differs.
    keys = _varying(rows, ("icc", "c", "pi0", "pi1", "alpha")) or ["icc"]
    for index, (key, group) in enumerate(_group(rows, keys)):
        group = sorted(group, key=lambda row: row["m"])
        color = _COLORS[index % len(_COLORS)]
        label = _label(list(zip(keys, key)))
        ax.plot([r["m"] for r in group], [r["power"] for r in group], color=color, label=label)
        first = group[0]
        limit = plateau_limit(first["c"], first["pi0"], first["pi1"], first["icc"], first["alpha"])
        if limit is not None:
            ax.axhline(limit, color=color, linestyle="--", linewidth=0.9, alpha=0.7)
            ax.annotate(
                f"limit {limit:.3f}",
                xy=(group[-1]["m"], limit),
                xytext=(-4, 4),
                textcoords="offset points",
                ha="right",
                fontsize=8,
                color=color,
            )
    ax.set_xlabel("children per village (m)")
    ax.set_ylabel("power")
    ax.set_title("Analytic power vs cluster size")
    ax.legend(loc="lower right")
    return fig


def figure_formula_effect(rows: list[dict]) -> Figure:
    fig, ax = _new_axes()
    keys = _varying(rows, ("icc", "m", "c", "pi0", "alpha")) or ["icc"]
    for index, (key, group) in enumerate(_group(rows, keys)):
        group = sorted(group, key=lambda row: row["pi1"] - row["pi0"])
        ax.plot(
            [r["pi1"] - r["pi0"] for r in group],
            [r["power"] for r in group],
            color=_COLORS[index % len(_COLORS)],
            marker="o",
            markersize=3,
            label=_label(list(zip(keys, key))),
        )
    ax.set_xlabel("absolute improvement (pi1 - pi0)")
    ax.set_ylabel("power")
    ax.set_title("Analytic power vs effect size")
    ax.legend(loc="lower right")
    return fig


def figure_sim_power(rows: list[dict], facets: tuple[str, ...]) -> Figure:
    rows = [row for row in rows if row["delta"] > 0.0]
    if not rows:
        raise InputError("no rows with delta > 0; sim-power needs alternative-scenario results")
    fig, ax = _new_axes()
    keys = ["method"] + _varying(rows, facets)
    for index, (key, group) in enumerate(_group(rows, keys)):
        group = sorted(group, key=lambda row: row["n_per_arm"])
        x = [r["n_per_arm"] for r in group]
        y = [r["rate"] for r in group]
        lower = [r["rate"] - r["ci_low"] for r in group]
        upper = [r["ci_high"] - r["rate"] for r in group]
        ax.errorbar(
            x,
            y,
            yerr=[lower, upper],
            color=_COLORS[index % len(_COLORS)],
            marker="o",
            markersize=3.5,
            capsize=2.5,
            label=_label(list(zip(keys, key))),
        )
    ax.set_xlabel("villages per arm")
    ax.set_ylabel("rejection rate")
    ax.set_title("Simulated power")
    ax.legend(loc="lower right")
    return fig


def figure_type1_forest(rows: list[dict], facets: tuple[str, ...], alpha_line: float) -> Figure:
    rows = [row for row in rows if row["delta"] == 0.0]
    if not rows:
        raise InputError("no rows with delta == 0; type1-forest needs null-scenario results")
    keys = ["method"] + _varying(rows, facets)
    slots = _group(rows, keys + ["scenario_id"])
    fig, ax = _new_axes(figsize=(6.4, max(2.4, 0.45 * len(slots) + 1.2)))
    labels = []
    for position, (key, group) in enumerate(slots):
        row = group[0]
        y = len(slots) - 1 - position
        ax.errorbar(
            [row["rate"]],
            [y],
            xerr=[[row["rate"] - row["ci_low"]], [row["ci_high"] - row["rate"]]],
            color=_COLORS[position % len(_COLORS)],
            marker="s",
            markersize=4,
            capsize=3,
        )
        labels.append(_label(list(zip(keys, key[:-1]))))
    ax.axvline(alpha_line, color="black", linestyle=":", linewidth=1.0)
    ax.annotate(
        f"{alpha_line:g}",
        xy=(alpha_line, len(slots) - 0.5),
        xytext=(2, 0),
        textcoords="offset points",
        fontsize=8,
    )
    ax.set_yticks(range(len(slots) - 1, -1, -1))
    ax.set_yticklabels(labels)
    ax.set_ylim(-0.5, len(slots) - 0.5)
    ax.set_xlabel("null rejection rate")
    ax.set_title("Type I error with 95% Monte Carlo CIs")
    return fig


def build_figure(spec: PlotSpec) -> Figure:
    if spec.kind in ("formula-curve", "formula-effect"):
        rows = read_rows(spec.source, CURVE_COLUMNS, _CURVE_NUMERIC)
        if spec.kind == "formula-curve":
            return figure_formula_curve(rows)
        return figure_formula_effect(rows)
    if spec.kind in ("sim-power", "type1-forest"):
        rows = read_rows(spec.source, RESULTS_COLUMNS, _RESULTS_NUMERIC)
        facets = spec.facets or ("delta", "cer", "icc_v", "coef_set", "n_per_arm")
        if spec.kind == "sim-power":
            # n_per_arm is the x axis, so it never distinguishes lines.
            line_facets = tuple(col for col in facets if col != "n_per_arm")
            return figure_sim_power(rows, line_facets)
        return figure_type1_forest(rows, facets, spec.alpha_line)
    raise InputError(f"unknown kind {spec.kind!r}; expected one of: {', '.join(KINDS)}")


def render(spec: PlotSpec) -> None:
    with matplotlib.rc_context(_RC):
        fig = build_figure(spec)
        # Fixed metadata: the PNG writer would otherwise embed the
        # matplotlib version string, which is not part of the figure.
        fig.savefig(spec.target, format="png", metadata={"Software": "render.py"})


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(description="Render a figure from an engine CSV.")
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="source", required=True, metavar="CSV")
    parser.add_argument("--out", dest="target", required=True, metavar="PNG")
    parser.add_argument(
        "--alpha",
        type=float,
        default=0.05,
        help="reference level drawn on the type1-forest plot (default 0.05)",
    )
    args = parser.parse_args(argv)
    spec = PlotSpec(
        kind=args.kind,
        source=Path(args.source),
        target=Path(args.target),
        alpha_line=args.alpha,
    )
    try:
        render(spec)
    except InputError as exc:
        print(f"render.py: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"render.py: error: cannot write {spec.target}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
