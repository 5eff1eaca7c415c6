"""Report figures rendered from completed run artifacts.

The report path scans a run directory for solver fields, minimizing curves,
verification reports, and minimize summaries, and renders PNG figures next
to a delimited summary of what it found.  Everything here is presentation
only; the numerical artifacts stay CSV/JSON.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .pde_solver import load_field_csv


def render_field(field_csv: str, out_png: str) -> None:
    """Components over x at a few times (1d) or final-time maps (2d)."""
    field = load_field_csv(field_csv)
    times = [0.0, 0.5 * field.horizon, field.horizon]
    if field.box.dim == 1:
        xs = field.box.axis(0)
        fig, axes = plt.subplots(1, field.m, figsize=(5.5 * field.m, 3.6), squeeze=False)
        for i in range(field.m):
            ax = axes[0, i]
            for t in times:
                ax.plot(xs, field.slice_at(t)[i], label=f"t = {t:g}")
            ax.set_xlabel("x")
            ax.set_ylabel(f"u_{i + 1}")
            ax.legend(fontsize=8)
        fig.suptitle(Path(field_csv).stem)
    else:
        fig, axes = plt.subplots(1, field.m, figsize=(5.0 * field.m, 4.0), squeeze=False)
        for i in range(field.m):
            ax = axes[0, i]
            im = ax.imshow(
                field.slice_at(field.horizon)[i].T,
                origin="lower",
                extent=[-field.box.half_widths[0], field.box.half_widths[0],
                        -field.box.half_widths[1], field.box.half_widths[1]],
            )
            fig.colorbar(im, ax=ax, shrink=0.8)
            ax.set_title(f"u_{i + 1}(T, .)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def render_curves(curve_csvs, out_png: str) -> None:
    """Sample minimizing curves t -> x(t) overlaid in one frame."""
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for path in curve_csvs:
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        if data.ndim == 1:
            data = data[None, :]
        ax.plot(data[:, 0], data[:, 1], lw=0.9, alpha=0.75)
    ax.set_xlabel("t")
    ax.set_ylabel("x(t)")
    ax.set_title(f"{len(list(curve_csvs))} minimizing curves")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def render_check_margins(verify_json: str, out_png: str) -> None:
    """Margins of every verification check, failures highlighted."""
    reports = json.loads(Path(verify_json).read_text())
    names = [r["name"] for r in reports]
    margins = np.array([r["margin"] for r in reports], dtype=float)
    finite = np.where(np.isfinite(margins), margins, -1.0)
    colors = ["#2a7e43" if r["passed"] else "#b23a2f" for r in reports]
    fig, ax = plt.subplots(figsize=(7.2, 0.42 * len(names) + 1.2))
    ax.barh(np.arange(len(names)), np.maximum(finite, 1e-16), color=colors)
    ax.set_yticks(np.arange(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel("margin (tolerance minus defect)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def write_report(run_dir: str) -> list:
    """Render every figure the run directory supports; returns written paths."""
    base = Path(run_dir)
    written = []
    rows = [("artifact", "figure")]
    for field_csv in sorted(base.glob("field_*.csv")):
        out = base / f"report_{field_csv.stem}.png"
        render_field(str(field_csv), str(out))
        written.append(str(out))
        rows.append((field_csv.name, out.name))
    curve_files = sorted((base / "curves").glob("*.csv")) if (base / "curves").exists() else []
    if curve_files:
        out = base / "report_curves.png"
        render_curves([str(c) for c in curve_files], str(out))
        written.append(str(out))
        rows.append(("curves/", out.name))
    verify_json = base / "verify_report.json"
    if verify_json.exists():
        out = base / "report_check_margins.png"
        render_check_margins(str(verify_json), str(out))
        written.append(str(out))
        rows.append((verify_json.name, out.name))
    summary = base / "report_summary.csv"
    with open(summary, "w", encoding="ascii") as fh:
        for a, b in rows:
            fh.write(f"{a},{b}\n")
    written.append(str(summary))
    return written
