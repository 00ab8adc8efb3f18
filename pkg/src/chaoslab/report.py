"""Render a study output directory into a markdown summary and figures.

The CSV remains the data contract; this module reads it back, tabulates the
estimates per metric and checkpoint, recomputes the log-log rate fits, and
draws one convergence figure per metric (estimates vs N on log-log axes with
the fitted slope) next to the markdown file.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import ConfigError
from .study import rate_fit

__all__ = ["load_rows", "render_report"]


def load_rows(in_dir: str | Path) -> tuple[list[dict], dict]:
    """Read study.csv and meta.json back from a study output directory."""
    in_dir = Path(in_dir)
    csv_path = in_dir / "study.csv"
    if not csv_path.exists():
        raise ConfigError(f"no study.csv under {in_dir}")
    rows = []
    with open(csv_path) as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "N": int(rec["N"]),
                    "t": float(rec["t"]),
                    "metric": rec["metric"],
                    "estimate": float(rec["estimate"]),
                    "stderr": float(rec["stderr"]),
                    "flag": rec.get("flag", "") or "",
                }
            )
    meta_path = in_dir / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return rows, meta


def _fit_points(rows: list[dict]) -> list[tuple[int, float]]:
    pts = []
    for r in rows:
        if "degenerate" in r["flag"]:
            continue
        value = max(r["estimate"], r["stderr"])
        if value > 0:
            pts.append((r["N"], value))
    return pts


def _metric_figure(metric: str, by_t: dict, fits: dict, out_path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for t, rows in sorted(by_t.items()):
        ns = [r["N"] for r in rows]
        vals = [max(r["estimate"], 1e-300) for r in rows]
        errs = [r["stderr"] for r in rows]
        label = f"t={t:g}"
        fit = fits.get(t)
        if fit is not None:
            label += f" (slope {fit['slope']:+.2f})"
        ax.errorbar(ns, vals, yerr=errs, marker="o", ms=3.5, lw=1.0, capsize=2, label=label)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel(metric)
    ax.set_title(metric)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_report(in_dir: str | Path, make_figures: bool = True) -> str:
    """Build report.md (returned as a string) and the per-metric figures."""
    in_dir = Path(in_dir)
    rows, meta = load_rows(in_dir)
    if not rows:
        raise ConfigError(f"study.csv under {in_dir} holds no rows")
    metrics = sorted({r["metric"] for r in rows})
    n_values = sorted({r["N"] for r in rows})

    lines = ["# Study report", ""]
    if meta:
        lines.append(
            f"config hash `{meta.get('config_hash', '?')}`, seed "
            f"{meta.get('master_seed', '?')}, wall time {meta.get('wall_time_s', '?')} s"
        )
        lines.append("")

    figures = []
    for metric in metrics:
        mrows = [r for r in rows if r["metric"] == metric]
        t_values = sorted({r["t"] for r in mrows})
        lines.append(f"## {metric}")
        lines.append("")
        header = "| t \\ N | " + " | ".join(str(n) for n in n_values) + " | slope (95% band) |"
        lines.append(header)
        lines.append("|" + "---|" * (len(n_values) + 2))
        fits = {}
        by_t = {}
        for t in t_values:
            trows = sorted((r for r in mrows if r["t"] == t), key=lambda r: r["N"])
            by_t[t] = trows
            cells = []
            for n in n_values:
                match = [r for r in trows if r["N"] == n]
                if match:
                    r = match[0]
                    mark = "*" if r["flag"] else ""
                    cells.append(f"{r['estimate']:.4g} ± {r['stderr']:.2g}{mark}")
                else:
                    cells.append("-")
            pts = _fit_points(trows)
            if len(pts) >= 3:
                fit = rate_fit(pts, seed=0)
                fits[t] = fit
                slope_cell = (
                    f"{fit['slope']:+.3f} [{fit['band'][0]:+.3f}, {fit['band'][1]:+.3f}]"
                )
            else:
                slope_cell = "n/a"
            lines.append(f"| {t:g} | " + " | ".join(cells) + f" | {slope_cell} |")
        lines.append("")
        if make_figures and any(len(_fit_points(tr)) > 0 for tr in by_t.values()):
            fig_path = in_dir / f"fig_{metric}.png"
            _metric_figure(metric, by_t, fits, fig_path)
            figures.append(fig_path.name)
            lines.append(f"![{metric}]({fig_path.name})")
            lines.append("")
    lines.append("flagged cells (*) are pooled, floored, or degenerate; see study.csv")
    lines.append("")

    text = "\n".join(lines)
    (in_dir / "report.md").write_text(text)
    return text
