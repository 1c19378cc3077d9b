"""Figure rendering for simulation reports.

Renders variance-curve quantile bands and per-scheme boxplots of the
parameter estimates to image files next to the CSV output.  Uses the Agg
backend so the CLI works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .simulate import SimulationReport, summarize_curves

__all__ = ["render_figures"]

_BAND_COLOR = "#c5b3d6"
_OUTER_COLOR = "#e7dff0"


def _variance_band_figure(report, tag, scheme, path):
    bands = summarize_curves(report, tag, scheme)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    ax.fill_between(bands["x"], bands["q025"], bands["q975"], color=_OUTER_COLOR,
                    label="2.5-97.5%")
    ax.fill_between(bands["x"], bands["q25"], bands["q75"], color=_BAND_COLOR,
                    label="25-75%")
    ax.plot(bands["x"], bands["median"], color="black", lw=1.2, label="median")
    ax.plot(bands["x"], bands["true"], color="forestgreen", lw=1.5, label="true")
    ax.set_xlabel("x")
    ax.set_ylabel("fitted error scale")
    ax.set_title(f"{tag} under {scheme}")
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _estimate_boxplot(report, scheme, column, truth_value, path, title):
    fig, ax = plt.subplots(figsize=(6.4, 3.6))
    data, labels = [], []
    df = report.estimates
    for tag in report.config.estimators:
        cell = df[(df["scheme"] == scheme) & (df["estimator"] == tag)][column]
        vals = cell.to_numpy(dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            data.append(vals)
            labels.append(tag)
    if not data:
        plt.close(fig)
        return False
    ax.boxplot(data, tick_labels=labels, flierprops={"markersize": 3})
    ax.axhline(truth_value, color="forestgreen", lw=1.2)
    ax.set_title(f"{title} under {scheme}")
    ax.tick_params(axis="x", labelrotation=30, labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return True


def render_figures(report: SimulationReport, out_dir) -> list[Path]:
    """Render the report's figures under ``out_dir/figures``.

    One variance-band plot per (scheme, estimator) with a curve ensemble,
    plus per-scheme boxplots of each regression coefficient and of the
    refined variance parameter.  Returns the paths written.
    """
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    truth = report.config.truth
    for scheme in [s.name for s in report.config.schemes]:
        for tag in report.config.estimators:
            if (scheme, tag) not in report.curves:
                continue
            if np.all(np.isnan(report.curves[(scheme, tag)])):
                continue
            p = fig_dir / f"variance_{scheme}_{tag}.png"
            _variance_band_figure(report, tag, scheme, p)
            written.append(p)
        for j, value in enumerate(truth.beta):
            col = f"beta{j + 1}"
            p = fig_dir / f"{col}_{scheme}.png"
            if _estimate_boxplot(report, scheme, col, value, p, f"estimates of {col}"):
                written.append(p)
        if "lambda" in report.estimates.columns:
            p = fig_dir / f"lambda_refined_{scheme}.png"
            if _estimate_boxplot(
                report, scheme, "lambda_refined", truth.lam[0], p,
                "refined variance parameter",
            ):
                written.append(p)
    return written
