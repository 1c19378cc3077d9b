"""Serialization of simulation reports: tidy CSVs, summary tables, curve
bands and a JSON metadata sidecar."""

from __future__ import annotations

import json
from pathlib import Path

from .simulate import SimulationReport, summarize_curves

__all__ = ["write_report", "FLOAT_FORMAT"]

#: 17 significant digits: enough for exact double-precision round trips.
FLOAT_FORMAT = "%.17g"


def write_report(report: SimulationReport, out_dir, float_format: str = FLOAT_FORMAT) -> dict:
    """Write a simulation report under ``out_dir``.

    Produces ``estimates.csv`` (one row per scheme/estimator/replication),
    ``summary.csv`` (MSE and bias per regression coefficient),
    ``curves/band_<scheme>_<estimator>.csv`` quantile bands, and
    ``metadata.json`` (config echo, seed, exclusion counts, wall time).
    Returns the paths written, keyed by artifact name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    est_path = out / "estimates.csv"
    report.estimates.to_csv(est_path, index=False, float_format=float_format)
    paths["estimates"] = est_path

    sum_path = out / "summary.csv"
    report.summary().to_csv(sum_path, index=False, float_format=float_format)
    paths["summary"] = sum_path

    curve_dir = out / "curves"
    curve_dir.mkdir(exist_ok=True)
    for scheme in report.config.schemes:
        for tag in report.config.estimators:
            if (scheme.name, tag) not in report.curves:
                continue
            try:
                bands = summarize_curves(report, tag, scheme.name)
            except ValueError:
                continue  # no usable curves in this cell
            p = curve_dir / f"band_{scheme.name}_{tag}.csv"
            bands.to_csv(p, index=False, float_format=float_format)
            paths[f"band_{scheme.name}_{tag}"] = p

    meta_path = out / "metadata.json"
    meta = {"config": report.config.to_dict(), **report.meta}
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    paths["metadata"] = meta_path
    return paths
