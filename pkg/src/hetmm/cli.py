"""Command-line interface: dataset generation, single fits, and the
contamination Monte Carlo experiment.

Exit codes: 0 for a converged fit / successful run, 2 for a partial
(non-converged or incomplete) fit, 1 for any error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from .mm import MmOptions
from .results import METHOD_TAGS
from .simulate import (
    NAMED_SCHEMES,
    ContaminationScheme,
    ExperimentConfig,
    GroundTruth,
    MODEL_REGISTRY,
    apply_contamination,
    generate_sample,
    run_experiment,
)

_FLOAT_FMT = "%.17g"


def _fail(message: str) -> "click.ClickException":
    exc = click.ClickException(message)
    exc.exit_code = 1
    return exc


def _resolve_model(name: str):
    if name not in MODEL_REGISTRY:
        raise _fail(f"unknown model {name!r}; known models: {sorted(MODEL_REGISTRY)}")
    return MODEL_REGISTRY[name]()


def _resolve_scheme(spec) -> ContaminationScheme:
    if isinstance(spec, str):
        if spec not in NAMED_SCHEMES:
            raise _fail(
                f"unknown scheme {spec!r}; known schemes: {sorted(NAMED_SCHEMES)}"
            )
        return NAMED_SCHEMES[spec]
    if isinstance(spec, dict):
        unknown = set(spec) - {"name", "fraction", "x0", "y0", "jitter_sd"}
        if unknown:
            raise _fail(f"unknown scheme fields {sorted(unknown)} in {spec.get('name', spec)!r}")
        if "name" not in spec:
            raise _fail(f"inline scheme needs a 'name': {spec!r}")
        return ContaminationScheme(**spec)
    raise _fail(f"scheme entries must be names or objects, got {spec!r}")


def read_dataset(path: Path):
    """Parse a dataset CSV (x columns first, y last) with line-numbered errors."""
    try:
        lines = path.read_text().splitlines()
    except OSError as err:
        raise _fail(f"cannot read {path}: {err}") from err
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise _fail(f"{path}: empty file") from None
    header = [h.strip() for h in header]
    if len(header) < 2 or header[-1] != "y":
        raise _fail(f"{path}: header must list x columns then 'y' last, got {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise _fail(f"{path}: line {lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append([float(v) for v in rec])
        except ValueError as err:
            raise _fail(f"{path}: line {lineno}: {err}") from err
    if not rows:
        raise _fail(f"{path}: no data rows")
    data = np.asarray(rows, dtype=float)
    x = data[:, 0] if data.shape[1] == 2 else data[:, :-1]
    return x, data[:, -1]


def _write_dataset(path: Path, x: np.ndarray, y: np.ndarray) -> None:
    cols = ["x"] if x.ndim == 1 else [f"x{j + 1}" for j in range(x.shape[1])]
    X = x[:, None] if x.ndim == 1 else x
    with path.open("w", newline="") as fh:
        fh.write(",".join(cols + ["y"]) + "\n")
        for row, yi in zip(X, y):
            fields = [_FLOAT_FMT % v for v in row] + [_FLOAT_FMT % yi]
            fh.write(",".join(fields) + "\n")


@click.group()
def main() -> None:
    """Robust estimation for heteroscedastic nonlinear regression."""


@main.command()
@click.option("--n", type=int, required=True, help="Sample size.")
@click.option("--beta1", type=float, default=5.0, show_default=True)
@click.option("--beta2", type=float, default=2.0, show_default=True)
@click.option("--lambda", "lam", type=float, default=1.0, show_default=True,
              help="Variance parameter.")
@click.option("--sigma", type=float, default=1.0, show_default=True)
@click.option("--scheme", default="C0", show_default=True,
              help=f"Contamination scheme ({', '.join(sorted(NAMED_SCHEMES))}).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--model", "model_name", default="exp-growth", show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True,
              help="Output CSV path.")
def generate(n, beta1, beta2, lam, sigma, scheme, seed, model_name, out):
    """Generate a synthetic dataset, optionally contaminated."""
    if n < 1:
        raise _fail("--n must be at least 1")
    model = _resolve_model(model_name)
    sch = _resolve_scheme(scheme)
    truth = GroundTruth(beta=(beta1, beta2), lam=(lam,), sigma=sigma)
    x, y = generate_sample(n, truth, np.random.SeedSequence([seed, 0, 0]), model)
    x, y = apply_contamination(x, y, sch, np.random.SeedSequence([seed, 1, 0, 0]))
    try:
        _write_dataset(out, x, y)
    except OSError as err:
        raise _fail(f"cannot write {out}: {err}") from err
    click.echo(f"wrote {len(y)} observations to {out}")


@main.command()
@click.argument("dataset", type=click.Path(path_type=Path))
@click.option("--model", "model_name", default="exp-growth", show_default=True)
@click.option("--method", required=True,
              help=f"Estimator tag ({', '.join(METHOD_TAGS)}).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--subsets", type=int, default=500, show_default=True,
              help="Random subsets for the high-breakdown initial stage.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Write the fit JSON here instead of stdout.")
@click.pass_context
def fit(ctx, dataset, model_name, method, seed, subsets, out):
    """Fit one estimator to a dataset and emit the result as JSON."""
    from .pipelines import fit_method

    if method not in METHOD_TAGS:
        raise _fail(f"unknown method {method!r}; expected one of {', '.join(METHOD_TAGS)}")
    model = _resolve_model(model_name)
    x, y = read_dataset(dataset)
    options = MmOptions(seed=seed, n_subsets=subsets)
    try:
        result = fit_method(x, y, model, method, options)
    except (ValueError, RuntimeError, FloatingPointError, np.linalg.LinAlgError) as err:
        raise _fail(str(err)) from err
    payload = json.dumps(result.to_dict(), indent=2, default=str)
    if out is not None:
        try:
            Path(out).write_text(payload + "\n")
        except OSError as err:
            raise _fail(f"cannot write {out}: {err}") from err
    else:
        click.echo(payload)
    if not (result.converged and result.complete):
        ctx.exit(2)


def _config_from_json(doc: dict, config_path: Path) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise _fail(f"{config_path}: top level must be an object")
    known = {"n", "nrep", "master_seed", "schemes", "estimators", "truth", "model",
             "options", "out"}
    unknown = set(doc) - known
    if unknown:
        raise _fail(f"{config_path}: unknown config keys {sorted(unknown)}")
    truth_doc = doc.get("truth", {})
    truth = GroundTruth(
        beta=tuple(truth_doc.get("beta", (5.0, 2.0))),
        lam=tuple(truth_doc.get("lambda", (1.0,))),
        sigma=float(truth_doc.get("sigma", 1.0)),
    )
    opt_doc = doc.get("options", {})
    unknown_opts = set(opt_doc) - {"n_subsets", "max_irwls", "tol", "seed"}
    if unknown_opts:
        raise _fail(f"{config_path}: unknown solver options {sorted(unknown_opts)}")
    options = MmOptions(
        n_subsets=int(opt_doc.get("n_subsets", 500)),
        max_irwls=int(opt_doc.get("max_irwls", 200)),
        tol=float(opt_doc.get("tol", 1e-8)),
    )
    return ExperimentConfig(
        n=int(doc.get("n", 100)),
        nrep=int(doc.get("nrep", 1000)),
        master_seed=int(doc.get("master_seed", 0)),
        schemes=[_resolve_scheme(s) for s in doc.get("schemes", ["C0"])],
        estimators=list(doc.get("estimators", METHOD_TAGS)),
        truth=truth,
        model=doc.get("model", "exp-growth"),
        options=options,
    )


@main.command()
@click.option("--config", "config_path", type=click.Path(path_type=Path), required=True,
              help="JSON experiment configuration.")
@click.option("--out", type=click.Path(path_type=Path), default=None,
              help="Output directory (overrides the config's 'out').")
@click.option("--nrep", type=int, default=None, help="Override the replication count.")
@click.option("--seed", type=int, default=None, help="Override the master seed.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker processes for replications; 0 = all cores.")
@click.option("--figures/--no-figures", default=True, show_default=True,
              help="Render figures alongside the CSV output.")
def simulate(config_path, out, nrep, seed, threads, figures):
    """Run the contamination Monte Carlo experiment from a config file."""
    from .report import write_report

    try:
        doc = json.loads(Path(config_path).read_text())
    except OSError as err:
        raise _fail(f"cannot read {config_path}: {err}") from err
    except json.JSONDecodeError as err:
        raise _fail(f"{config_path}: invalid JSON: {err}") from err

    config = _config_from_json(doc, config_path)
    if nrep is not None:
        config.nrep = nrep
    if seed is not None:
        config.master_seed = seed
    out_dir = Path(out) if out is not None else Path(doc.get("out", "hetmm-report"))
    try:
        config.validate()
    except ValueError as err:
        raise _fail(str(err)) from err

    # fail on unwritable output before burning compute
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as err:
        raise _fail(f"output directory {out_dir} is not writable: {err}") from err

    n_jobs = -1 if threads == 0 else threads
    report = run_experiment(config, n_jobs=n_jobs)
    paths = write_report(report, out_dir)
    n_files = len(paths)
    if figures:
        from .plots import render_figures

        n_files += len(render_figures(report, out_dir))
    click.echo(
        f"wrote {n_files} report files to {out_dir} "
        f"({report.meta['wall_time_s']:.1f}s, {report.meta['n_errors']} fit errors)"
    )


if __name__ == "__main__":
    sys.exit(main())
