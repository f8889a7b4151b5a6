"""Command-line front end.

Subcommands::

    fit       -- macro Poisson/quasi-Poisson and Mack on a triangle file
    simulate  -- replicated micro disaggregation over a theta sweep (C-F)
    mixed     -- replicated mixed-Poisson experiment (model G)
    lrt       -- boundary variance test on one disaggregated dataset
    split     -- debug dump of one disaggregation

Every command emits a report whose ``results`` block is a pure function
of the flags (wall time and versions live in ``provenance``). Reports go
to ``--out`` or stdout; failures print a JSON error object to stderr and
exit nonzero.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time

import click
import numpy as np
import scipy

from . import __version__
from .errors import ReserveLabError
from .glm import POISSON, QUASIPOISSON
from .microsim import (
    DEFAULT_THETA_SWEEP,
    SimConfig,
    attach_covariate,
    child_rng,
    disaggregate,
    figure_csv,
    run_experiment,
)
from .mixed import (
    MixedSpec,
    fit_mixed,
    lrt_variance,
    mixed_figure_csv,
    run_mixed_experiment,
)
from .reserve import GlmReserver, MackChainLadder
from .triangle import load_triangle


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value]
    return value


def _report(command, config, results, t0):
    return {
        "schema_version": "1",
        "command": command,
        "config": _jsonable(config),
        "results": _jsonable(results),
        "provenance": {
            "package": "reservelab",
            "version": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "seed": config.get("seed"),
            "wall_time_s": time.time() - t0,
        },
    }


def _write(text, out):
    if out is None:
        click.echo(text, nl=False)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)


def _emit_report(report, out, fmt, csv_rows=None):
    if fmt == "json":
        _write(json.dumps(report, indent=2) + "\n", out)
    else:
        if csv_rows is None:
            raise ValueError("this command has no CSV form; use --format json")
        header = ",".join(csv_rows[0])
        lines = [header]
        for row in csv_rows[1:]:
            lines.append(",".join("" if v is None else
                                  (repr(v) if isinstance(v, float) else str(v))
                                  for v in row))
        _write("\n".join(lines) + "\n", out)


def _fail(exc):
    error = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(error), err=True)
    sys.exit(1)


def _parse_theta(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"theta list {text!r} is not comma-separated numbers")
    if not values:
        raise click.BadParameter("theta list is empty")
    return values


def _estimate_dict(estimate, with_cells=False):
    payload = {
        "model": estimate.model,
        "reserve": estimate.best_estimate,
        "msep": estimate.msep,
        "sqrt_msep": estimate.sqrt_msep,
        "dispersion": estimate.dispersion,
        "process_term": estimate.process_term,
        "estimation_term": estimate.estimation_term,
    }
    if with_cells:
        payload["cell_predictions"] = [
            [i, j, value] for (i, j), value in estimate.cell_predictions
        ]
    return payload


triangle_option = click.option(
    "--triangle", "triangle_path", required=True,
    type=click.Path(dir_okay=False), help="Triangle file (I=<n> header format).",
)
scale_option = click.option(
    "--scale", default=1.0, show_default=True, type=float,
    help="Multiplier applied to the stored amounts.",
)
out_option = click.option("--out", default=None, type=click.Path(dir_okay=False),
                          help="Report path (stdout when omitted).")
format_option = click.option("--format", "fmt", default="json", show_default=True,
                             type=click.Choice(["json", "csv"]), help="Report format.")
seed_option = click.option("--seed", default=0, show_default=True, type=int,
                           help="Master seed; replicate r uses the child seed (seed, r).")
threads_option = click.option(
    "--threads", default=1, show_default=True, type=int,
    help="Parallel replicate workers (capped by RESERVE_LAB_THREADS).",
)


@click.group()
@click.version_option(version=__version__)
def main():
    """Macro and micro stochastic claims reserving."""


@main.command("fit")
@triangle_option
@scale_option
@out_option
@format_option
def cmd_fit(triangle_path, scale, out, fmt):
    """Fit the macro models A and B plus Mack's model to a triangle."""
    t0 = time.time()
    try:
        tri = load_triangle(triangle_path, scale=scale)
        model_a = GlmReserver(family=POISSON).fit(tri)
        model_b = GlmReserver(family=QUASIPOISSON).fit(tri)
        mack_fit = MackChainLadder().fit(tri)
        results = {
            "models": [
                _estimate_dict(model_a.reserve_, with_cells=True),
                _estimate_dict(model_b.reserve_, with_cells=True),
                {
                    "model": "Mack",
                    "reserve": mack_fit.reserve_,
                    "msep": mack_fit.msep_,
                    "sqrt_msep": mack_fit.sqrt_msep_,
                    "development_factors": list(mack_fit.development_factors_),
                    "sigma2": list(mack_fit.sigma2_),
                },
            ]
        }
        report = _report(
            "fit", {"triangle": triangle_path, "scale": scale}, results, t0
        )
        rows = [("model", "reserve", "sqrt_msep")]
        for m in results["models"]:
            rows.append((m["model"], m["reserve"], m["sqrt_msep"]))
        _emit_report(report, out, fmt, csv_rows=rows)
    except (ReserveLabError, OSError, ValueError) as exc:
        _fail(exc)


@main.command("simulate")
@triangle_option
@scale_option
@click.option("--variant", default="D", show_default=True,
              type=click.Choice(["C", "D", "E", "F"]), help="Micro model variant.")
@click.option("--theta", default=",".join(f"{t:g}" for t in DEFAULT_THETA_SWEEP),
              show_default=True,
              help="Comma-separated sweep of expected payments per cluster.")
@click.option("--replicates", default=100, show_default=True, type=int)
@seed_option
@click.option("--rho", default=None, type=float,
              help="Covariate correlation target (defaults: E=0, F=0.8).")
@threads_option
@click.option("--figure-out", default=None, type=click.Path(dir_okay=False),
              help="Also write the sweep figure data as CSV (needs >= 2 theta values).")
@out_option
@format_option
def cmd_simulate(triangle_path, scale, variant, theta, replicates, seed, rho,
                 threads, figure_out, out, fmt):
    """Replicate micro disaggregation and refitting over a theta sweep."""
    t0 = time.time()
    try:
        tri = load_triangle(triangle_path, scale=scale)
        thetas = _parse_theta(theta)
        summaries = []
        for point, value in enumerate(thetas):
            config = SimConfig(theta=value, replicates=replicates,
                               seed=seed + point, variant=variant, rho=rho)
            summaries.append(run_experiment(tri, config, threads=threads))
        sweep = []
        for s in summaries:
            sweep.append(
                {
                    "variant": s.config.variant,
                    "theta": s.config.theta,
                    "expected_payments": s.expected_payments,
                    "replicates": s.config.replicates,
                    "failures": len(s.failures),
                    "mean_best_estimate": s.mean_best_estimate,
                    "mean_msep": s.mean_msep,
                    "std_msep": s.std_msep,
                    "mean_sqrt_msep": s.mean_sqrt_msep,
                    "mean_phi_micro": s.mean_phi_micro,
                    "macro_reference": _estimate_dict(s.macro_reference),
                    "records": [dataclasses.asdict(r) for r in s.records],
                }
            )
        results = {"sweep": sweep}
        config = {
            "triangle": triangle_path, "scale": scale, "variant": variant,
            "theta": thetas, "replicates": replicates, "seed": seed, "rho": rho,
        }
        report = _report("simulate", config, results, t0)
        if figure_out is not None:
            _write(figure_csv(summaries), figure_out)
        rows = [("variant", "theta", "expected_payments", "mean_best_estimate",
                 "mean_sqrt_msep", "macro_sqrt_msep")]
        for s in sweep:
            rows.append((s["variant"], s["theta"], s["expected_payments"],
                         s["mean_best_estimate"], s["mean_sqrt_msep"],
                         s["macro_reference"]["sqrt_msep"]))
        _emit_report(report, out, fmt, csv_rows=rows)
    except (ReserveLabError, OSError, ValueError) as exc:
        _fail(exc)


@main.command("mixed")
@triangle_option
@scale_option
@click.option("--theta", default="10", show_default=True,
              help="Comma-separated sweep of expected payments per cluster.")
@click.option("--replicates", default=100, show_default=True, type=int)
@seed_option
@click.option("--var-draws", default=2000, show_default=True, type=int,
              help="Monte-Carlo draws behind the reserve variance.")
@threads_option
@click.option("--figure-out", default=None, type=click.Path(dir_okay=False),
              help="Also write per-cell prediction data as CSV (first theta).")
@out_option
@format_option
def cmd_mixed(triangle_path, scale, theta, replicates, seed, var_draws, threads,
              figure_out, out, fmt):
    """Replicate the random-intercept (model G) experiment."""
    t0 = time.time()
    try:
        tri = load_triangle(triangle_path, scale=scale)
        thetas = _parse_theta(theta)
        points = []
        first_summary = None
        for point, value in enumerate(thetas):
            config = SimConfig(theta=value, replicates=replicates,
                               seed=seed + point, variant="G")
            summary = run_mixed_experiment(tri, config, threads=threads,
                                           var_draws=var_draws)
            if first_summary is None:
                first_summary = summary
            points.append(
                {
                    "theta": value,
                    "replicates": replicates,
                    "failures": len(summary.failures),
                    "mean_sigma2": summary.mean_sigma2,
                    "share_significant": summary.share_significant,
                    "mean_unconditional": summary.mean_unconditional,
                    "mean_conditional": summary.mean_conditional,
                    "mean_unconditional_sqrt_var": summary.mean_unconditional_sqrt_var,
                    "mean_conditional_sqrt_var": summary.mean_conditional_sqrt_var,
                    "macro_reference": _estimate_dict(summary.macro_reference),
                    "records": [
                        {
                            "index": r.index,
                            "n_payments": r.n_payments,
                            "n_claims": r.n_claims,
                            "sigma2": r.sigma2,
                            "lrt_statistic": r.lrt_statistic,
                            "lrt_p_value": r.lrt_p_value,
                            "unconditional": _estimate_dict(r.unconditional),
                            "conditional": _estimate_dict(r.conditional),
                        }
                        for r in summary.records
                    ],
                }
            )
        results = {"sweep": points}
        config = {
            "triangle": triangle_path, "scale": scale, "theta": thetas,
            "replicates": replicates, "seed": seed, "var_draws": var_draws,
        }
        report = _report("mixed", config, results, t0)
        if figure_out is not None:
            _write(mixed_figure_csv(first_summary, tri), figure_out)
        rows = [("theta", "mean_conditional", "mean_unconditional",
                 "mean_conditional_sqrt_var", "mean_unconditional_sqrt_var",
                 "share_significant")]
        for p in points:
            rows.append((p["theta"], p["mean_conditional"], p["mean_unconditional"],
                         p["mean_conditional_sqrt_var"], p["mean_unconditional_sqrt_var"],
                         p["share_significant"]))
        _emit_report(report, out, fmt, csv_rows=rows)
    except (ReserveLabError, OSError, ValueError) as exc:
        _fail(exc)


@main.command("lrt")
@triangle_option
@scale_option
@click.option("--theta", default=10.0, show_default=True, type=float)
@seed_option
@click.option("--bootstrap", default=200, show_default=True, type=int,
              help="Parametric bootstrap replicates (0 = asymptotic only).")
@out_option
@format_option
def cmd_lrt(triangle_path, scale, theta, seed, bootstrap, out, fmt):
    """Boundary variance test on one claim-allocated disaggregation."""
    t0 = time.time()
    try:
        tri = load_triangle(triangle_path, scale=scale)
        config = SimConfig(theta=theta, replicates=1, seed=seed, variant="G")
        dataset = disaggregate(tri, config, child_rng(seed, 0))
        fit = fit_mixed(MixedSpec.from_dataset(dataset))
        result = lrt_variance(fit, bootstrap=bootstrap, rng=child_rng(seed, 0, 1))
        results = {
            "sigma2": fit.sigma2,
            "statistic": result.statistic,
            "p_value": result.p_value,
            "bootstrap_p": result.bootstrap_p,
            "bootstrap_replicates": result.bootstrap_replicates,
            "n_payments": dataset.n_payments,
            "n_claims": int(fit.claim_id_table.size),
        }
        config_echo = {"triangle": triangle_path, "scale": scale, "theta": theta,
                       "seed": seed, "bootstrap": bootstrap}
        report = _report("lrt", config_echo, results, t0)
        rows = [("statistic", "p_value", "bootstrap_p", "sigma2"),
                (result.statistic, result.p_value, result.bootstrap_p, fit.sigma2)]
        _emit_report(report, out, fmt, csv_rows=rows)
    except (ReserveLabError, OSError, ValueError) as exc:
        _fail(exc)


@main.command("split")
@triangle_option
@scale_option
@click.option("--theta", default=10.0, show_default=True, type=float)
@click.option("--variant", default="C", show_default=True,
              type=click.Choice(["C", "D", "E", "F", "G"]))
@seed_option
@click.option("--rho", default=None, type=float)
@out_option
@format_option
def cmd_split(triangle_path, scale, theta, variant, seed, rho, out, fmt):
    """Dump one disaggregated dataset (debugging aid)."""
    t0 = time.time()
    try:
        tri = load_triangle(triangle_path, scale=scale)
        config = SimConfig(theta=theta, replicates=1, seed=seed, variant=variant, rho=rho)
        rng = child_rng(seed, 0)
        dataset = disaggregate(tri, config, rng)
        if variant in ("E", "F"):
            dataset = attach_covariate(dataset, config.resolved_rho, rng)
        payments = []
        for k in range(dataset.n_payments):
            record = {
                "occurrence": int(dataset.occurrence[k]),
                "development": int(dataset.development[k]),
                "amount": float(dataset.amount[k]),
            }
            if dataset.claim is not None:
                record["claim"] = int(dataset.claim[k])
            if dataset.covariate is not None:
                record["covariate"] = float(dataset.covariate[k])
            payments.append(record)
        results = {
            "n_payments": dataset.n_payments,
            "counts": {f"{i},{j}": n for (i, j), n in sorted(dataset.counts.items())},
            "payments": payments,
        }
        config_echo = {"triangle": triangle_path, "scale": scale, "theta": theta,
                       "variant": variant, "seed": seed, "rho": rho}
        report = _report("split", config_echo, results, t0)
        columns = list(payments[0].keys())
        rows = [tuple(columns)] + [tuple(p[c] for c in columns) for p in payments]
        _emit_report(report, out, fmt, csv_rows=rows)
    except (ReserveLabError, OSError, ValueError) as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
