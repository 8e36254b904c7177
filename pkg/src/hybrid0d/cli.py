"""Command line entry point.

Exit codes: 0 success, 2 invalid input, 3 solver divergence.
"""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click

from .calibration import write_calibration_report
from .circuit import FluidProperties, assemble_network, load_bcs, load_network, save_network
from .errors import SolverDivergenceError, ValidationError
from .features import read_feature_csv, write_feature_csv
from .geometry import parse_centerline
from .mlp import TrainConfig, fit_parameter_model, load_models, predict_parameters, save_models, write_training_report
from .study import (CohortSpec, StudyConfig, baseline_parameters, calibrate_geometry, compute_mpe, crossval,
                    drop_quadratic, emit_report, featurize_geometry, load_geometry, load_reference)
from .solver import SimulationConfig, read_solution_csv, simulate, write_solution_csv
from .synth import SyntheticOracle, generate_synthetic_cohort

EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3

_COMMON = {
    "flavor": click.option("--flavor", type=click.Choice(["ri", "rri"]), default=None, help="Element model."),
    "loss": click.option("--loss", type=click.Choice(["mse", "proximity"]), default=None, help="Training loss."),
    "entrance_length_factor": click.option("--entrance-length-factor", type=float, default=None,
                                           help="Junction outlet shift in outlet radii (0 disables)."),
    "seed": click.option("--seed", type=int, default=None, help="Random seed."),
    "out": click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory."),
}
_DEFAULTS = {"flavor": "rri", "loss": "mse", "entrance_length_factor": 10.0, "seed": 0, "out": "."}


def common_options(fn):
    """Accept the global flags on a subcommand too; subcommand values win."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        opts = dict(ctx.obj or {})
        for key in _COMMON:
            if kwargs.get(key) is not None:
                opts[key] = kwargs[key]
            kwargs.pop(key, None)
        settings = {k: (opts.get(k) if opts.get(k) is not None else v) for k, v in _DEFAULTS.items()}
        Path(settings["out"]).mkdir(parents=True, exist_ok=True)
        return fn(settings, *args, **kwargs)

    for opt in _COMMON.values():
        wrapper = opt(wrapper)
    return wrapper


@click.group()
@_COMMON["flavor"]
@_COMMON["loss"]
@_COMMON["entrance_length_factor"]
@_COMMON["seed"]
@_COMMON["out"]
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, verbose, **opts):
    """Hybrid lumped-parameter hemodynamics toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = opts


def _out(settings, name):
    return Path(settings["out"]) / name


@cli.command()
@click.argument("centerline", type=click.Path(exists=True, dir_okay=False))
@click.option("--bcs", type=click.Path(exists=True, dir_okay=False), help="Boundary conditions JSON.")
@common_options
def prep(settings, centerline, bcs):
    """Discretize a centerline; with --bcs also write features and a
    baseline network."""
    from .geometry import hybrid_discretization

    tree = parse_centerline(centerline)
    disc = hybrid_discretization(tree, settings["entrance_length_factor"])
    _out(settings, "discretization.json").write_text(json.dumps(disc.to_dict(), indent=1, sort_keys=True))
    click.echo(f"discretization: {disc.counts()}")
    if bcs:
        fluid = FluidProperties()
        geo = featurize_geometry(tree, load_bcs(bcs), fluid, settings["entrance_length_factor"],
                                 Path(centerline).stem)
        rows = [(geo.id, eid, geo.disc.element(eid).kind, geo.gamma[eid], fv) for eid, fv in geo.features.items()]
        write_feature_csv(rows, _out(settings, "features.csv"))
        params = baseline_parameters(geo.disc, fluid)
        if settings["flavor"] == "ri":
            params = drop_quadratic(params)
        save_network(assemble_network(geo.disc, params, geo.bcs, fluid), _out(settings, "network.json"))
        click.echo(f"features: {len(rows)} rows")


@cli.command("simulate")
@click.argument("network", type=click.Path(exists=True, dir_okay=False))
@click.option("--steps", type=int, default=1000, show_default=True, help="Steps per cycle.")
@click.option("--cycles", type=int, default=10, show_default=True)
@click.option("--last-cycle-only", is_flag=True)
@common_options
def simulate_cmd(settings, network, steps, cycles, last_cycle_only):
    """Run a network JSON forward and write solution.csv."""
    net = load_network(network)
    sol = simulate(net, SimulationConfig(steps_per_cycle=steps, cycles=cycles, flavor=settings["flavor"]))
    write_solution_csv(sol, _out(settings, "solution.csv"), last_cycle_only)
    click.echo(f"{sol.cycles_run} cycles, converged={sol.converged}")


@cli.command("calibrate")
@click.argument("centerline", type=click.Path(exists=True, dir_okay=False))
@click.argument("bcs", type=click.Path(exists=True, dir_okay=False))
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.option("--cycle-period", type=float, default=1.0, show_default=True)
@common_options
def calibrate_cmd(settings, centerline, bcs, reference, cycle_period):
    """Fit element parameters to a reference solution CSV."""
    fluid = FluidProperties()
    geo = featurize_geometry(parse_centerline(centerline), load_bcs(bcs), fluid,
                             settings["entrance_length_factor"], Path(centerline).stem)
    result = calibrate_geometry(geo, load_reference(reference, cycle_period), settings["flavor"], fluid)
    write_calibration_report(result, _out(settings, "calibration.json"))
    click.echo(f"{result.status} after {result.iterations} iterations, residual {result.residual_norm:.6g}")


@cli.command()
@click.argument("cohort", type=click.Path(exists=True))
@common_options
def featurize(settings, cohort):
    """Calibrate every geometry of a cohort and write the training table."""
    spec = CohortSpec.load(cohort)
    fluid = FluidProperties()
    cfg = StudyConfig(flavor=settings["flavor"], entrance_length_factor=settings["entrance_length_factor"])
    rows, targets = [], {}
    for rec in spec.geometries:
        geo, ref = load_geometry(rec, spec, cfg, fluid)
        cal = calibrate_geometry(geo, ref, cfg.flavor, fluid)
        for eid, fv in geo.features.items():
            rows.append((geo.id, eid, geo.disc.element(eid).kind, geo.gamma[eid], fv))
            targets[(geo.id, eid)] = cal.params[eid]
    write_feature_csv(rows, _out(settings, "features.csv"), targets)
    click.echo(f"{len(rows)} rows from {len(spec.geometries)} geometries")


@cli.command()
@click.argument("features", type=click.Path(exists=True, dir_okay=False))
@click.option("--epochs", type=int, default=5000, show_default=True)
@common_options
def train(settings, features, epochs):
    """Train the six parameter networks on a featurized table."""
    records = read_feature_csv(features)
    cfg = TrainConfig(epochs=epochs, seed=settings["seed"], loss=settings["loss"])
    models = {}
    for kind in ("vessel", "junction"):
        for k, target in enumerate(("R_lin", "R_quad", "L")):
            if target == "R_quad" and settings["flavor"] == "ri":
                # the quadratic term is fixed at zero, so the model learns the constant
                rows = [(r["geometry_id"], r["element_id"], r["features"].as_array(kind), 0.0, r["gamma"])
                        for r in records if r["kind"] == kind]
            else:
                rows = [(r["geometry_id"], r["element_id"], r["features"].as_array(kind), r["target"][k],
                         r["gamma"])
                        for r in records if r["kind"] == kind and r.get("target") and r["target"][k] is not None]
            if not rows:
                raise ValidationError(f"no training rows with targets for {kind} {target}")
            models[(kind, target)] = fit_parameter_model(kind, target, rows, cfg)
    save_models(models, _out(settings, "models.json"))
    write_training_report(models, _out(settings, "training_report.csv"))
    click.echo("trained 6 models")


@cli.command()
@click.argument("models", type=click.Path(exists=True, dir_okay=False))
@click.argument("centerline", type=click.Path(exists=True, dir_okay=False))
@click.argument("bcs", type=click.Path(exists=True, dir_okay=False))
@common_options
def predict(settings, models, centerline, bcs):
    """Predict element parameters and write params.json and network.json."""
    fluid = FluidProperties()
    geo = featurize_geometry(parse_centerline(centerline), load_bcs(bcs), fluid,
                             settings["entrance_length_factor"], Path(centerline).stem)
    params = predict_parameters(load_models(models), geo.disc, geo.features, settings["flavor"])
    _out(settings, "params.json").write_text(
        json.dumps({k: p.to_dict() for k, p in sorted(params.items())}, indent=1, sort_keys=True))
    save_network(assemble_network(geo.disc, params, geo.bcs, fluid), _out(settings, "network.json"))
    click.echo(f"predicted {len(params)} elements")


@cli.command()
@click.argument("solution", type=click.Path(exists=True, dir_okay=False))
@click.argument("reference", type=click.Path(exists=True, dir_okay=False))
@click.option("--node", default=None, help="Node id (default: first node of the reference).")
@click.option("--cycle-period", type=float, default=1.0, show_default=True)
@common_options
def evaluate(settings, solution, reference, node, cycle_period):
    """Maximum percent pressure error of a solution against a reference."""
    sol = read_solution_csv(solution, cycle_period)
    ref = load_reference(reference, cycle_period)
    node = node or ref.node_ids[0]
    mpe = compute_mpe(sol, ref, node, cycle_period)
    click.echo(f"MPE at node {node}: {mpe:.6g}%")


@cli.command("crossval")
@click.argument("cohort", type=click.Path(exists=True))
@click.option("--trials", type=int, default=5, show_default=True)
@click.option("--epochs", type=int, default=5000, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True, help="Steps per cycle.")
@common_options
def crossval_cmd(settings, cohort, trials, epochs, steps):
    """Repeated-holdout study over a cohort; writes mpe.csv, summary.json
    and mpe_bars.png."""
    cfg = StudyConfig(flavor=settings["flavor"], loss=settings["loss"],
                      entrance_length_factor=settings["entrance_length_factor"], seed=settings["seed"],
                      trials=trials, train=TrainConfig(epochs=epochs),
                      sim=SimulationConfig(steps_per_cycle=steps))
    report = crossval(CohortSpec.load(cohort), cfg, progress=lambda m: logging.getLogger(__name__).info(m))
    emit_report(report, settings["out"])
    for m, s in report.summary.items():
        if isinstance(s, dict) and s.get("mean") is not None:
            click.echo(f"{m:18s} mean MPE {s['mean']:.3f}% [{s['ci_low']:.3f}, {s['ci_high']:.3f}]")


@cli.command()
@click.option("--count", type=int, default=15, show_default=True)
@click.option("--identity", is_flag=True, help="Truth equals the Poiseuille values.")
@click.option("--quad-strength", type=float, default=1.0, show_default=True)
@common_options
def synth(settings, count, identity, quad_strength):
    """Generate a synthetic oracle cohort."""
    oracle = SyntheticOracle(seed=settings["seed"], identity=identity, quad_strength=quad_strength,
                             entrance_length_factor=settings["entrance_length_factor"])
    spec = generate_synthetic_cohort(oracle, count, settings["out"], settings["flavor"])
    click.echo(f"wrote {len(spec.geometries)} geometries to {settings['out']}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="hybrid0d", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    except click.exceptions.Abort:
        return 1
    except SolverDivergenceError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DIVERGENCE
    except (ValidationError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":
    sys.exit(main())
