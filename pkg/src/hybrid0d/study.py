"""Modalities, error metric and the cross-validation study.

Modalities differ only in where element parameters come from:

- baseline: unprocessed discretization, Poiseuille vessels, junctions with
  zero pressure drop;
- learned-vessels / learned-junctions / learned-both: preprocessed
  discretization, network predictions for the named element kinds and
  Poiseuille values elsewhere;
- optimal: preprocessed discretization with calibrated parameters.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calibration import CalibrationProblem, LMSettings, calibrate, reference_from_solution
from .circuit import (PARAM_NAMES, ElementParameters, FluidProperties, assemble_network, check_flavor, load_bcs,
                      poiseuille_parameters)
from .errors import GridMismatchError, SolverDivergenceError, ValidationError
from .features import extract_features, generation_numbers, mean_flows_from_leaves
from .geometry import discretize, hybrid_discretization, parse_centerline
from .mlp import TrainConfig, fit_parameter_model, predict_parameters
from .solver import SimulationConfig, read_solution_csv, simulate, steady_state

log = logging.getLogger(__name__)

MODALITIES = ("baseline", "learned-vessels", "learned-junctions", "learned-both", "optimal")


# Cohort files ------------------------------------------------------------------


@dataclass(frozen=True)
class GeometryRecord:
    id: str
    centerline: Path
    bcs: Path
    reference: Path
    truth: Path | None = None
    seed: int | None = None


@dataclass(frozen=True)
class CohortSpec:
    name: str
    geometries: tuple
    seed: int = 0
    cycle_period: float = 1.0

    def save(self, path, extra=None):
        base = Path(path).parent
        rel = lambda p: None if p is None else Path(p).relative_to(base).as_posix()  # noqa: E731
        data = {
            "name": self.name,
            "seed": self.seed,
            "cycle_period": self.cycle_period,
            "geometries": [{"id": g.id, "centerline": rel(g.centerline), "bcs": rel(g.bcs),
                            "reference": rel(g.reference), "truth": rel(g.truth), "seed": g.seed}
                           for g in self.geometries],
        }
        if extra:
            data.update(extra)
        Path(path).write_text(json.dumps(data, sort_keys=True, indent=1))

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "cohort.json"
        base = path.parent
        data = json.loads(path.read_text())
        geoms = tuple(
            GeometryRecord(g["id"], base / g["centerline"], base / g["bcs"], base / g["reference"],
                           base / g["truth"] if g.get("truth") else None, g.get("seed"))
            for g in data["geometries"])
        return cls(data["name"], geoms, data.get("seed", 0), data.get("cycle_period", 1.0))


# Parameters and features -------------------------------------------------------


def baseline_parameters(disc, fluid=None):
    """Poiseuille parameters over each vessel path and over the stretch each
    junction outlet absorbed (zero when nothing was absorbed).

    Junction outlets feeding a splitting connector get R_quad and L frozen
    at zero. Connectors are omitted; network assembly fixes them at zero.
    """
    fluid = fluid or FluidProperties()
    tree = disc.tree
    out = {}
    for spec in disc.element_specs():
        if spec.kind == "vessel":
            g = spec.geometry
            out[spec.id] = poiseuille_parameters(fluid, g.length, g.area, g.stenosis_area)
        elif spec.kind == "junction":
            _, outlet = disc.junction_outlet(spec.id)
            if len(outlet.absorbed) >= 2:
                g = tree.segment_geometry(outlet.absorbed)
                p = poiseuille_parameters(fluid, g.length, g.area, g.stenosis_area)
            else:
                p = ElementParameters()
            if outlet.to_connector:
                p = ElementParameters(p.R_lin, 0.0, 0.0, p.C, frozenset({"R_quad", "L"}))
            out[spec.id] = p
    return out


def drop_quadratic(params):
    return {k: p.with_values(R_quad=0.0) for k, p in params.items()}


@dataclass(frozen=True, eq=False)
class GeometryFeatures:
    id: str
    tree: object
    bcs: dict
    raw_disc: object
    disc: object
    features: dict  # element id -> FeatureVector
    gamma: dict
    mean_flows: dict


def featurize_geometry(tree, bcs, fluid=None, entrance_length_factor=10.0, geometry_id=""):
    """Preprocess one tree and extract the features of every element.

    Cycle-averaged flows come from a linear steady solve of the baseline
    network (for rigid linear elements this equals the periodic mean); they
    are mapped onto the preprocessed discretization through the outlets.
    """
    fluid = fluid or FluidProperties()
    raw = discretize(tree)
    raw_net = assemble_network(raw, baseline_parameters(raw, fluid), bcs, fluid)
    _, flows = steady_state(raw_net, flavor="ri")
    leaf_flow = {n: flows[raw_net.incoming[n][0]] for n in raw_net.outlet_nodes}
    disc = hybrid_discretization(tree, entrance_length_factor)
    mean = mean_flows_from_leaves(disc, leaf_flow)
    feats = {s.id: extract_features(disc, s.id, mean, fluid)
             for s in disc.element_specs() if s.kind != "connector"}
    return GeometryFeatures(geometry_id, tree, bcs, raw, disc, feats, generation_numbers(disc), mean)


# Metric --------------------------------------------------------------------------


def max_percent_error(p_model, p_ref):
    """Percent error at the sample of largest absolute pressure error."""
    p_model = np.asarray(p_model, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if p_model.shape != p_ref.shape or p_ref.size == 0:
        raise GridMismatchError("pressure series differ in length")
    diff = p_model - p_ref
    k = int(np.argmax(np.abs(diff)))
    if diff[k] == 0.0:
        return 0.0
    return float(100.0 * abs(diff[k]) / abs(p_ref[k]))


def compute_mpe(sol, ref, node, period=None, tol=1e-6):
    """MPE at ``node`` between the final cycle of ``sol`` and ``ref``.

    Grids are compared by phase within the cycle. When the sample phases
    differ the model series is interpolated periodically onto the reference
    phases, provided both span one cycle.
    """
    period = period or ref.cycle_period or sol.cycle_period
    cyc = sol.last_cycle() if getattr(sol, "steps_per_cycle", None) else sol
    ts = cyc.time - cyc.time[0]
    tr = ref.time - ref.time[0]
    p_sol = cyc.P(node)
    p_ref = ref.P(node)
    if len(ts) == len(tr) and np.allclose(ts, tr, rtol=0.0, atol=tol * max(tr[-1], 1e-300)):
        return max_percent_error(p_sol, p_ref)
    if period is None or abs(ts[-1] - period) > tol * period or tr[-1] > period * (1 + tol):
        raise GridMismatchError("model and reference grids are not aligned within one cycle")
    p_interp = np.interp(tr, ts, p_sol, period=period)
    return max_percent_error(p_interp, p_ref)


# Modalities ----------------------------------------------------------------------


def modality_parameters(geo, modality, models=None, calibrated=None, flavor="rri", fluid=None):
    """Discretization and element parameters for one modality."""
    check_flavor(flavor)
    if modality not in MODALITIES:
        raise ValidationError(f"unknown modality {modality!r}")
    if modality == "baseline":
        disc, params = geo.raw_disc, baseline_parameters(geo.raw_disc, fluid)
    elif modality == "optimal":
        if calibrated is None:
            raise ValidationError("optimal modality needs calibrated parameters")
        disc, params = geo.disc, dict(calibrated)
    else:
        if models is None:
            raise ValidationError(f"{modality} needs trained models")
        disc = geo.disc
        params = baseline_parameters(disc, fluid)
        learned = predict_parameters(models, disc, geo.features, flavor)
        kinds = {"learned-vessels": ("vessel",), "learned-junctions": ("junction",),
                 "learned-both": ("vessel", "junction")}[modality]
        for spec in disc.element_specs():
            if spec.kind in kinds:
                params[spec.id] = learned[spec.id]
    if flavor == "ri":
        params = drop_quadratic(params)
    return disc, params


@dataclass(frozen=True, eq=False)
class ModalityRun:
    modality: str
    params: dict
    solution: object
    mpe: float


def run_modality(geo, modality, reference, models=None, calibrated=None, flavor="rri", sim=None,
                 fluid=None):
    """Simulate one modality on one geometry and score it at the inlet.

    Raises SolverDivergenceError when the forward simulation fails.
    """
    fluid = fluid or FluidProperties()
    disc, params = modality_parameters(geo, modality, models, calibrated, flavor, fluid)
    net = assemble_network(disc, params, geo.bcs, fluid, reference.cycle_period)
    cfg = replace(sim or SimulationConfig(), flavor=flavor)
    sol = simulate(net, cfg)
    return ModalityRun(modality, params, sol, compute_mpe(sol, reference, disc.root))


# Calibration of one geometry ------------------------------------------------------


def load_reference(path, cycle_period):
    return reference_from_solution(read_solution_csv(path, cycle_period), cycle_period)


def calibrate_geometry(geo, reference, flavor="rri", fluid=None, settings=None):
    """Calibrate every free parameter of the preprocessed discretization,
    starting from the baseline values."""
    fluid = fluid or FluidProperties()
    init = baseline_parameters(geo.disc, fluid)
    if flavor == "ri":
        init = drop_quadratic(init)
    net = assemble_network(geo.disc, init, geo.bcs, fluid, reference.cycle_period)
    expected = {e.id for e in net.elements}
    have = set(reference.element_ids)
    if expected - have or set(net.nodes) - set(reference.node_ids):
        raise GridMismatchError(
            f"reference of {geo.id or 'geometry'} does not match its discretization "
            f"(missing elements {sorted(expected - have)[:5]})")
    problem = CalibrationProblem.from_network(net, flavor, settings)
    return calibrate(problem, reference)


# Cross-validation ---------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    flavor: str = "rri"
    loss: str = "mse"
    entrance_length_factor: float = 10.0
    seed: int = 0
    trials: int = 5
    holdout_fraction: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    lm: LMSettings = field(default_factory=LMSettings)

    def __post_init__(self):
        check_flavor(self.flavor)
        if self.trials < 1:
            raise ValueError("need at least one trial")


def holdout_sets(n, trials, fraction, seed):
    """Held-out index sets per trial: disjoint slices of one seeded
    permutation, wrapping around when the cohort is too small."""
    size = max(1, int(fraction * n + 0.5))
    if size >= n:
        raise ValidationError("holdout would leave no training geometries")
    perm = np.random.default_rng(seed).permutation(n)
    return [tuple(sorted(int(perm[(k * size + i) % n]) for i in range(size))) for k in range(trials)]


def training_rows(geos, calibrations, kind, target):
    """(geometry id, element id, features, calibrated value, gamma) rows.

    Junction outlets feeding a splitting connector only provide R_lin rows.
    """
    rows = []
    for geo in geos:
        params = calibrations[geo.id].params
        for spec in geo.disc.element_specs():
            if spec.kind != kind:
                continue
            if kind == "junction" and target != "R_lin" and geo.disc.junction_outlet(spec.id)[1].to_connector:
                continue
            rows.append((geo.id, spec.id, geo.features[spec.id].as_array(kind),
                         getattr(params[spec.id], target), geo.gamma[spec.id]))
    return rows


def train_models(geos, calibrations, cfg):
    models = {}
    for kind in ("vessel", "junction"):
        for target in PARAM_NAMES:
            rows = training_rows(geos, calibrations, kind, target)
            models[(kind, target)] = fit_parameter_model(kind, target, rows, cfg)
    return models


@dataclass
class EvaluationReport:
    cohort: str
    config: dict
    trials: list  # dicts: trial, holdout, training
    records: list  # dicts: trial, geometry, modality, mpe, status
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {"cohort": self.cohort, "config": self.config, "trials": self.trials,
                "summary": self.summary}


def summarize(records, trials):
    """Per-modality mean of per-trial means with a normal 95% interval."""
    out = {}
    for modality in MODALITIES:
        per_trial, excluded = [], 0
        for t in range(trials):
            vals = [r["mpe"] for r in records if r["trial"] == t and r["modality"] == modality
                    and r["status"] == "ok"]
            excluded += sum(1 for r in records if r["trial"] == t and r["modality"] == modality
                            and r["status"] != "ok")
            if vals:
                per_trial.append(float(np.mean(vals)))
        if not per_trial:
            out[modality] = {"mean": None, "ci_low": None, "ci_high": None, "trials": 0,
                             "excluded": excluded, "single_trial": False, "trial_means": []}
            continue
        mean = float(np.mean(per_trial))
        if len(per_trial) > 1:
            half = 1.96 * float(np.std(per_trial, ddof=1)) / math.sqrt(len(per_trial))
        else:
            half = 0.0
        out[modality] = {"mean": mean, "ci_low": mean - half, "ci_high": mean + half,
                         "trials": len(per_trial), "excluded": excluded,
                         "single_trial": len(per_trial) == 1, "trial_means": per_trial}
    base = out["baseline"]["trial_means"]
    both = out["learned-both"]["trial_means"]
    if len(base) == len(both) and base:
        out["learned_both_beats_baseline"] = int(sum(b < a for a, b in zip(base, both)))
        if out["baseline"]["mean"]:
            out["learned_both_reduction"] = 1.0 - out["learned-both"]["mean"] / out["baseline"]["mean"]
    return out


def load_geometry(record, cohort, config, fluid):
    tree = parse_centerline(record.centerline)
    bcs = load_bcs(record.bcs)
    geo = featurize_geometry(tree, bcs, fluid, config.entrance_length_factor, record.id)
    ref = load_reference(record.reference, cohort.cycle_period)
    return geo, ref


def crossval(cohort, config=StudyConfig(), fluid=None, progress=None):
    """Repeated holdout study over a cohort; see ``holdout_sets``.

    Per trial the held-out geometries are excluded from standardization and
    training; calibration of a geometry does not depend on the split and is
    computed once.
    """
    fluid = fluid or FluidProperties()
    n = len(cohort.geometries)
    if n < 5:
        raise ValidationError("cross-validation needs at least 5 geometries")
    geos, refs, cals = [], {}, {}
    for rec in cohort.geometries:
        geo, ref = load_geometry(rec, cohort, config, fluid)
        geos.append(geo)
        refs[geo.id] = ref
        cals[geo.id] = calibrate_geometry(geo, ref, config.flavor, fluid, config.lm)
        if progress:
            progress(f"calibrated {geo.id}: {cals[geo.id].status}")
    fixed_runs = {}
    trials_info, records = [], []
    for t, held in enumerate(holdout_sets(n, config.trials, config.holdout_fraction, config.seed)):
        held_ids = [geos[i].id for i in held]
        train_geos = [g for i, g in enumerate(geos) if i not in held]
        if not held_ids:
            raise ValidationError(f"trial {t} has no held-out geometries")
        tcfg = replace(config.train, seed=config.seed * 1000 + t, loss=config.loss)
        models = train_models(train_geos, cals, tcfg)
        seen = {r[0] for m in models.values() for r in m.training_rows}
        if seen & set(held_ids):
            raise RuntimeError(f"held-out geometry leaked into training in trial {t}")
        trials_info.append({"trial": t, "holdout": held_ids, "training": sorted(g.id for g in train_geos)})
        for i in held:
            geo = geos[i]
            for modality in MODALITIES:
                key = (geo.id, modality)
                if modality in ("baseline", "optimal") and key in fixed_runs:
                    mpe, status = fixed_runs[key]
                else:
                    try:
                        run = run_modality(geo, modality, refs[geo.id], models, cals[geo.id].params,
                                           config.flavor, config.sim, fluid)
                        mpe, status = run.mpe, "ok"
                    except SolverDivergenceError as exc:
                        log.warning("%s %s diverged: %s", geo.id, modality, exc)
                        mpe, status = None, "diverged"
                    if modality in ("baseline", "optimal"):
                        fixed_runs[key] = (mpe, status)
                records.append({"trial": t, "geometry": geo.id, "modality": modality,
                                "mpe": mpe, "status": status})
        if progress:
            progress(f"trial {t} done: holdout {held_ids}")
    cfg = {"flavor": config.flavor, "loss": config.loss, "seed": config.seed,
           "entrance_length_factor": config.entrance_length_factor, "trials": config.trials,
           "holdout_fraction": config.holdout_fraction, "epochs": config.train.epochs,
           "steps_per_cycle": config.sim.steps_per_cycle}
    report = EvaluationReport(cohort.name, cfg, trials_info, records)
    report.summary = summarize(records, config.trials)
    return report


def emit_report(report, out_dir):
    """Write mpe.csv, summary.json and mpe_bars.png into ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "geometry", "modality", "mpe", "status"])
    for r in report.records:
        w.writerow([r["trial"], r["geometry"], r["modality"], "" if r["mpe"] is None else repr(float(r["mpe"])),
                    r["status"]])
    paths = {"csv": out / "mpe.csv", "json": out / "summary.json", "png": out / "mpe_bars.png"}
    paths["csv"].write_text(buf.getvalue())
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1))

    fig, ax = plt.subplots(figsize=(6, 4))
    means, errs, labels = [], [], []
    for m in MODALITIES:
        s = report.summary.get(m, {})
        if s.get("mean") is None:
            continue
        labels.append(m)
        means.append(s["mean"])
        errs.append(s["ci_high"] - s["mean"])
    ax.bar(range(len(means)), means, yerr=errs, capsize=4, color="0.6", edgecolor="k")
    ax.set_xticks(range(len(means)))
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel("max percent error (%)")
    ax.set_title(report.cohort)
    fig.tight_layout()
    fig.savefig(paths["png"], metadata={"Software": None})
    plt.close(fig)
    return paths
