import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybrid0d.calibration import ReferenceSeries
from hybrid0d.circuit import FlowBC, FluidProperties, ResistanceBC
from hybrid0d.errors import GridMismatchError, ValidationError
from hybrid0d.features import columns_for
from hybrid0d.geometry import discretize
from hybrid0d.mlp import WIDE_RANGE_FEATURES, Standardizer, TrainConfig
from hybrid0d.solver import SimulationConfig
from hybrid0d.study import (MODALITIES, EvaluationReport, StudyConfig, baseline_parameters, calibrate_geometry,
                            compute_mpe, crossval, emit_report, featurize_geometry, holdout_sets, load_geometry,
                            max_percent_error, modality_parameters, run_modality, summarize, train_models,
                            training_rows)
from hybrid0d.synth import junction_tree, straight_tree

from conftest import constant_models

FLUID = FluidProperties()


def test_mpe_identical_is_zero():
    p = np.sin(np.linspace(0, 6, 50)) + 2
    assert max_percent_error(p, p) == 0.0


def test_mpe_constant_offset():
    assert max_percent_error(np.full(10, 105.0), np.full(10, 100.0)) == pytest.approx(5.0, rel=1e-12)


def test_mpe_picks_largest_absolute_error():
    t = np.linspace(0, 1, 101)
    ref = np.sin(2 * np.pi * t) + 2
    sol = ref.copy()
    sol[50] += 0.3  # ref(0.5) = 2
    assert max_percent_error(sol, ref) == pytest.approx(15.0, rel=1e-9)


def test_mpe_length_mismatch():
    with pytest.raises(GridMismatchError):
        max_percent_error(np.ones(3), np.ones(4))


@settings(max_examples=50)
@given(arrays(float, 20, elements=st.floats(1.0, 1e3)), arrays(float, 20, elements=st.floats(-0.5, 0.5)),
       st.floats(1e-3, 1e3))
def test_mpe_is_scale_free(ref, noise, alpha):
    sol = ref * (1 + noise)
    assert max_percent_error(alpha * sol, alpha * ref) == pytest.approx(max_percent_error(sol, ref), rel=1e-9)


def _bcs(disc, q=2.0):
    bcs = {disc.root: FlowBC.constant(q)}
    bcs.update({leaf: ResistanceBC(100.0) for leaf in disc.leaf_nodes})
    return bcs


def _geometry(tree):
    return featurize_geometry(tree, _bcs(discretize(tree)), FLUID, 10.0, "g")


def _tree():
    return junction_tree(outlet_lengths=(1.0, 1.5, 2.0), outlet_vessel_lengths=[3.0, 20.0, 20.0])


def test_learned_junctions_keep_baseline_vessels():
    geo = _geometry(_tree())
    models = constant_models(7.0)
    base = baseline_parameters(geo.disc, FLUID)
    _, lj = modality_parameters(geo, "learned-junctions", models)
    _, lv = modality_parameters(geo, "learned-vessels", models)
    for spec in geo.disc.element_specs():
        if spec.kind == "vessel":
            assert lj[spec.id] == base[spec.id]
            assert lv[spec.id] != base[spec.id]
        elif spec.kind == "junction":
            assert lv[spec.id] == base[spec.id]
            assert lj[spec.id] != base[spec.id]


def test_learned_vessels_equals_learned_both_without_junctions():
    geo = _geometry(straight_tree())
    models = constant_models(7.0)
    assert modality_parameters(geo, "learned-vessels", models) == modality_parameters(geo, "learned-both", models)


def test_baseline_uses_unprocessed_discretization():
    geo = _geometry(_tree())
    disc, params = modality_parameters(geo, "baseline")
    assert disc is geo.raw_disc
    for spec in disc.element_specs():
        if spec.kind == "junction":
            assert params[spec.id].values() == (0.0, 0.0, 0.0)


def test_modality_argument_checks():
    geo = _geometry(_tree())
    with pytest.raises(ValidationError):
        modality_parameters(geo, "optimal")
    with pytest.raises(ValidationError):
        modality_parameters(geo, "learned-both")
    with pytest.raises(ValidationError):
        modality_parameters(geo, "best")


def test_ri_modalities_drop_quadratic_terms():
    geo = _geometry(junction_tree(outlet_radii=[0.5, 0.7]))
    for modality in ("baseline", "learned-both"):
        _, params = modality_parameters(geo, modality, constant_models(), flavor="ri")
        assert all(p.R_quad == 0.0 for p in params.values())


def test_compute_mpe_interpolates_periodic_grid():
    geo = _geometry(straight_tree())
    run = run_modality(geo, "baseline", _flat_reference(geo, 101), sim=SimulationConfig(steps_per_cycle=64))
    assert run.mpe == pytest.approx(0.0, abs=1e-9)


def _flat_reference(geo, samples):
    # constant inflow of 2 through R_lin then a 100 resistance outlet
    R = baseline_parameters(geo.disc, FLUID)[geo.disc.vessels[0].id].R_lin
    t = np.linspace(0.0, 1.0, samples)
    P = np.vstack([np.full(samples, 2.0 * (R + 100.0)), np.full(samples, 200.0)])
    ids = (geo.disc.root, geo.disc.vessels[0].outlet)
    return ReferenceSeries(t, ids, (), P, np.zeros_like(P), np.zeros((0, samples)), np.zeros((0, samples)), 1.0)


def test_compute_mpe_rejects_misaligned_grid():
    geo = _geometry(straight_tree())
    ref = _flat_reference(geo, 101)
    ref = ReferenceSeries(ref.time * 2.0, ref.node_ids, (), ref.pressure, ref.dpdt, ref.flow, ref.dqdt, 1.0)
    run = run_modality(geo, "baseline", _flat_reference(geo, 65), sim=SimulationConfig(steps_per_cycle=64))
    with pytest.raises(GridMismatchError):
        compute_mpe(run.solution, ref, geo.disc.root)


def test_holdout_ten_geometries():
    sets = holdout_sets(10, 5, 0.1, seed=0)
    assert all(len(s) == 1 for s in sets)
    assert len({s[0] for s in sets}) == 5


def test_holdout_fifteen_geometries():
    sets = holdout_sets(15, 5, 0.1, seed=4)
    flat = [i for s in sets for i in s]
    assert all(len(s) == 2 for s in sets) and len(set(flat)) == 10


def test_holdout_wraps_when_cohort_is_small():
    sets = holdout_sets(5, 7, 0.1, seed=1)
    assert len(sets) == 7 and {s[0] for s in sets} == set(range(5))


def test_holdout_needs_training_geometries():
    with pytest.raises(ValidationError):
        holdout_sets(1, 1, 0.1, 0)


def _records(trials, values):
    recs = []
    for t in range(trials):
        for m in MODALITIES:
            recs.append({"trial": t, "geometry": f"g{t}", "modality": m, "mpe": values[m][t], "status": "ok"})
    return recs


def test_summary_single_trial_degenerates():
    s = summarize(_records(1, {m: [2.0] for m in MODALITIES}), 1)
    for m in MODALITIES:
        assert s[m]["single_trial"] and s[m]["ci_low"] == s[m]["ci_high"] == s[m]["mean"] == 2.0


def test_summary_interval_and_exclusions():
    values = {m: [1.0, 2.0, 3.0] for m in MODALITIES}
    values["baseline"] = [4.0, 4.0, 4.0]
    recs = _records(3, values)
    recs.append({"trial": 0, "geometry": "x", "modality": "optimal", "mpe": None, "status": "diverged"})
    s = summarize(recs, 3)
    assert s["learned-both"]["mean"] == pytest.approx(2.0)
    assert s["learned-both"]["ci_high"] - 2.0 == pytest.approx(1.96 / np.sqrt(3))
    assert s["optimal"]["excluded"] == 1
    assert s["learned_both_beats_baseline"] == 3
    assert s["learned_both_reduction"] == pytest.approx(0.5)


def _report():
    recs = _records(2, {m: [1.0 + i, 0.5 + i] for i, m in enumerate(MODALITIES)})
    report = EvaluationReport("mini", {"seed": 0}, [{"trial": 0, "holdout": ["g0"], "training": ["g1"]}], recs)
    report.summary = summarize(recs, 2)
    return report


def test_emit_report_files(tmp_path):
    paths = emit_report(_report(), tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["mpe.csv", "mpe_bars.png", "summary.json"]
    assert set(paths) == {"csv", "json", "png"}
    lines = (tmp_path / "mpe.csv").read_text().splitlines()
    assert lines[0] == "trial,geometry,modality,mpe,status" and len(lines) == 1 + 2 * len(MODALITIES)
    data = json.loads((tmp_path / "summary.json").read_text())
    assert set(MODALITIES) <= set(data["summary"])


def test_emit_report_is_byte_identical(tmp_path):
    emit_report(_report(), tmp_path / "a")
    emit_report(_report(), tmp_path / "b")
    for name in ("mpe.csv", "summary.json", "mpe_bars.png"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.fixture(scope="module")
def calibrated(small_cohort):
    cfg = StudyConfig()
    geos, refs, cals = [], {}, {}
    for rec in small_cohort.geometries:
        geo, ref = load_geometry(rec, small_cohort, cfg, FLUID)
        geos.append(geo)
        refs[geo.id] = ref
        cals[geo.id] = calibrate_geometry(geo, ref)
    return geos, refs, cals


def test_training_split_audit(calibrated):
    geos, _, cals = calibrated
    held = geos[0].id
    train = geos[1:]
    models = train_models(train, cals, TrainConfig(epochs=5))
    for (kind, target), m in models.items():
        assert held not in {g for g, _ in m.training_rows}
        rows = training_rows(train, cals, kind, target)
        X = np.array([r[2] for r in rows])
        wide = [c in WIDE_RANGE_FEATURES for c in columns_for(kind)]
        again = Standardizer.fit(X, compress=wide)
        assert np.array_equal(again.mean, m.feature_scaler.mean)
        assert np.array_equal(again.std, m.feature_scaler.std)


def test_optimal_modality_reproduces_reference(calibrated):
    geos, refs, cals = calibrated
    for geo in geos:
        run = run_modality(geo, "optimal", refs[geo.id], calibrated=cals[geo.id].params)
        assert run.mpe < 1.0


def test_crossval_structure(small_cohort):
    cfg = StudyConfig(trials=2, train=TrainConfig(epochs=50))
    report = crossval(small_cohort, cfg)
    assert len(report.trials) == 2
    for info in report.trials:
        assert not set(info["holdout"]) & set(info["training"])
        assert len(info["holdout"]) + len(info["training"]) == 5
    assert len(report.records) == 2 * len(MODALITIES)
    assert all(r["status"] == "ok" for r in report.records)
    assert report.summary["baseline"]["trials"] == 2


def test_crossval_needs_five_geometries(small_cohort):
    from dataclasses import replace

    with pytest.raises(ValidationError):
        crossval(replace(small_cohort, geometries=small_cohort.geometries[:4]))
