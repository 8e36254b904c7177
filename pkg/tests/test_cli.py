import json

import pytest

from hybrid0d.circuit import CircuitNetwork, FlowBC, ResistanceBC, load_network, save_network
from hybrid0d.cli import EXIT_DIVERGENCE, EXIT_VALIDATION, main
from hybrid0d.mlp import load_models
from hybrid0d.study import CohortSpec

from conftest import vessel


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["--seed", "5", "--out", str(out), "synth", "--count", "5"]) == 0
    return out


def _geometry_files(cohort_dir):
    rec = CohortSpec.load(cohort_dir).geometries[0]
    return str(rec.centerline), str(rec.bcs), str(rec.reference)


def test_prep_simulate_evaluate(cohort_dir, tmp_path, capsys):
    centerline, bcs, reference = _geometry_files(cohort_dir)
    assert main(["prep", centerline, "--bcs", bcs, "--out", str(tmp_path)]) == 0
    for name in ("discretization.json", "features.csv", "network.json"):
        assert (tmp_path / name).exists()
    assert main(["simulate", str(tmp_path / "network.json"), "--steps", "1000", "--last-cycle-only",
                 "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["evaluate", str(tmp_path / "solution.csv"), reference]) == 0
    line = capsys.readouterr().out.strip()
    # baseline parameters on a perturbed truth leave a visible but bounded error
    mpe = float(line.split(":")[1].strip().rstrip("%"))
    assert 0.0 < mpe < 100.0


def test_ri_prep_network_has_no_quadratic_terms(cohort_dir, tmp_path):
    centerline, bcs, _ = _geometry_files(cohort_dir)
    assert main(["--flavor", "ri", "prep", centerline, "--bcs", bcs, "--out", str(tmp_path)]) == 0
    net = load_network(tmp_path / "network.json")
    assert all(e.params.R_quad == 0.0 for e in net.elements)


def test_calibrate_writes_report(cohort_dir, tmp_path):
    centerline, bcs, reference = _geometry_files(cohort_dir)
    assert main(["calibrate", centerline, bcs, reference, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "calibration.json").read_text())
    assert report["residual_norm"] <= report["initial_residual_norm"]


def test_featurize_train_predict(cohort_dir, tmp_path):
    out = str(tmp_path)
    assert main(["featurize", str(cohort_dir), "--out", out]) == 0
    assert main(["train", str(tmp_path / "features.csv"), "--epochs", "20", "--out", out]) == 0
    assert len(load_models(tmp_path / "models.json")) == 6
    lines = (tmp_path / "training_report.csv").read_text().splitlines()
    assert len(lines) == 1 + 6 * 20
    centerline, bcs, _ = _geometry_files(cohort_dir)
    assert main(["predict", str(tmp_path / "models.json"), centerline, bcs, "--out", out]) == 0
    assert (tmp_path / "params.json").exists() and (tmp_path / "network.json").exists()
    assert main(["--flavor", "ri", "predict", str(tmp_path / "models.json"), centerline, bcs, "--out", out]) == 0
    params = json.loads((tmp_path / "params.json").read_text())
    assert all(p["R_quad"] == 0.0 for p in params.values())


def test_crossval_small(cohort_dir, tmp_path):
    assert main(["crossval", str(cohort_dir), "--trials", "1", "--epochs", "20", "--steps", "250",
                 "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["mpe.csv", "mpe_bars.png", "summary.json"]
    assert json.loads((tmp_path / "summary.json").read_text())["summary"]["baseline"]["single_trial"]


def test_invalid_centerline_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"points": [], "edges": [], "root": 0}))
    assert main(["prep", str(bad), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_missing_file_exit_code(tmp_path):
    assert main(["prep", str(tmp_path / "nope.json")]) == EXIT_VALIDATION


def test_divergence_exit_code(tmp_path):
    # the negative branch cancels the parallel conductance
    els = (vessel("e0", "n0", "n1", 1.0), vessel("e1", "n1", "n2", 1.0), vessel("e2", "n1", "n3", -3.0))
    bcs = {"n0": FlowBC.constant(1.0), "n2": ResistanceBC(1.0), "n3": ResistanceBC(1.0)}
    save_network(CircuitNetwork.from_elements(els, bcs), tmp_path / "net.json")
    assert main(["simulate", str(tmp_path / "net.json"), "--out", str(tmp_path)]) == EXIT_DIVERGENCE


def test_help_exits_cleanly(capsys):
    assert main(["--help"]) == 0
    assert "crossval" in capsys.readouterr().out


def test_console_script_entry_point():
    from importlib.metadata import entry_points

    eps = [e for e in entry_points(group="console_scripts") if e.name == "hybrid0d"]
    assert eps and eps[0].value == "hybrid0d.cli:main"
