import math

import numpy as np
import pytest

from hybrid0d.circuit import RCRBC, CircuitNetwork, Element, ElementParameters, FlowBC, ResistanceBC


def vessel(eid, inlet, outlet, R_lin=0.0, R_quad=0.0, L=0.0, kind="vessel"):
    if kind == "connector":
        return Element(eid, kind, inlet, outlet, ElementParameters.zero_frozen())
    return Element(eid, kind, inlet, outlet, ElementParameters(R_lin, R_quad, L))


def chain_network(resistances, inflow=1.0, outlet=None, period=1.0):
    """Series chain n0 -> n1 -> ... with a constant inflow."""
    elems = [vessel(f"e{i}", f"n{i}", f"n{i + 1}", R_lin=r) for i, r in enumerate(resistances)]
    bcs = {"n0": FlowBC.constant(inflow, period),
           f"n{len(resistances)}": outlet or ResistanceBC(1000.0, 0.0)}
    return CircuitNetwork.from_elements(elems, bcs, cycle_period=period)


def random_network(rng, n_elements=20, quad=True, rcr=True):
    """Random tree network rooted at a prescribed inflow."""
    elems = [vessel("e0", "n0", "n1", *_random_params(rng, quad))]
    nodes = ["n1"]
    for k in range(1, n_elements):
        parent = nodes[int(rng.integers(len(nodes)))]
        child = f"n{k + 1}"
        elems.append(vessel(f"e{k}", parent, child, *_random_params(rng, quad)))
        nodes.append(child)
    inlets = {e.inlet for e in elems}
    leaves = [n for n in nodes if n not in inlets]
    bcs = {"n0": FlowBC.from_function(lambda t: 5.0 + 3.0 * math.sin(2 * math.pi * t), 1.0, 101)}
    for i, leaf in enumerate(leaves):
        if rcr and i % 2:
            bcs[leaf] = RCRBC(Rp=float(rng.uniform(50, 150)), C=float(rng.uniform(1e-4, 1e-3)),
                              Rd=float(rng.uniform(500, 1500)), Pd=float(rng.uniform(0, 10)))
        else:
            bcs[leaf] = ResistanceBC(float(rng.uniform(500, 1500)), float(rng.uniform(0, 10)))
    return CircuitNetwork.from_elements(elems, bcs)


def _random_params(rng, quad):
    return (float(rng.uniform(1, 100)), float(rng.uniform(0.1, 5)) if quad else 0.0,
            float(rng.uniform(0.1, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def constant_models(value=3.0, epochs=2):
    """Six parameter models whose training targets are all ``value``."""
    from hybrid0d.features import columns_for
    from hybrid0d.mlp import ARCHITECTURES, TrainConfig, fit_parameter_model

    models = {}
    for (kind, target), hidden in ARCHITECTURES.items():
        dim = len(columns_for(kind))
        rows = [("g", f"e{i}", np.arange(dim) + i, value, 0) for i in range(3)]
        models[(kind, target)] = fit_parameter_model(kind, target, rows, TrainConfig(epochs=epochs), hidden)
    return models


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """Five synthetic geometries with a non-trivial truth map."""
    from hybrid0d.study import CohortSpec
    from hybrid0d.synth import SyntheticOracle, generate_synthetic_cohort

    out = tmp_path_factory.mktemp("cohort")
    generate_synthetic_cohort(SyntheticOracle(seed=3), 5, out)
    return CohortSpec.load(out)
