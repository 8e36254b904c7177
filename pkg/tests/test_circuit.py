import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid0d.circuit import (RCRBC, CircuitNetwork, ElementParameters, FlowBC, FluidProperties, ResistanceBC,
                              assemble_network, element_pressure_drop, load_network, poiseuille_parameters,
                              save_network, validate_network)
from hybrid0d.errors import InvalidGeometryError, NetworkValidationError
from hybrid0d.geometry import discretize, hybrid_discretization
from hybrid0d.study import baseline_parameters
from hybrid0d.synth import junction_tree, straight_tree

from conftest import chain_network, random_network, vessel

FLUID = FluidProperties(density=1.06, viscosity=0.04, stenosis_coefficient=1.52)
finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_poiseuille_unit_cylinder():
    p = poiseuille_parameters(FLUID, 10.0, math.pi, math.pi)
    # 8*pi*0.04*10/pi^2 and 1.06*10/pi
    assert p.R_lin == pytest.approx(8 * math.pi * 0.04 * 10 / math.pi**2, rel=1e-14)
    assert p.R_lin == pytest.approx(1.01859, abs=1e-5)
    assert p.L == pytest.approx(1.06 * 10 / math.pi, rel=1e-14)
    assert p.L == pytest.approx(3.374085, abs=1e-6)
    assert p.R_quad == 0.0


def test_poiseuille_zero_length():
    p = poiseuille_parameters(FLUID, 0.0, 2.5, 2.5)
    assert p.R_lin == 0.0 and p.L == 0.0


def test_poiseuille_stenosis_term():
    p = poiseuille_parameters(FLUID, 3.0, math.pi, math.pi / 2)
    assert p.R_quad == pytest.approx(1.52 * 1.06 / (2 * math.pi**2), rel=1e-14)
    assert p.R_quad == pytest.approx(0.08163, abs=1e-5)


@pytest.mark.parametrize("area,sten", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0)])
def test_poiseuille_rejects_nonpositive_area(area, sten):
    with pytest.raises(InvalidGeometryError):
        poiseuille_parameters(FLUID, 1.0, area, sten)


@given(st.floats(0.01, 100), st.floats(0.01, 10), st.floats(0.1, 1.0))
def test_poiseuille_homogeneity(length, area, frac):
    p = poiseuille_parameters(FLUID, length, area, frac * area)
    p2 = poiseuille_parameters(FLUID, 2 * length, area, frac * area)
    assert p2.R_lin == pytest.approx(2 * p.R_lin, rel=1e-15)
    assert p2.L == pytest.approx(2 * p.L, rel=1e-15)
    pa = poiseuille_parameters(FLUID, length, 2 * area, 2 * frac * area)
    assert pa.R_lin == pytest.approx(p.R_lin / 4, rel=1e-15)
    assert pa.L == pytest.approx(p.L / 2, rel=1e-15)


def test_pressure_drop_examples():
    p = ElementParameters(2.0, 3.0, 4.0)
    assert element_pressure_drop(p, 5.0, 1.0) == 89.0
    assert element_pressure_drop(p, 0.0, 0.0) == 0.0
    assert element_pressure_drop(p, 5.0, 1.0, flavor="ri") == 14.0


@given(finite, finite, finite, finite)
def test_pressure_drop_odd_in_flow(r_lin, r_quad, ind, q):
    p = ElementParameters(r_lin, r_quad, ind)
    assert element_pressure_drop(p, -q, 0.0) == -element_pressure_drop(p, q, 0.0)


@given(finite, finite, finite, finite, finite)
def test_ri_equals_rri_without_quadratic(r_lin, r_quad, ind, q, dq):
    p = ElementParameters(r_lin, r_quad, ind)
    assert element_pressure_drop(p, q, dq, "ri") == element_pressure_drop(p.with_values(R_quad=0.0), q, dq, "rri")


def test_parameters_validate_capacitance_and_frozen_names():
    with pytest.raises(ValueError):
        ElementParameters(C=0.0)
    with pytest.raises(ValueError):
        ElementParameters(frozen={"C"})
    assert ElementParameters(R_lin=-3.0).R_lin == -3.0


def test_fluid_validation():
    with pytest.raises(ValueError):
        FluidProperties(density=0.0)
    with pytest.raises(ValueError):
        FluidProperties(stenosis_coefficient=-1.0)


def test_flow_bc_periodic_interpolation():
    bc = FlowBC((0.0, 0.5, 1.0), (0.0, 2.0, 0.0))
    assert bc(0.25) == pytest.approx(1.0)
    assert bc(1.25) == pytest.approx(1.0)
    assert bc.period == 1.0
    with pytest.raises(ValueError):
        FlowBC((0.0, 0.0), (1.0, 1.0))


def test_bc_validation():
    with pytest.raises(ValueError):
        RCRBC(1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        ResistanceBC(-1.0)


def _single_vessel_parts():
    tree = straight_tree()
    disc = discretize(tree)
    params = baseline_parameters(disc, FLUID)
    bcs = {disc.root: FlowBC.constant(1.0), disc.leaf_nodes[0]: ResistanceBC(100.0)}
    return disc, params, bcs


def test_assemble_minimal_network():
    disc, params, bcs = _single_vessel_parts()
    net = assemble_network(disc, params, bcs, FLUID)
    assert len(net.nodes) == 2 and len(net.elements) == 1
    assert validate_network(net) == []


def test_assemble_missing_parameters():
    disc, _, bcs = _single_vessel_parts()
    with pytest.raises(NetworkValidationError):
        assemble_network(disc, {}, bcs, FLUID)


def test_assemble_missing_bc():
    disc, params, bcs = _single_vessel_parts()
    del bcs[disc.leaf_nodes[0]]
    with pytest.raises(NetworkValidationError, match="no outlet boundary condition"):
        assemble_network(disc, params, bcs, FLUID)


def test_assemble_split_junction_has_frozen_connectors():
    tree = junction_tree(outlet_lengths=(1.0, 1.5, 2.0, 2.5), stem=0.5, outlet_vessel_lengths=[20.0] * 4)
    disc = hybrid_discretization(tree, 0.0)
    bcs = {disc.root: FlowBC.constant(1.0)}
    bcs.update({leaf: ResistanceBC(100.0) for leaf in disc.leaf_nodes})
    net = assemble_network(disc, baseline_parameters(disc, FLUID), bcs, FLUID)
    conns = [e for e in net.elements if e.kind == "connector"]
    assert len(conns) == 2
    for e in conns:
        assert e.params.values() == (0.0, 0.0, 0.0)
        assert e.params.frozen == {"R_lin", "R_quad", "L"}


def test_validate_reports_leaf_without_bc():
    net = chain_network([10.0])
    bad = CircuitNetwork(net.nodes, net.elements, {"n0": net.boundary_conditions["n0"]})
    diags = validate_network(bad)
    assert len(diags) == 1 and "'n1'" in diags[0]


def test_validate_reports_two_inflows():
    elems = [vessel("a", "n0", "n1", 1.0), vessel("b", "n1", "n2", 1.0)]
    net = CircuitNetwork.from_elements(elems, {"n0": FlowBC.constant(1.0), "n2": FlowBC.constant(1.0)})
    diags = validate_network(net)
    assert any("prescribed-inflow" in d for d in diags)


def test_validate_detects_cycle_and_disconnection():
    elems = [vessel("a", "n0", "n1", 1.0), vessel("b", "n2", "n3", 1.0)]
    net = CircuitNetwork.from_elements(elems, {"n0": FlowBC.constant(1.0), "n1": ResistanceBC(1.0),
                                               "n3": ResistanceBC(1.0)})
    assert any("disconnected" in d for d in validate_network(net))


def test_network_json_round_trip(tmp_path, rng):
    net = random_network(rng, 8)
    path = tmp_path / "net.json"
    save_network(net, path)
    again = load_network(path)
    assert again.to_dict() == net.to_dict()
    assert set(json.loads(path.read_text())) >= {"fluid", "cycle_period", "elements", "boundary_conditions"}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_assembled_networks_validate(seed):
    from hybrid0d.synth import TreeParams, random_tree
    from hybrid0d.errors import InvalidGeometryError as Degenerate

    try:
        tree = random_tree(np.random.default_rng(seed), TreeParams(depth=(1, 2)))
    except Degenerate:
        return
    disc = hybrid_discretization(tree)
    bcs = {disc.root: FlowBC.constant(1.0)}
    bcs.update({leaf: RCRBC(10.0, 1e-4, 100.0) for leaf in disc.leaf_nodes})
    net = assemble_network(disc, baseline_parameters(disc, FLUID), bcs, FLUID)
    assert validate_network(net) == []
