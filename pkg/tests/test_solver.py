import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid0d.circuit import CircuitNetwork, FlowBC, ResistanceBC
from hybrid0d.errors import InsufficientDataError, NetworkValidationError, SolverDivergenceError
from hybrid0d.solver import (SimulationConfig, TimeSeriesSolution, cycle_convergence, read_solution_csv,
                             residual_and_jacobian, simulate, state_size, steady_state, write_solution_csv)

import oracles
from conftest import chain_network, random_network, vessel


def test_single_vessel_steady_pressures():
    net = chain_network([100.0], inflow=1.0, outlet=ResistanceBC(1000.0, 0.0))
    sol = simulate(net, SimulationConfig(steps_per_cycle=32, cycles=3)).last_cycle()
    assert np.allclose(sol.P("n0"), 1100.0, rtol=1e-12)
    assert np.allclose(sol.P("n1"), 1000.0, rtol=1e-12)


def test_resistor_chain_exact():
    assert oracles.resistor_chain_error() < 1e-9


def test_residual_vanishes_at_exact_steady_state():
    net = chain_network([100.0, 50.0], inflow=2.0, outlet=ResistanceBC(1000.0, 10.0))
    # P = [2310, 2110, 2010], Q = [2, 2]
    x = np.array([2310.0, 2110.0, 2010.0, 2.0, 2.0])
    r, _ = residual_and_jacobian(net, x, x, 1e-3, 0.0)
    assert np.linalg.norm(r) < 1e-12


def test_connector_rows_equate_pressures():
    elems = [vessel("a", "n0", "n1", 10.0), vessel("c", "n1", "n2", kind="connector"),
             vessel("b", "n2", "n3", 5.0)]
    net = CircuitNetwork.from_elements(elems, {"n0": FlowBC.constant(1.0), "n3": ResistanceBC(10.0)})
    rng = np.random.default_rng(0)
    x, xp = rng.normal(size=state_size(net)), rng.normal(size=state_size(net))
    r, J = residual_and_jacobian(net, x, xp, 1e-3, 0.0)
    k = 1  # element row of the connector
    assert r[k] == pytest.approx(x[1] - x[2], abs=1e-15)
    expected = np.zeros(state_size(net))
    expected[1], expected[2] = 1.0, -1.0
    assert np.array_equal(J[k], expected)


def test_rl_sinusoid_first_order():
    assert oracles.rl_sinusoid(1000) < 0.01


def test_time_step_convergence_first_order():
    coarse, fine = oracles.rl_sinusoid(500), oracles.rl_sinusoid(1000)
    assert coarse / fine >= 1.8


def test_second_order_option_converges_faster():
    coarse, fine = oracles.rl_sinusoid(250, order=2), oracles.rl_sinusoid(500, order=2)
    assert coarse / fine >= 3.5


def test_rcr_steady_state_and_time_constant():
    steady, tau = oracles.rcr_step()
    assert steady < 0.005
    assert tau < 0.05


@pytest.mark.parametrize("seed", range(3))
def test_jacobian_matches_finite_differences(seed):
    assert oracles.solver_jacobian_error(seed, states=2) < 1e-5


def test_mass_conservation_every_step():
    net = random_network(np.random.default_rng(7), 20)
    sol = simulate(net, SimulationConfig(steps_per_cycle=200, cycles=2, fixed_cycles=True))
    qmax = np.max(np.abs(sol.flow), axis=0)
    for n in net.nodes:
        if n in net.boundary_conditions:
            continue
        inflow = sum(sol.Q(e) for e in net.incoming.get(n, ()))
        outflow = sum(sol.Q(e) for e in net.outgoing.get(n, ()))
        assert np.all(np.abs(inflow - outflow)[1:] < 1e-9 * qmax[1:])


@settings(max_examples=10, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_linear_network_scales_with_inflow(alpha, seed):
    rng = np.random.default_rng(seed)
    net = random_network(rng, 6, quad=False, rcr=False)
    net = CircuitNetwork(net.nodes, net.elements,
                         {n: (bc if isinstance(bc, FlowBC) else ResistanceBC(bc.R, 0.0))
                          for n, bc in net.boundary_conditions.items()})
    bc = net.boundary_conditions["n0"]
    scaled = CircuitNetwork(net.nodes, net.elements,
                            {**net.boundary_conditions, "n0": FlowBC(bc.times, tuple(alpha * q for q in bc.flows))})
    cfg = SimulationConfig(steps_per_cycle=64, cycles=2, fixed_cycles=True, flavor="ri")
    # zero initial pressures make the response exactly linear in the inflow
    a = simulate(net, cfg)
    b = simulate(scaled, cfg)
    assert np.max(np.abs(b.pressure - alpha * a.pressure)) <= 1e-8 * np.max(np.abs(alpha * a.pressure))


def test_invalid_network_is_rejected():
    net = chain_network([1.0])
    bad = CircuitNetwork(net.nodes, net.elements, {"n0": net.boundary_conditions["n0"]})
    with pytest.raises(NetworkValidationError):
        simulate(bad)


def test_divergence_raises_with_step():
    net = chain_network([1.0])
    bcs = {"n0": FlowBC.from_function(lambda t: 1e3 * math.sin(2 * math.pi * t)), "n1": ResistanceBC(1.0)}
    net = CircuitNetwork(net.nodes, (vessel("e0", "n0", "n1", 1.0, 1e12),), bcs)
    with pytest.raises(SolverDivergenceError) as info:
        simulate(net, SimulationConfig(steps_per_cycle=16, cycles=1, max_newton=1))
    assert info.value.step >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        SimulationConfig(steps_per_cycle=8)
    with pytest.raises(ValueError):
        SimulationConfig(newton_tol=0.0)
    with pytest.raises(ValueError):
        SimulationConfig(flavor="xyz")


def test_early_stop_on_cycle_convergence():
    net = chain_network([100.0])
    sol = simulate(net, SimulationConfig(steps_per_cycle=32, cycles=10))
    # the first cycle carries the start-up transient, the next two agree
    assert sol.converged and sol.cycles_run == 3
    assert len(sol.last_cycle().time) == 33


def _series(values, dt):
    t = np.arange(len(values)) * dt
    return TimeSeriesSolution(t, ("a",), (), np.asarray(values, dtype=float)[None, :], np.zeros((0, len(values))),
                              cycle_period=1.0)


def test_cycle_convergence_periodic_is_zero():
    t = np.linspace(0, 3, 301)
    assert cycle_convergence(_series(np.sin(2 * np.pi * t) + 2.0, 0.01)) == pytest.approx(0.0, abs=1e-12)


def test_cycle_convergence_decaying_transient():
    t = np.linspace(0, 3, 3001)
    change = cycle_convergence(_series(1.0 + np.exp(-t), 0.001))
    # cycles [1, 2] and [2, 3] differ most at the boundary t0 = 1 by e^-t0 (1 - e^-1),
    # normalized by the largest value of the last cycle
    expected = math.exp(-1.0) * (1 - math.exp(-1.0)) / (1 + math.exp(-2.0))
    assert change == pytest.approx(expected, rel=1e-9)


def test_cycle_convergence_needs_two_cycles():
    with pytest.raises(InsufficientDataError):
        cycle_convergence(_series(np.ones(101), 0.01))


def test_solution_csv_round_trip(tmp_path):
    net = random_network(np.random.default_rng(3), 5)
    sol = simulate(net, SimulationConfig(steps_per_cycle=20, cycles=2, fixed_cycles=True))
    path = tmp_path / "sol.csv"
    write_solution_csv(sol, path, last_cycle_only=True)
    assert path.read_text().splitlines()[0] == "time,entity_kind,entity_id,quantity,value"
    back = read_solution_csv(path, 1.0)
    cyc = sol.last_cycle()
    assert np.array_equal(back.pressure, cyc.pressure)
    assert np.array_equal(back.flow, cyc.flow)
    assert np.array_equal(back.time, cyc.time)


def test_steady_state_matches_cycle_mean_for_linear_network():
    net = random_network(np.random.default_rng(11), 10, quad=False)
    _, flows = steady_state(net, "ri")
    sol = simulate(net, SimulationConfig(steps_per_cycle=400, cycles=40, cycle_tol=1e-10, flavor="ri")).last_cycle()
    for e in net.elements:
        q = sol.Q(e.id)
        mean = np.trapezoid(q, sol.time) / (sol.time[-1] - sol.time[0])
        assert flows[e.id] == pytest.approx(mean, rel=1e-3)


def test_pulmonary_scale_runtime():
    net = random_network(np.random.default_rng(5), 300)
    cfg = SimulationConfig(steps_per_cycle=1000, cycles=5, fixed_cycles=True)
    simulate(net, SimulationConfig(steps_per_cycle=16, cycles=1))
    start = time.perf_counter()
    sol = simulate(net, cfg)
    assert time.perf_counter() - start < 2.0
    assert sol.cycles_run == 5
