"""Lumped-parameter network model: element parameters, boundary conditions
and the validated circuit network.

All quantities are CGS: cm, s, g, dyn.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import InvalidGeometryError, NetworkValidationError

DEFAULT_CAPACITANCE = 1e-10  # cm^3/dyn, rigid wall
PARAM_NAMES = ("R_lin", "R_quad", "L")
ELEMENT_KINDS = ("vessel", "junction", "connector")
FLAVORS = ("ri", "rri")


def check_flavor(flavor):
    flavor = str(flavor).lower()
    if flavor not in FLAVORS:
        raise ValueError(f"unknown model flavor {flavor!r}; expected one of {FLAVORS}")
    return flavor


@dataclass(frozen=True)
class FluidProperties:
    density: float = 1.06
    viscosity: float = 0.04
    stenosis_coefficient: float = 1.52

    def __post_init__(self):
        if not self.density > 0 or not self.viscosity > 0:
            raise ValueError("density and viscosity must be positive")
        if not self.stenosis_coefficient >= 0:
            raise ValueError("stenosis coefficient must be non-negative")

    def to_dict(self):
        return {
            "density": self.density,
            "viscosity": self.viscosity,
            "stenosis_coefficient": self.stenosis_coefficient,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            density=float(d.get("density", 1.06)),
            viscosity=float(d.get("viscosity", 0.04)),
            stenosis_coefficient=float(d.get("stenosis_coefficient", 1.52)),
        )


@dataclass(frozen=True)
class ElementParameters:
    """Pressure-drop coefficients of one element.

    No sign constraint is placed on the resistances or the inductance:
    calibrated values can come out negative. ``frozen`` names the entries a
    calibration run must leave untouched.
    """

    R_lin: float = 0.0
    R_quad: float = 0.0
    L: float = 0.0
    C: float = DEFAULT_CAPACITANCE
    frozen: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "frozen", frozenset(self.frozen))
        if not self.C > 0:
            raise ValueError("capacitance must be positive")
        unknown = self.frozen - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown frozen parameter names {sorted(unknown)}")

    @classmethod
    def zero_frozen(cls, C=DEFAULT_CAPACITANCE):
        return cls(0.0, 0.0, 0.0, C, frozenset(PARAM_NAMES))

    def values(self):
        return (self.R_lin, self.R_quad, self.L)

    def with_values(self, **kwargs):
        return replace(self, **kwargs)

    def to_dict(self):
        return {
            "R_lin": self.R_lin,
            "R_quad": self.R_quad,
            "L": self.L,
            "C": self.C,
            "frozen": sorted(self.frozen),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            R_lin=float(d.get("R_lin", 0.0)),
            R_quad=float(d.get("R_quad", 0.0)),
            L=float(d.get("L", 0.0)),
            C=float(d.get("C", DEFAULT_CAPACITANCE)),
            frozen=frozenset(d.get("frozen", ())),
        )


@dataclass(frozen=True)
class VesselGeometry:
    length: float
    area: float
    stenosis_area: float

    def to_dict(self):
        return {"l": self.length, "A": self.area, "A_stenosis": self.stenosis_area}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["l"]), float(d["A"]), float(d["A_stenosis"]))


@dataclass(frozen=True)
class Element:
    id: str
    kind: str
    inlet: str
    outlet: str
    params: ElementParameters = field(default_factory=ElementParameters)
    geometry: VesselGeometry | None = None
    # "split" or "entrance" for connectors created by preprocessing
    origin: str | None = None

    def __post_init__(self):
        if self.kind not in ELEMENT_KINDS:
            raise ValueError(f"element {self.id}: unknown kind {self.kind!r}")

    def to_dict(self):
        d = {
            "id": self.id,
            "kind": self.kind,
            "inlet": self.inlet,
            "outlet": self.outlet,
            "params": self.params.to_dict(),
        }
        if self.geometry is not None:
            d["geometry"] = self.geometry.to_dict()
        if self.origin is not None:
            d["origin"] = self.origin
        return d

    @classmethod
    def from_dict(cls, d):
        geom = d.get("geometry")
        return cls(
            id=str(d["id"]),
            kind=str(d["kind"]),
            inlet=str(d["inlet"]),
            outlet=str(d["outlet"]),
            params=ElementParameters.from_dict(d.get("params", {})),
            geometry=VesselGeometry.from_dict(geom) if geom else None,
            origin=d.get("origin"),
        )


# Boundary conditions ---------------------------------------------------------


@dataclass(frozen=True)
class FlowBC:
    """Prescribed periodic inflow given as a one-cycle table."""

    times: tuple
    flows: tuple

    def __post_init__(self):
        object.__setattr__(self, "times", tuple(float(t) for t in self.times))
        object.__setattr__(self, "flows", tuple(float(q) for q in self.flows))
        if len(self.times) != len(self.flows) or len(self.times) < 2:
            raise ValueError("flow table needs at least two (t, Q) pairs of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("flow table times must be strictly increasing")

    @property
    def period(self):
        return self.times[-1] - self.times[0]

    def __call__(self, t):
        t0 = self.times[0]
        tau = t0 + np.mod(np.asarray(t, dtype=float) - t0, self.period)
        return np.interp(tau, self.times, self.flows)

    @classmethod
    def constant(cls, q, period=1.0):
        return cls((0.0, period), (q, q))

    @classmethod
    def from_function(cls, fn, period=1.0, samples=1001):
        t = np.linspace(0.0, period, samples)
        return cls(tuple(t), tuple(float(fn(x)) for x in t))

    def to_dict(self):
        return {"type": "FLOW", "t": list(self.times), "Q": list(self.flows)}


@dataclass(frozen=True)
class ResistanceBC:
    R: float
    Pd: float = 0.0

    def __post_init__(self):
        if not self.R >= 0:
            raise ValueError("outlet resistance must be non-negative")

    def to_dict(self):
        return {"type": "RESISTANCE", "R": self.R, "Pd": self.Pd}


@dataclass(frozen=True)
class RCRBC:
    Rp: float
    C: float
    Rd: float
    Pd: float = 0.0

    def __post_init__(self):
        if not (self.Rp >= 0 and self.Rd >= 0):
            raise ValueError("RCR resistances must be non-negative")
        if not self.C > 0:
            raise ValueError("RCR capacitance must be positive")

    def to_dict(self):
        return {"type": "RCR", "Rp": self.Rp, "C": self.C, "Rd": self.Rd, "Pd": self.Pd}


def bc_from_dict(d):
    kind = str(d["type"]).upper()
    if kind == "FLOW":
        return FlowBC(tuple(d["t"]), tuple(d["Q"]))
    if kind == "RESISTANCE":
        return ResistanceBC(float(d["R"]), float(d.get("Pd", 0.0)))
    if kind == "RCR":
        return RCRBC(float(d["Rp"]), float(d["C"]), float(d["Rd"]), float(d.get("Pd", 0.0)))
    raise ValueError(f"unknown boundary condition type {d['type']!r}")


# Element formulas --------------------------------------------------------------


def poiseuille_parameters(fluid, length, area, stenosis_area, C=DEFAULT_CAPACITANCE):
    """Poiseuille resistance, empirical stenosis coefficient and inductance
    of a rigid straight segment."""
    if not area > 0 or not stenosis_area > 0:
        raise InvalidGeometryError(f"areas must be positive (A={area}, A_stenosis={stenosis_area})")
    if not length >= 0:
        raise InvalidGeometryError(f"length must be non-negative (l={length})")
    mu, rho, kt = fluid.viscosity, fluid.density, fluid.stenosis_coefficient
    r_lin = 8.0 * math.pi * mu * length / area**2
    r_quad = kt * rho / (2.0 * area**2) * (area / stenosis_area - 1.0) ** 2
    inductance = rho * length / area
    return ElementParameters(r_lin, r_quad, inductance, C)


def element_pressure_drop(params, Q, dQdt, flavor="rri"):
    """Pressure difference inlet minus outlet across one element.

    The quadratic term uses ``Q*|Q|`` so that the drop flips sign with the
    flow direction. The RI flavor drops that term.
    """
    Q = np.asarray(Q, dtype=float)
    dp = params.R_lin * Q + params.L * np.asarray(dQdt, dtype=float)
    if check_flavor(flavor) == "rri":
        dp = dp + params.R_quad * Q * np.abs(Q)
    return dp if dp.ndim else float(dp)


# Network ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CircuitNetwork:
    nodes: tuple
    elements: tuple
    boundary_conditions: dict
    fluid: FluidProperties = field(default_factory=FluidProperties)
    cycle_period: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(str(n) for n in self.nodes))
        object.__setattr__(self, "elements", tuple(self.elements))
        object.__setattr__(
            self, "boundary_conditions", {str(k): v for k, v in self.boundary_conditions.items()}
        )

    @classmethod
    def from_elements(cls, elements, boundary_conditions, fluid=None, cycle_period=1.0):
        nodes = []
        seen = set()
        for e in elements:
            for n in (e.inlet, e.outlet):
                if n not in seen:
                    seen.add(n)
                    nodes.append(n)
        return cls(tuple(nodes), tuple(elements), dict(boundary_conditions),
                   fluid or FluidProperties(), cycle_period)

    @cached_property
    def node_index(self):
        return {n: i for i, n in enumerate(self.nodes)}

    @cached_property
    def element_index(self):
        return {e.id: i for i, e in enumerate(self.elements)}

    @cached_property
    def incoming(self):
        inc = defaultdict(list)
        for e in self.elements:
            inc[e.outlet].append(e.id)
        return dict(inc)

    @cached_property
    def outgoing(self):
        out = defaultdict(list)
        for e in self.elements:
            out[e.inlet].append(e.id)
        return dict(out)

    @property
    def inflow_node(self):
        nodes = [n for n, bc in self.boundary_conditions.items() if isinstance(bc, FlowBC)]
        return nodes[0] if len(nodes) == 1 else None

    @property
    def outlet_nodes(self):
        return [n for n, bc in self.boundary_conditions.items() if not isinstance(bc, FlowBC)]

    def element(self, eid):
        return self.elements[self.element_index[eid]]

    def params(self):
        return {e.id: e.params for e in self.elements}

    def with_params(self, params):
        """Copy with element parameters replaced (connectors stay frozen at zero)."""
        elements = []
        for e in self.elements:
            p = params.get(e.id, e.params)
            if e.kind == "connector":
                p = ElementParameters.zero_frozen(p.C)
            elements.append(replace(e, params=p))
        return replace(self, elements=tuple(elements))

    def to_dict(self):
        return {
            "fluid": self.fluid.to_dict(),
            "cycle_period": self.cycle_period,
            "nodes": list(self.nodes),
            "elements": [e.to_dict() for e in self.elements],
            "boundary_conditions": {n: bc.to_dict() for n, bc in self.boundary_conditions.items()},
        }

    @classmethod
    def from_dict(cls, d):
        elements = [Element.from_dict(e) for e in d["elements"]]
        bcs = {str(k): bc_from_dict(v) for k, v in d.get("boundary_conditions", {}).items()}
        fluid = FluidProperties.from_dict(d.get("fluid", {}))
        period = float(d.get("cycle_period", 1.0))
        if "nodes" in d:
            return cls(tuple(d["nodes"]), tuple(elements), bcs, fluid, period)
        return cls.from_elements(elements, bcs, fluid, period)


def validate_network(net):
    """Return one diagnostic string per violated network invariant."""
    diags = []
    node_set = set()
    for n in net.nodes:
        if n in node_set:
            diags.append(f"duplicate node id {n!r}")
        node_set.add(n)
    ids = set()
    for e in net.elements:
        if e.id in ids:
            diags.append(f"duplicate element id {e.id!r}")
        ids.add(e.id)
        for n in (e.inlet, e.outlet):
            if n not in node_set:
                diags.append(f"element {e.id!r} references unknown node {n!r}")
        if e.inlet == e.outlet:
            diags.append(f"element {e.id!r} has identical inlet and outlet node")
        if e.kind == "connector" and (
            any(v != 0.0 for v in e.params.values()) or e.params.frozen != frozenset(PARAM_NAMES)
        ):
            diags.append(f"connector {e.id!r} parameters must be frozen at zero")
        if not all(math.isfinite(v) for v in e.params.values()):
            diags.append(f"element {e.id!r} has non-finite parameters")

    flow_nodes = [n for n, bc in net.boundary_conditions.items() if isinstance(bc, FlowBC)]
    if len(flow_nodes) != 1:
        diags.append(f"expected exactly one prescribed-inflow node, found {len(flow_nodes)}")
    for n, bc in net.boundary_conditions.items():
        if n not in node_set:
            diags.append(f"boundary condition on unknown node {n!r}")
        if isinstance(bc, FlowBC) and not math.isclose(bc.period, net.cycle_period, rel_tol=1e-9):
            diags.append(
                f"inflow table at node {n!r} spans {bc.period} s, cycle period is {net.cycle_period} s"
            )

    degree = defaultdict(int)
    n_in = defaultdict(int)
    for e in net.elements:
        degree[e.inlet] += 1
        degree[e.outlet] += 1
        n_in[e.outlet] += 1
    for n in net.nodes:
        bc = net.boundary_conditions.get(n)
        if n_in[n] > 1:
            diags.append(f"node {n!r} is the outlet of {n_in[n]} elements")
        if isinstance(bc, FlowBC):
            if n_in[n]:
                diags.append(f"inflow node {n!r} must not be an element outlet")
            continue
        if degree[n] == 1 and n_in[n] == 1:
            if bc is None:
                diags.append(f"leaf node {n!r} has no outlet boundary condition")
        elif bc is not None:
            diags.append(f"outlet boundary condition on non-leaf node {n!r}")
        elif degree[n] < 2:
            diags.append(f"interior node {n!r} touches {degree[n]} element(s)")

    # tree topology: connected and |E| = |V| - 1
    if net.elements and node_set:
        adj = defaultdict(list)
        for e in net.elements:
            adj[e.inlet].append(e.outlet)
            adj[e.outlet].append(e.inlet)
        start = flow_nodes[0] if len(flow_nodes) == 1 and flow_nodes[0] in node_set else net.nodes[0]
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        missing = sorted(node_set - seen)
        if missing:
            diags.append(f"network is disconnected; unreachable nodes {missing[:5]}")
        elif len(net.elements) != len(node_set) - 1:
            diags.append("element graph contains a cycle")
    elif not net.elements:
        diags.append("network has no elements")
    return diags


def assemble_network(disc, params, bcs, fluid=None, cycle_period=None):
    """Build and validate a network from a discretization.

    ``params`` maps element id to ElementParameters; connectors may be
    omitted and always receive frozen zeros. ``bcs`` maps node id to a
    boundary condition.
    """
    fluid = fluid or FluidProperties()
    elements = []
    missing = []
    seen = set()
    for spec in disc.element_specs(fluid):
        if spec.id in seen:
            raise NetworkValidationError(f"duplicate element id {spec.id!r}")
        seen.add(spec.id)
        if spec.kind == "connector":
            p = ElementParameters.zero_frozen()
        elif spec.id in params:
            p = params[spec.id]
        else:
            missing.append(spec.id)
            continue
        elements.append(Element(spec.id, spec.kind, spec.inlet, spec.outlet, p, spec.geometry, spec.origin))
    if missing:
        raise NetworkValidationError(f"missing parameters for elements {missing}", missing)
    if cycle_period is None:
        flows = [bc for bc in bcs.values() if isinstance(bc, FlowBC)]
        cycle_period = flows[0].period if flows else 1.0
    nodes = list(disc.nodes)
    if len(set(nodes)) != len(nodes):
        raise NetworkValidationError("duplicate node ids in discretization")
    net = CircuitNetwork(tuple(nodes), tuple(elements), dict(bcs), fluid, cycle_period)
    diags = validate_network(net)
    if diags:
        raise NetworkValidationError("; ".join(diags), diags)
    return net


def require_valid(net):
    diags = validate_network(net)
    if diags:
        raise NetworkValidationError("; ".join(diags), diags)
    return net


def load_network(path):
    return CircuitNetwork.from_dict(json.loads(Path(path).read_text()))


def save_network(net, path):
    Path(path).write_text(json.dumps(net.to_dict(), indent=1, sort_keys=True))


def save_bcs(bcs, path):
    """Boundary conditions keyed by node id, as JSON."""
    Path(path).write_text(json.dumps({k: bc.to_dict() for k, bc in sorted(bcs.items())}, sort_keys=True))


def load_bcs(path):
    data = json.loads(Path(path).read_text())
    return {k: bc_from_dict(v) for k, v in data.items()}
