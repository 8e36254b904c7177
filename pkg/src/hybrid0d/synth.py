"""Synthetic vascular trees and an oracle cohort with known element parameters.

Trees are grown from a root vessel by bifurcations (occasionally
trifurcations) with Murray-law radii. The ground-truth parameters of every
element are a fixed smooth function of its geometric features scaled onto
the Poiseuille values, so they can be learned from features. References are
forward simulations of the truth network with the second-order
backward-difference scheme.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .circuit import ElementParameters, FlowBC, FluidProperties, RCRBC, assemble_network, check_flavor, save_bcs
from .errors import InvalidGeometryError
from .geometry import discretize, parse_centerline, save_centerline
from .solver import SimulationConfig, simulate, write_solution_csv
from .study import CohortSpec, GeometryRecord, baseline_parameters, featurize_geometry

log = logging.getLogger(__name__)


# Tree construction ---------------------------------------------------------------


class _Builder:
    """Accumulates centerline points and parent edges."""

    def __init__(self):
        self.points = []
        self.edges = []

    def add(self, xyz, radius, tangent, branch, in_junction, parent):
        pid = len(self.points)
        t = np.asarray(tangent, dtype=float)
        t = t / np.linalg.norm(t)
        self.points.append({
            "id": pid,
            "xyz": [float(v) for v in xyz],
            "misr": float(radius),
            "tangent": [float(v) for v in t],
            "branch_id": int(branch),
            "in_junction": bool(in_junction),
        })
        if parent is not None:
            self.edges.append([parent, pid])
        return pid

    def xyz(self, pid):
        return np.array(self.points[pid]["xyz"])

    def tangent(self, pid):
        return np.array(self.points[pid]["tangent"])

    def radius(self, pid):
        return self.points[pid]["misr"]

    def tree(self):
        return parse_centerline({"points": self.points, "edges": self.edges, "root": 0})


def _perpendicular(d, hint=None):
    hint = np.array([0.0, 0.0, 1.0]) if hint is None else np.asarray(hint, dtype=float)
    n = hint - np.dot(hint, d) * d
    if np.linalg.norm(n) < 1e-8:
        n = np.array([1.0, 0.0, 0.0]) - d[0] * d
    return n / np.linalg.norm(n)


def _rotate(v, axis, angle):
    axis = axis / np.linalg.norm(axis)
    return (v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)
            + axis * np.dot(axis, v) * (1 - math.cos(angle)))


def add_segment(b, parent, start, direction, length, radius_fn, branch, in_junction=False,
                curvature=0.0, bend=None, spacing=None, first_at_start=False):
    """Append points along a circular arc (straight when ``curvature`` is 0).

    ``radius_fn`` maps arc length in [0, length] to radius. Unless
    ``first_at_start`` is set the first point is placed one spacing past
    ``start`` (which belongs to the parent). Returns the point ids.
    """
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    n = _perpendicular(d, bend)
    if spacing is None:
        spacing = radius_fn(0.0) / 3.0
    count = max(2, int(math.ceil(length / spacing)))
    s_vals = np.linspace(0.0, length, count + 1)
    if not first_at_start:
        s_vals = s_vals[1:]
    ids = []
    for s in s_vals:
        if curvature == 0.0:
            pos = start + s * d
            tan = d
        else:
            k = curvature
            pos = start + (math.sin(k * s) / k) * d + ((1 - math.cos(k * s)) / k) * n
            tan = math.cos(k * s) * d + math.sin(k * s) * n
        parent = b.add(pos, radius_fn(s), tan, branch, in_junction, parent)
        ids.append(parent)
    return ids


def straight_tree(length=10.0, radius=1.0, points=11):
    """Single straight constant-radius vessel along x."""
    b = _Builder()
    add_segment(b, None, np.zeros(3), [1, 0, 0], length, lambda s: radius, 0,
                spacing=length / (points - 1), first_at_start=True)
    return b.tree()


def arc_tree(arc_radius=5.0, radius=0.5, points=41):
    """Quarter circle of the given radius, constant vessel radius."""
    b = _Builder()
    length = math.pi / 2 * arc_radius
    add_segment(b, None, np.zeros(3), [1, 0, 0], length, lambda s: radius, 0,
                curvature=1.0 / arc_radius, bend=[0, 1, 0], spacing=length / (points - 1),
                first_at_start=True)
    return b.tree()


def junction_tree(outlet_lengths=(1.0, 1.0), outlet_radii=None, root_length=10.0, root_radius=1.0,
                  outlet_vessel_lengths=None, spacing=0.25, spread=math.radians(40), stem=None):
    """One junction fed by a root vessel.

    ``outlet_lengths`` are the in-junction path lengths per outlet. With
    ``stem`` set, all outlets leave the end of a shared in-junction stem of
    that length (included in ``outlet_lengths``).
    """
    n = len(outlet_lengths)
    outlet_radii = outlet_radii or [root_radius * 0.7] * n
    outlet_vessel_lengths = outlet_vessel_lengths or [10.0] * n
    b = _Builder()
    root_ids = add_segment(b, None, np.zeros(3), [1, 0, 0], root_length, lambda s: root_radius, 0,
                           spacing=spacing, first_at_start=True)
    inlet = root_ids[-1]
    x_axis = np.array([1.0, 0.0, 0.0])
    stem_ids = []
    if stem:
        stem_ids = add_segment(b, inlet, b.xyz(inlet), x_axis, stem, lambda s: root_radius, 1,
                               in_junction=True, spacing=spacing)
    for k in range(n):
        angle = spread * (2 * k / (n - 1) - 1) if n > 1 else 0.0
        d = _rotate(x_axis, np.array([0.0, 0.0, 1.0]), angle)
        r_out = outlet_radii[k]
        base = stem_ids[-1] if stem_ids else inlet
        own = outlet_lengths[k] - (stem or 0.0)
        jids = add_segment(b, base, b.xyz(base), d, own,
                           lambda s, r0=b.radius(base), r1=r_out, L=own: r0 + (r1 - r0) * s / L,
                           k + 2, in_junction=True, spacing=min(spacing, own / 2))
        add_segment(b, jids[-1], b.xyz(jids[-1]), d, outlet_vessel_lengths[k], lambda s, r=r_out: r,
                    k + 2, spacing=spacing)
    return b.tree()


def chain_tree(spacing=0.25):
    """Root vessel, junction, one outlet continuing into a second junction:
    five vessels and two junctions."""
    b = _Builder()
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([0.0, 0.0, 1.0])
    ids = add_segment(b, None, np.zeros(3), x, 6.0, lambda s: 1.0, 0, spacing=spacing, first_at_start=True)
    branch = 1

    def bifurcate(inlet, r_in, depth):
        nonlocal branch
        tips = []
        for sign in (-1, 1):
            d = _rotate(b.tangent(inlet), z, sign * math.radians(30))
            r = r_in * 0.79
            branch += 1
            j = add_segment(b, inlet, b.xyz(inlet), d, r_in, lambda s, r=r: r_in + (r - r_in) * s / r_in,
                            branch, in_junction=True, spacing=spacing)
            v = add_segment(b, j[-1], b.xyz(j[-1]), d, 6.0, lambda s, r=r: r, branch, spacing=spacing)
            tips.append((v[-1], r))
        return tips

    tips = bifurcate(ids[-1], 1.0, 0)
    bifurcate(tips[0][0], tips[0][1], 1)
    return b.tree()


@dataclass(frozen=True)
class TreeParams:
    """Random tree-generation settings."""

    depth: tuple = (2, 3)
    root_radius: float = 0.3
    min_radius: float = 0.03
    length_ratio: tuple = (7.0, 24.0)  # vessel length / inlet radius
    asymmetry: tuple = (0.55, 1.0)  # radius ratio of the smaller child
    branch_angle: tuple = (20.0, 65.0)  # degrees
    trifurcation_prob: float = 0.2
    curvature_prob: float = 0.35
    max_turn: float = 60.0  # degrees of total arc turning
    taper: tuple = (0.0, 0.15)
    stenosis_prob: float = 0.25
    stenosis_severity: tuple = (0.15, 0.45)
    junction_ratio: tuple = (0.6, 1.4)  # in-junction length / parent radius
    spacing_ratio: float = 0.33  # point spacing / local radius


def _radius_profile(rng, r_in, length, p):
    taper = rng.uniform(*p.taper)
    r_out = r_in * (1.0 - taper)
    sev = 0.0
    if rng.random() < p.stenosis_prob:
        sev = rng.uniform(*p.stenosis_severity)
    s0 = rng.uniform(0.3, 0.7) * length
    width = 0.1 * length

    def radius(s):
        base = r_in + (r_out - r_in) * s / length
        return base * (1.0 - sev * math.exp(-(((s - s0) / width) ** 2)))

    return radius, r_out


def random_tree(rng, params=TreeParams()):
    """Grow a random labeled tree. Raises InvalidGeometryError when a radius
    falls below ``params.min_radius``."""
    p = params
    b = _Builder()
    depth = int(rng.integers(p.depth[0], p.depth[1] + 1))
    state = {"branch": 0}

    def vessel(parent, start, d, r_in, gen):
        state["branch"] += 1
        br = state["branch"]
        if r_in < p.min_radius:
            raise InvalidGeometryError(f"radius {r_in:.3g} below {p.min_radius}")
        length = rng.uniform(*p.length_ratio) * r_in
        radius_fn, r_out = _radius_profile(rng, r_in, length, p)
        curvature, bend = 0.0, None
        if rng.random() < p.curvature_prob:
            turn = math.radians(rng.uniform(10.0, p.max_turn))
            curvature = turn / length
            bend = rng.normal(size=3)
        ids = add_segment(b, parent, start, d, length, radius_fn, br, curvature=curvature, bend=bend,
                          spacing=p.spacing_ratio * r_in, first_at_start=parent is None)
        if gen < depth:
            junction(ids[-1], r_out, gen)

    def junction(inlet, r_in, gen):
        d_in = b.tangent(inlet)
        n_out = 3 if rng.random() < p.trifurcation_prob else 2
        base = inlet
        if n_out == 3:
            # short shared in-junction stem before the three outlets separate
            base = add_segment(b, inlet, b.xyz(inlet), d_in, 0.5 * r_in, lambda s: r_in, state["branch"],
                               in_junction=True, spacing=0.25 * r_in)[-1]
        ratios = np.sort(rng.uniform(*p.asymmetry, size=n_out - 1))
        rel = np.concatenate([[1.0], ratios])
        r_children = r_in * rel / np.sum(rel**3) ** (1 / 3)
        rng.shuffle(r_children)
        axis0 = _perpendicular(d_in, rng.normal(size=3))
        for k in range(n_out):
            angle = math.radians(rng.uniform(*p.branch_angle))
            around = 2 * math.pi * k / n_out
            axis = _rotate(axis0, d_in, around)
            d = _rotate(d_in, axis, angle)
            r_c = float(r_children[k])
            lj = rng.uniform(*p.junction_ratio) * r_in
            state["branch"] += 1
            r0 = b.radius(base)
            jids = add_segment(b, base, b.xyz(base), d, lj,
                               lambda s, r0=r0, r1=r_c, L=lj: r0 + (r1 - r0) * s / L,
                               state["branch"], in_junction=True, spacing=min(p.spacing_ratio * r_c, lj / 2))
            vessel(jids[-1], b.xyz(jids[-1]), d, r_c, gen + 1)

    vessel(None, np.zeros(3), np.array([1.0, 0.0, 0.0]), p.root_radius, 0)
    return b.tree()


# Ground truth --------------------------------------------------------------------


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class SyntheticOracle:
    """Cohort generator and the feature-to-parameter truth map.

    ``identity`` makes the truth equal the Poiseuille values (the baseline
    model then reproduces the reference). Otherwise ``quad_strength`` adds a
    Bernoulli-like quadratic loss rho/(2 A_out^2) on top of the stenosis
    term, which keeps every quadratic coefficient identifiable from data.
    """

    seed: int = 0
    tree: TreeParams = field(default_factory=TreeParams)
    identity: bool = False
    quad_strength: float = 1.0
    inflow_velocity: float = 15.0  # cm/s mean at the root
    outlet_ratio: tuple = (2.0, 4.0)  # outlet resistance / path resistance
    rc_time: tuple = (0.1, 0.2)  # s
    cycle_period: float = 1.0
    steps_per_cycle: int = 1000
    entrance_length_factor: float = 10.0

    def vessel_factors(self, fv):
        if self.identity:
            return 1.0, 1.0
        f_r = 1.0 + 0.75 * _sig((fv.length_ratio - 11.0) / 3.0) + 0.75 * _sig((fv.angle - 0.4) / 0.15)
        f_l = 1.0 + 0.75 * _sig((fv.r_min_ratio - 0.8) / 0.08) + 0.75 * _sig((fv.tortuosity - 1.03) / 0.02)
        return f_r, f_l

    def junction_factors(self, fv):
        if self.identity:
            return 1.0, 1.0
        f_r = 1.0 + 0.75 * _sig((fv.flow_ratio - 2.0) / 0.4) + 0.75 * _sig((0.8 - fv.r_out_ratio) / 0.06)
        f_l = 1.0 + 0.75 * _sig((fv.angle - 0.6) / 0.2) + 0.75 * _sig((fv.length_ratio - 2.0) / 0.5)
        return f_r, f_l

    def truth(self, disc, features, fluid, flavor="rri"):
        """Element parameters for every non-connector element of ``disc``."""
        check_flavor(flavor)
        out = {}
        for spec in disc.element_specs():
            if spec.kind == "connector":
                continue
            fv = features[spec.id]
            a_out = math.pi * fv.r_out**2
            bern = 0.0 if self.identity else self.quad_strength * fluid.density / (2 * a_out**2)
            if spec.kind == "vessel":
                f_r, f_l = self.vessel_factors(fv)
                r_lin = f_r * fv.R_poiseuille_calculated
                ind = f_l * fv.L_calculated
                r_quad = fv.R_stenosis_calculated + bern
                frozen = ()
            else:
                f_r, f_l = self.junction_factors(fv)
                r_lin = fv.R_poiseuille_absorbed + (f_r - 1.0) * fv.R_poiseuille_calculated
                ind = fv.L_absorbed + (f_l - 1.0) * fv.L_calculated
                r_quad = fv.R_stenosis_absorbed + bern
                frozen = ()
                _, outlet = disc.junction_outlet(spec.id)
                if outlet.to_connector:
                    r_quad, ind, frozen = 0.0, 0.0, ("R_quad", "L")
            if flavor == "ri":
                r_quad = 0.0
            out[spec.id] = ElementParameters(r_lin, r_quad, ind, frozen=frozenset(frozen))
        return out

    def boundary_conditions(self, rng, disc, fluid):
        """Pulsatile inflow at the root and RCR outlets scaled to the
        Poiseuille resistance of each root-to-leaf path."""
        tree = disc.tree
        r0 = tree.point_radius(tree.root)
        q_mean = self.inflow_velocity * math.pi * r0**2
        T = self.cycle_period
        phase = rng.uniform(0, 2 * math.pi)

        def wave(t):
            w = 2 * math.pi * t / T
            return q_mean * (1.0 + 0.5 * math.sin(w) + 0.15 * math.sin(2 * w + phase))

        bcs = {disc.root: FlowBC.from_function(wave, T, self.steps_per_cycle + 1)}
        params = baseline_parameters(disc, fluid)
        by_outlet = {s.outlet: s for s in disc.element_specs()}
        for leaf in disc.leaf_nodes:
            r_path, node = 0.0, leaf
            while node != disc.root:
                spec = by_outlet[node]
                r_path += params[spec.id].R_lin if spec.id in params else 0.0
                node = spec.inlet
            total = rng.uniform(*self.outlet_ratio) * r_path
            rd = 0.9 * total
            bcs[leaf] = RCRBC(Rp=0.1 * total, C=rng.uniform(*self.rc_time) / rd, Rd=rd, Pd=0.0)
        return bcs

    def to_dict(self):
        d = asdict(self)
        return d


def reference_config(oracle):
    return SimulationConfig(steps_per_cycle=oracle.steps_per_cycle, cycles=30, cycle_tol=1e-8, order=2)


def build_truth_network(oracle, tree, bcs, fluid, flavor="rri"):
    """Hybrid discretization, features and truth network of one tree."""
    geo = featurize_geometry(tree, bcs, fluid, oracle.entrance_length_factor)
    truth = oracle.truth(geo.disc, geo.features, fluid, flavor)
    net = assemble_network(geo.disc, truth, bcs, fluid, oracle.cycle_period)
    return geo, truth, net


def generate_synthetic_cohort(oracle, count, out_dir, flavor="rri", fluid=None, max_attempts=50):
    """Write ``count`` synthetic geometries under ``out_dir``.

    Per geometry: centerline JSON, boundary-condition JSON, truth-parameter
    JSON and a reference CSV (final cycle of the truth simulation). A
    ``cohort.json`` index ties them together. Geometries whose radii
    underflow are regenerated from the next seed.
    """
    if count < 5:
        raise ValueError("a cohort needs at least 5 geometries")
    fluid = fluid or FluidProperties()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    seed = oracle.seed
    attempts = 0
    while len(records) < count:
        rng = np.random.default_rng([seed, len(records)])
        seed_used = seed
        seed += 1
        attempts += 1
        try:
            tree = random_tree(rng, oracle.tree)
        except InvalidGeometryError as exc:
            log.warning("regenerating geometry %d: %s", len(records), exc)
            if attempts > max_attempts * count:
                raise
            continue
        gid = f"geom{len(records):03d}"
        bcs = oracle.boundary_conditions(rng, discretize(tree), fluid)
        geo, truth, net = build_truth_network(oracle, tree, bcs, fluid, flavor)
        sol = simulate(net, reference_config(oracle))
        files = {
            "centerline": f"{gid}_centerline.json",
            "bcs": f"{gid}_bcs.json",
            "reference": f"{gid}_reference.csv",
            "truth": f"{gid}_truth.json",
        }
        save_centerline(tree, out / files["centerline"])
        save_bcs(bcs, out / files["bcs"])
        write_solution_csv(sol, out / files["reference"], last_cycle_only=True)
        (out / files["truth"]).write_text(json.dumps(
            {eid: p.to_dict() for eid, p in sorted(truth.items())}, sort_keys=True, indent=1))
        records.append(GeometryRecord(gid, out / files["centerline"], out / files["bcs"],
                                      out / files["reference"], out / files["truth"], seed_used))
    spec = CohortSpec(name=f"synthetic-{oracle.seed}", geometries=tuple(records), seed=oracle.seed,
                      cycle_period=oracle.cycle_period)
    spec.save(out / "cohort.json", extra={"oracle": oracle.to_dict(), "flavor": flavor})
    return spec

