"""Geometric descriptors of vessels and junction outlet pairs, plus
generation numbers counted from the vasculature inlet."""
from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .circuit import FluidProperties, poiseuille_parameters
from .errors import InvalidGeometryError, ValidationError

# Column order of the feature table.
FEATURE_COLUMNS = (
    "r_in", "r_out", "r_min", "r_max",
    "r_out_ratio", "r_min_ratio", "r_max_ratio",
    "length", "length_ratio", "tortuosity", "angle", "flow_ratio",
    "R_poiseuille_absorbed", "R_stenosis_absorbed", "L_absorbed",
    "R_poiseuille_calculated", "R_stenosis_calculated", "L_calculated",
)
VESSEL_COLUMNS = tuple(c for c in FEATURE_COLUMNS if c != "flow_ratio")


@dataclass(frozen=True)
class FeatureVector:
    r_in: float
    r_out: float
    r_min: float
    r_max: float
    r_out_ratio: float
    r_min_ratio: float
    r_max_ratio: float
    length: float
    length_ratio: float
    tortuosity: float
    angle: float
    flow_ratio: float | None
    R_poiseuille_absorbed: float
    R_stenosis_absorbed: float
    L_absorbed: float
    R_poiseuille_calculated: float
    R_stenosis_calculated: float
    L_calculated: float

    def as_array(self, kind):
        cols = VESSEL_COLUMNS if kind == "vessel" else FEATURE_COLUMNS
        return np.array([getattr(self, c) for c in cols], dtype=float)

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def columns_for(kind):
    return VESSEL_COLUMNS if kind == "vessel" else FEATURE_COLUMNS


def element_path(disc, eid):
    return disc.element(eid).path


def _poiseuille_over(tree, path, fluid):
    if len(path) < 2:
        return 0.0, 0.0, 0.0
    g = tree.segment_geometry(path)
    p = poiseuille_parameters(fluid, g.length, g.area, g.stenosis_area)
    return p.R_lin, p.R_quad, p.L


def extract_features(disc, element_id, baseline_flows=None, fluid=None):
    """Table of geometric descriptors for one vessel or junction outlet pair.

    ``baseline_flows`` maps element ids of ``disc`` to cycle-averaged flow
    from a baseline simulation; it is required for junction elements, whose
    flow ratio is inlet flow over outlet flow.
    """
    fluid = fluid or FluidProperties()
    tree = disc.tree
    spec = disc.element(element_id)
    if spec.kind == "connector":
        raise ValidationError(f"connector {element_id} has no geometric features")
    path = spec.path
    idx = [tree.index[p] for p in path]
    radii = tree.misr[idx]
    r_in, r_out = float(radii[0]), float(radii[-1])
    r_min, r_max = float(radii.min()), float(radii.max())
    length = tree.path_length(path)
    d = float(np.linalg.norm(tree.xyz[idx[-1]] - tree.xyz[idx[0]]))
    if d == 0.0:
        if length > 0.0:
            raise InvalidGeometryError(f"{element_id}: zero inlet-outlet distance with path length {length}")
        tortuosity = 1.0
    else:
        tortuosity = max(1.0, length / d)
    cos_theta = float(np.clip(np.dot(tree.tangent[idx[0]], tree.tangent[idx[-1]]), -1.0, 1.0))
    angle = math.acos(cos_theta)

    flow_ratio = None
    absorbed = (0.0, 0.0, 0.0)
    if spec.kind == "junction":
        if baseline_flows is None:
            raise ValidationError(f"junction {element_id}: flow ratio needs baseline flows")
        j, outlet = disc.junction_outlet(element_id)
        q_in = sum(baseline_flows[j.element_id(k)] for k in range(len(j.outlets)))
        q_out = baseline_flows[element_id]
        flow_ratio = q_in / q_out if q_out != 0 else math.inf
        absorbed = _poiseuille_over(tree, outlet.absorbed, fluid)

    calculated = _poiseuille_over(tree, path, fluid)

    return FeatureVector(
        r_in, r_out, r_min, r_max,
        r_out / r_in, r_min / r_out, r_max / r_out,
        length, length / r_in, tortuosity, angle, flow_ratio,
        *absorbed, *calculated,
    )


def generation_numbers(disc):
    """Bifurcations crossed between each element and the inlet.

    Bifurcations produced by splitting one junction share that junction's
    generation; connectors inside such a chain inherit it as well.
    """
    out_from = {}
    for spec in disc.element_specs():
        out_from.setdefault(spec.inlet, []).append(spec)
    to_connector = set()
    for j in disc.junctions:
        for k, o in enumerate(j.outlets):
            if o.to_connector:
                to_connector.add(j.element_id(k))
    gamma = {}
    node_gamma = {disc.root: 0}
    queue = deque([disc.root])
    while queue:
        u = queue.popleft()
        g = node_gamma[u]
        for spec in out_from.get(u, ()):
            gamma[spec.id] = g
            g_out = g + 1 if spec.kind == "junction" and spec.id not in to_connector else g
            if spec.outlet not in node_gamma:
                node_gamma[spec.outlet] = g_out
                queue.append(spec.outlet)
    return gamma


def downstream_leaves(disc):
    """Leaf nodes below each element."""
    out_from = {}
    for spec in disc.element_specs():
        out_from.setdefault(spec.inlet, []).append(spec)
    cache = {}

    def leaves_below(node):
        if node in cache:
            return cache[node]
        kids = out_from.get(node, ())
        res = frozenset([node]) if not kids else frozenset().union(*(leaves_below(s.outlet) for s in kids))
        cache[node] = res
        return res

    return {s.id: leaves_below(s.outlet) for specs in out_from.values() for s in specs}


def mean_flows_from_leaves(disc, leaf_mean_flow):
    """Cycle-averaged element flows on ``disc`` from mean outlet flows.

    With rigid elements the mean flow through any element equals the total
    mean outflow of the leaves below it, which lets one baseline simulation
    on the unprocessed discretization supply flows for the adjusted one.
    """
    below = downstream_leaves(disc)
    return {eid: float(sum(leaf_mean_flow[n] for n in leaves)) for eid, leaves in below.items()}


def leaf_mean_flows(net, solution):
    cyc = solution.last_cycle()
    out = {}
    for n in net.outlet_nodes:
        (eid,) = net.incoming[n]
        q = cyc.Q(eid)
        # trapezoid mean over the closed cycle
        out[n] = float(np.trapezoid(q, cyc.time) / (cyc.time[-1] - cyc.time[0]))
    return out


# Feature table ------------------------------------------------------------------

TABLE_EXTRA = ("element_kind", "gamma", "geometry_id")


def write_feature_csv(rows, path, targets=None):
    """``rows``: iterable of (geometry_id, element_id, kind, gamma, FeatureVector).

    Columns: element_id, the descriptors in table order, element_kind,
    gamma, geometry_id, then R_lin/R_quad/L targets when ``targets`` maps
    (geometry_id, element_id) to ElementParameters.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["element_id", *FEATURE_COLUMNS, *TABLE_EXTRA]
    if targets is not None:
        header += ["R_lin", "R_quad", "L"]
    w.writerow(header)
    for geometry_id, eid, kind, gamma, fv in rows:
        vals = ["" if getattr(fv, c) is None else repr(float(getattr(fv, c))) for c in FEATURE_COLUMNS]
        row = [eid, *vals, kind, str(int(gamma)), geometry_id]
        if targets is not None:
            p = targets[(geometry_id, eid)]
            # frozen entries are not calibration results: leave them blank
            row += ["" if name in p.frozen else repr(float(getattr(p, name))) for name in ("R_lin", "R_quad", "L")]
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_feature_csv(path):
    """Returns a list of dicts with ``features`` (FeatureVector), ids, gamma
    and, when present, a ``target`` tuple (None for frozen entries)."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            vals = {c: (None if row[c] == "" else float(row[c])) for c in FEATURE_COLUMNS}
            rec = {
                "element_id": row["element_id"],
                "kind": row["element_kind"],
                "gamma": int(row["gamma"]),
                "geometry_id": row["geometry_id"],
                "features": FeatureVector(**vals),
            }
            if "R_lin" in row:
                rec["target"] = tuple(None if row[k] == "" else float(row[k]) for k in ("R_lin", "R_quad", "L"))
            out.append(rec)
    return out

