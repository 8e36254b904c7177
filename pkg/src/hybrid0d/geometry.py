"""Labeled centerline trees and their vessel/junction discretization.

A centerline is a rooted tree of points. Each point carries a maximum
inscribed sphere radius (MISR), a unit tangent, a branch id and a flag
saying whether it lies inside a junction region. Node ids of a
discretization are the string form of the centerline point id they sit
on; preprocessing adds suffixed ids for connector endpoints.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .circuit import VesselGeometry
from .errors import CenterlineError, ValidationError

TANGENT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CenterlineTree:
    ids: tuple
    xyz: np.ndarray
    misr: np.ndarray
    tangent: np.ndarray
    branch: np.ndarray
    in_junction: np.ndarray
    parent: dict  # point id -> parent point id (root absent)
    root: int

    @cached_property
    def index(self):
        return {pid: i for i, pid in enumerate(self.ids)}

    @cached_property
    def children(self):
        ch = defaultdict(list)
        for c, p in self.parent.items():
            ch[p].append(c)
        return {p: tuple(sorted(c)) for p, c in ch.items()}

    @cached_property
    def distance(self):
        """Cumulative centerline path distance from the root, per point id."""
        dist = {self.root: 0.0}
        queue = deque([self.root])
        while queue:
            u = queue.popleft()
            iu = self.index[u]
            for v in self.children.get(u, ()):
                step = float(np.linalg.norm(self.xyz[self.index[v]] - self.xyz[iu]))
                dist[v] = dist[u] + step
                queue.append(v)
        return dist

    def __len__(self):
        return len(self.ids)

    def point_radius(self, pid):
        return float(self.misr[self.index[pid]])

    def point_tangent(self, pid):
        return self.tangent[self.index[pid]]

    def point_xyz(self, pid):
        return self.xyz[self.index[pid]]

    def is_junction(self, pid):
        return bool(self.in_junction[self.index[pid]])

    def path(self, start, end):
        """Point ids from ``start`` down to its descendant ``end`` (inclusive)."""
        out = [end]
        while out[-1] != start:
            p = self.parent.get(out[-1])
            if p is None:
                raise ValidationError(f"point {end} is not downstream of {start}")
            out.append(p)
        return tuple(reversed(out))

    def path_length(self, path):
        d = self.distance
        return d[path[-1]] - d[path[0]]

    def ancestors(self, pid):
        out = []
        while pid is not None:
            out.append(pid)
            pid = self.parent.get(pid)
        return out

    def common_ancestor(self, pids):
        pids = list(pids)
        common = self.ancestors(pids[0])
        for p in pids[1:]:
            anc = set(self.ancestors(p))
            common = [a for a in common if a in anc]
        return common[0]

    def leaves(self):
        return tuple(sorted(p for p in self.ids if p not in self.children))

    def segment_geometry(self, path):
        """Length, mean cross-section area and minimum (stenosis) area of a path."""
        r = self.misr[[self.index[p] for p in path]]
        return VesselGeometry(
            length=self.path_length(path),
            area=float(math.pi * np.mean(r**2)),
            stenosis_area=float(math.pi * np.min(r) ** 2),
        )

    def to_dict(self):
        pts = []
        for i, pid in enumerate(self.ids):
            pts.append({
                "id": int(pid),
                "xyz": [float(v) for v in self.xyz[i]],
                "misr": float(self.misr[i]),
                "tangent": [float(v) for v in self.tangent[i]],
                "branch_id": int(self.branch[i]),
                "in_junction": bool(self.in_junction[i]),
            })
        edges = [[int(p), int(c)] for c, p in sorted(self.parent.items(), key=lambda kv: kv[0])]
        return {"points": pts, "edges": edges, "root": int(self.root)}


def _require(cond, msg):
    if not cond:
        raise CenterlineError(msg)


def parse_centerline(source):
    """Build a validated tree from a JSON file path, JSON text or parsed dict."""
    if isinstance(source, (str, Path)) and Path(str(source)).exists():
        data = json.loads(Path(source).read_text())
    elif isinstance(source, str):
        data = json.loads(source)
    else:
        data = source
    _require(isinstance(data, dict), "centerline must be a JSON object")
    for key in ("points", "edges", "root"):
        _require(key in data, f"centerline is missing key {key!r}")
    pts = data["points"]
    _require(isinstance(pts, list) and pts, "centerline needs a non-empty point list")
    ids, xyz, misr, tan, branch, junc = [], [], [], [], [], []
    for p in pts:
        for key in ("id", "xyz", "misr", "tangent", "branch_id", "in_junction"):
            _require(key in p, f"point is missing key {key!r}: {p}")
        _require(len(p["xyz"]) == 3 and len(p["tangent"]) == 3, f"point {p['id']}: xyz/tangent need 3 entries")
        ids.append(int(p["id"]))
        xyz.append([float(v) for v in p["xyz"]])
        misr.append(float(p["misr"]))
        tan.append([float(v) for v in p["tangent"]])
        branch.append(int(p["branch_id"]))
        _require(isinstance(p["in_junction"], bool), f"point {p['id']}: in_junction must be boolean")
        junc.append(p["in_junction"])
    _require(len(set(ids)) == len(ids), "duplicate point ids")
    xyz = np.array(xyz)
    misr = np.array(misr)
    tan = np.array(tan)
    _require(np.all(np.isfinite(xyz)) and np.all(np.isfinite(tan)), "non-finite coordinates")
    _require(np.all(misr > 0), "radii must be positive")
    norms = np.linalg.norm(tan, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > TANGENT_TOL)[0]
    _require(len(bad) == 0, f"non-unit tangents at points {[ids[i] for i in bad[:5]]}")

    idset = set(ids)
    parent = {}
    for edge in data["edges"]:
        _require(len(edge) == 2, f"edge must be [parent, child]: {edge}")
        p, c = int(edge[0]), int(edge[1])
        _require(p in idset and c in idset, f"edge {edge} references unknown points")
        _require(c not in parent, f"point {c} has more than one parent")
        _require(p != c, f"self-loop at point {p}")
        parent[c] = p
    root = int(data["root"])
    _require(root in idset, f"root {root} is not a point")
    _require(root not in parent, "root must not have a parent")
    _require(len(parent) == len(ids) - 1, "connectivity is not a tree (edge count)")

    tree = CenterlineTree(tuple(ids), xyz, misr, tan, np.array(branch), np.array(junc, dtype=bool), parent, root)
    # reachability from the root rules out cycles among the remaining points
    dist = tree.distance
    _require(len(dist) == len(ids), "connectivity contains a cycle or unreachable points")
    for c, p in parent.items():
        _require(dist[c] > dist[p], f"path distance not strictly increasing at edge {p}->{c}")
    for arr in (xyz, misr, tan, tree.branch, tree.in_junction):
        arr.setflags(write=False)
    return tree


def save_centerline(tree, path):
    Path(path).write_text(json.dumps(tree.to_dict(), sort_keys=True))


# Discretization ----------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    """Vessel or connector element. A connector's path is a single point."""

    id: str
    kind: str
    inlet: str
    outlet: str
    path: tuple
    branch: int | None = None
    origin: str | None = None


@dataclass(frozen=True)
class JunctionOutlet:
    node: str
    path: tuple  # junction inlet location -> outlet location
    length: float  # in-junction path length l_j, before entrance-length adjustment
    absorbed: tuple = ()  # points taken over from the downstream vessel
    to_connector: bool = False


@dataclass(frozen=True)
class Junction:
    id: str
    inlet: str
    outlets: tuple
    origin: str  # id of the junction before splitting
    stage: int = 0

    def element_id(self, k):
        return f"{self.id}:{k}"


@dataclass(frozen=True)
class ElementSpec:
    id: str
    kind: str
    inlet: str
    outlet: str
    path: tuple
    geometry: VesselGeometry | None = None
    origin: str | None = None
    junction: str | None = None
    outlet_index: int | None = None


@dataclass(frozen=True, eq=False)
class Discretization:
    tree: CenterlineTree
    nodes: dict  # node id -> point id of its location
    vessels: tuple
    junctions: tuple
    connectors: tuple = ()
    root: str = ""
    notes: tuple = ()

    def element_specs(self, fluid=None):
        specs = []
        for v in self.vessels:
            specs.append(ElementSpec(v.id, "vessel", v.inlet, v.outlet, v.path,
                                     self.tree.segment_geometry(v.path)))
        for j in self.junctions:
            for k, o in enumerate(j.outlets):
                specs.append(ElementSpec(j.element_id(k), "junction", j.inlet, o.node, o.path,
                                         junction=j.id, outlet_index=k))
        for c in self.connectors:
            specs.append(ElementSpec(c.id, "connector", c.inlet, c.outlet, c.path, origin=c.origin))
        return specs

    @cached_property
    def specs(self):
        return {s.id: s for s in self.element_specs()}

    def element(self, eid):
        return self.specs[eid]

    def junction(self, jid):
        for j in self.junctions:
            if j.id == jid:
                return j
        raise KeyError(jid)

    def junction_outlet(self, eid):
        spec = self.specs[eid]
        j = self.junction(spec.junction)
        return j, j.outlets[spec.outlet_index]

    @property
    def leaf_nodes(self):
        return tuple(str(p) for p in self.tree.leaves())

    def counts(self):
        return {"vessels": len(self.vessels), "junctions": len(self.junctions),
                "connectors": len(self.connectors)}

    def to_dict(self):
        return {
            "root": self.root,
            "nodes": {k: int(v) for k, v in self.nodes.items()},
            "vessels": [{"id": v.id, "inlet": v.inlet, "outlet": v.outlet, "path": list(v.path),
                         "branch": v.branch} for v in self.vessels],
            "junctions": [{"id": j.id, "inlet": j.inlet, "origin": j.origin, "stage": j.stage,
                           "outlets": [{"node": o.node, "path": list(o.path), "l_j": o.length,
                                        "absorbed": list(o.absorbed), "to_connector": o.to_connector}
                                       for o in j.outlets]} for j in self.junctions],
            "connectors": [{"id": c.id, "inlet": c.inlet, "outlet": c.outlet, "point": c.path[0],
                            "origin": c.origin} for c in self.connectors],
            "notes": list(self.notes),
        }


def _ordered_points(tree):
    """Breadth-first order from the root, children by ascending id."""
    order = [tree.root]
    for u in order:
        order.extend(tree.children.get(u, ()))
    return order


def discretize(tree):
    """Split a labeled centerline into vessels (runs of non-junction points)
    and junctions (labeled regions with one inlet and several outlets)."""
    order = _ordered_points(tree)
    rank = {p: i for i, p in enumerate(order)}
    jpts = [p for p in order if tree.is_junction(p)]
    if tree.is_junction(tree.root):
        raise ValidationError("the root point lies inside a junction region (no inlet)")

    # connected components of junction points, merged when they share an inlet
    comp = {}
    for p in jpts:
        par = tree.parent.get(p)
        if par is not None and tree.is_junction(par):
            comp[p] = comp[par]
        else:
            comp[p] = ("entry", par)
    regions = defaultdict(list)
    for p in jpts:
        regions[comp[p][1]].append(p)

    junction_by_inlet = {}
    for inlet_pt in sorted(regions, key=rank.get):
        members = set(regions[inlet_pt])
        outlets = []
        for p in sorted(members, key=rank.get):
            kids = tree.children.get(p, ())
            if not kids:
                raise ValidationError(f"junction region ends at leaf point {p}")
            outlets.extend(k for k in kids if k not in members)
        if len(outlets) < 2:
            raise ValidationError(f"junction region at inlet {inlet_pt} has {len(outlets)} outlet(s)")
        non_junction_kids = [k for k in tree.children.get(inlet_pt, ()) if not tree.is_junction(k)]
        if non_junction_kids:
            raise ValidationError(
                f"point {inlet_pt} feeds a junction region and unlabeled branches {non_junction_kids}"
            )
        junction_by_inlet[inlet_pt] = sorted(outlets, key=rank.get)

    # vessels: walk from the root and from each junction outlet
    starts = [tree.root] + [o for outs in junction_by_inlet.values() for o in outs]
    starts.sort(key=rank.get)
    vessels = []
    node_points = set()
    for s in starts:
        path = [s]
        while True:
            kids = tree.children.get(path[-1], ())
            if not kids or path[-1] in junction_by_inlet:
                break
            if len(kids) > 1:
                raise ValidationError(f"unlabeled branching at non-junction point {path[-1]}")
            path.append(kids[0])
        node_points.update((path[0], path[-1]))
        if len(path) > 1:
            vessels.append(Segment(f"V{len(vessels)}", "vessel", str(path[0]), str(path[-1]),
                                   tuple(path), int(tree.branch[tree.index[s]])))
    junctions = []
    for k, inlet_pt in enumerate(sorted(junction_by_inlet, key=rank.get)):
        outs = []
        for o in junction_by_inlet[inlet_pt]:
            path = tree.path(inlet_pt, o)
            outs.append(JunctionOutlet(str(o), path, tree.path_length(path)))
        jid = f"J{k}"
        junctions.append(Junction(jid, str(inlet_pt), tuple(outs), jid, 0))
        node_points.add(inlet_pt)
        node_points.update(junction_by_inlet[inlet_pt])
    nodes = {str(p): p for p in sorted(node_points, key=rank.get)}
    return Discretization(tree, nodes, tuple(vessels), tuple(junctions), (), str(tree.root), ())


def split_multi_outlet_junctions(disc):
    """Replace every junction with three or more outlets by a chain of
    bifurcations joined by zero-length connectors.

    Outlets are ordered by in-junction path length (ties by outlet point id).
    Bifurcation i sends outlet i one way and connector i the other; the last
    bifurcation takes the two longest outlets.
    """
    tree = disc.tree
    nodes = dict(disc.nodes)
    junctions, connectors = [], list(disc.connectors)
    notes = list(disc.notes)
    for j in disc.junctions:
        n = len(j.outlets)
        if n <= 2:
            junctions.append(j)
            continue
        outs = sorted(j.outlets, key=lambda o: (o.length, int(nodes[o.node])))
        inlet_node = j.inlet
        inlet_pt = nodes[j.inlet]
        for i in range(n - 1):
            bid = f"{j.id}.{i}"
            if i < n - 2:
                rest = [nodes[o.node] for o in outs[i + 1:]]
                loc = tree.common_ancestor(rest)
                c_in, c_out = f"{j.id}c{i}a", f"{j.id}c{i}b"
                nodes[c_in] = loc
                nodes[c_out] = loc
                cpath = tree.path(inlet_pt, loc)
                first = _reroot_outlet(tree, outs[i], inlet_pt)
                second = JunctionOutlet(c_in, cpath, tree.path_length(cpath), (), True)
                junctions.append(Junction(bid, inlet_node, (first, second), j.origin, i))
                connectors.append(Segment(f"{j.id}.C{i}", "connector", c_in, c_out, (loc,), None, "split"))
                inlet_node, inlet_pt = c_out, loc
            else:
                pair = tuple(_reroot_outlet(tree, o, inlet_pt) for o in outs[n - 2:])
                junctions.append(Junction(bid, inlet_node, pair, j.origin, i))
        notes.append(f"split {j.id}: {n} outlets -> {n - 1} bifurcations, {n - 2} connectors")
    return replace(disc, nodes=nodes, junctions=tuple(junctions), connectors=tuple(connectors),
                   notes=tuple(notes))


def _reroot_outlet(tree, outlet, inlet_pt):
    path = tree.path(inlet_pt, int(outlet.path[-1]))
    return replace(outlet, path=path)


def entrance_length_adjust(disc, factor=10.0):
    """Move each junction outlet downstream by ``factor`` times the outlet
    radius, absorbing that stretch of the outlet vessel into the junction.

    The new boundary snaps to the first centerline point at or beyond the
    target distance. When the outlet vessel is not longer than the target,
    the whole vessel is absorbed and a zero-length connector links the
    junction to whatever followed the vessel.
    """
    if factor < 0:
        raise ValueError("entrance-length factor must be non-negative")
    if factor == 0:
        return disc
    tree = disc.tree
    dist = tree.distance
    nodes = dict(disc.nodes)
    vessels = {v.inlet: v for v in disc.vessels}
    kept = {v.id: v for v in disc.vessels}
    connectors = list(disc.connectors)
    junctions = []
    notes = list(disc.notes)
    for j in disc.junctions:
        new_outs = []
        for o in j.outlets:
            v = vessels.get(o.node) if not o.to_connector else None
            if v is None:
                new_outs.append(o)
                continue
            r_out = tree.point_radius(v.path[0])
            target = factor * r_out
            start = dist[v.path[0]]
            snap = None
            for idx, p in enumerate(v.path):
                if dist[p] - start >= target - 1e-9 * max(1.0, target):
                    snap = idx
                    break
            if snap is None or snap == len(v.path) - 1:
                # whole vessel absorbed
                end_pt = v.path[-1]
                new_node = f"{v.outlet}e"
                nodes[new_node] = end_pt
                del kept[v.id]
                connectors.append(Segment(f"{v.id}.E", "connector", new_node, v.outlet, (end_pt,), None, "entrance"))
                new_outs.append(replace(o, node=new_node, path=o.path + v.path[1:], absorbed=v.path))
                notes.append(f"{v.id} absorbed into {j.id} (length {tree.path_length(v.path):.4g} < L_e {target:.4g})")
            else:
                absorbed = v.path[: snap + 1]
                remaining = v.path[snap:]
                new_node = str(remaining[0])
                nodes[new_node] = remaining[0]
                kept[v.id] = replace(v, inlet=new_node, path=remaining)
                new_outs.append(replace(o, node=new_node, path=o.path + absorbed[1:], absorbed=absorbed))
        junctions.append(replace(j, outlets=tuple(new_outs)))
    vessel_list = tuple(kept[v.id] for v in disc.vessels if v.id in kept)
    used = {disc.root}
    for v in vessel_list:
        used.update((v.inlet, v.outlet))
    for j in junctions:
        used.add(j.inlet)
        used.update(o.node for o in j.outlets)
    for c in connectors:
        used.update((c.inlet, c.outlet))
    nodes = {k: p for k, p in nodes.items() if k in used}
    return replace(disc, nodes=nodes, vessels=vessel_list, junctions=tuple(junctions),
                   connectors=tuple(connectors), notes=tuple(notes))


def hybrid_discretization(tree, entrance_length_factor=10.0):
    """Discretize, split multi-outlet junctions, then apply the entrance-length shift."""
    return entrance_length_adjust(split_multi_outlet_junctions(discretize(tree)), entrance_length_factor)
