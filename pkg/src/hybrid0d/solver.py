"""Implicit backward-difference time integration of a lumped-parameter network.

The default scheme is backward Euler; ``order=2`` selects the two-step
backward-difference formula (started with one Euler step).

Unknowns are stacked as ``[P per node, Q per element, Pc per RCR outlet]``.
Residual rows follow the same layout shifted by equation type:
one pressure-drop row per element, one row per node (mass conservation,
prescribed inflow, or outlet relation) and one Windkessel row per RCR
outlet. The system is sparse; the factorization is reused between steps
while Newton contracts fast enough.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .circuit import FlowBC, RCRBC, ResistanceBC, check_flavor, require_valid
from .errors import InsufficientDataError, SingularJacobianError, SolverDivergenceError, ValidationError


@dataclass(frozen=True)
class SimulationConfig:
    steps_per_cycle: int = 1000
    cycles: int = 10
    cycle_tol: float = 1e-4
    newton_tol: float = 1e-9
    max_newton: int = 30
    flavor: str = "rri"
    # run all cycles even if converged earlier
    fixed_cycles: bool = False
    order: int = 1


    def __post_init__(self):
        if self.steps_per_cycle < 16:
            raise ValueError("steps_per_cycle must be at least 16")
        if self.cycles < 1:
            raise ValueError("need at least one cycle")
        if not (self.cycle_tol > 0 and self.newton_tol > 0):
            raise ValueError("tolerances must be positive")
        object.__setattr__(self, "flavor", check_flavor(self.flavor))
        if self.order not in (1, 2):
            raise ValueError("order must be 1 or 2")


@dataclass(frozen=True)
class TimeSeriesSolution:
    time: np.ndarray
    node_ids: tuple
    element_ids: tuple
    pressure: np.ndarray  # (n_nodes, n_t)
    flow: np.ndarray  # (n_elements, n_t)
    dpdt: np.ndarray | None = None
    dqdt: np.ndarray | None = None
    cycle_period: float | None = None
    steps_per_cycle: int | None = None
    cycles_run: int | None = None
    converged: bool | None = None
    _node_index: dict = field(default=None, repr=False, compare=False)
    _element_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "element_ids", tuple(self.element_ids))
        object.__setattr__(self, "_node_index", {n: i for i, n in enumerate(self.node_ids)})
        object.__setattr__(self, "_element_index", {e: i for i, e in enumerate(self.element_ids)})
        nt = len(self.time)
        if self.pressure.shape != (len(self.node_ids), nt) or self.flow.shape != (len(self.element_ids), nt):
            raise ValidationError("series shapes do not match the time grid")

    def P(self, node):
        return self.pressure[self._node_index[node]]

    def Q(self, element):
        return self.flow[self._element_index[element]]

    def dPdt(self, node):
        return self.dpdt[self._node_index[node]]

    def dQdt(self, element):
        return self.dqdt[self._element_index[element]]

    def has_node(self, node):
        return node in self._node_index

    def has_element(self, element):
        return element in self._element_index

    def slice(self, start, stop=None):
        s = np.s_[start:stop]
        return replace(
            self,
            time=self.time[s],
            pressure=self.pressure[:, s],
            flow=self.flow[:, s],
            dpdt=None if self.dpdt is None else self.dpdt[:, s],
            dqdt=None if self.dqdt is None else self.dqdt[:, s],
        )

    def last_cycle(self):
        """Final cycle including both endpoints (steps_per_cycle + 1 samples)."""
        n = self.steps_per_cycle or _infer_steps(self.time, self.cycle_period)
        if len(self.time) <= n:
            return self
        return self.slice(len(self.time) - n - 1)


def _infer_steps(time, period):
    if period is None:
        raise InsufficientDataError("cycle period unknown")
    dt = time[1] - time[0]
    return int(round(period / dt))


class _Assembler:
    """Precomputed sparse structure for one network and time step."""

    def __init__(self, net, dt, flavor, order=1):
        self.net = net
        self.dt = float(dt)
        self.order = order
        # leading coefficient of the backward-difference derivative
        self.lead = 1.0 if order == 1 else 1.5
        self.flavor = check_flavor(flavor)
        nn, ne = len(net.nodes), len(net.elements)
        nidx = net.node_index
        rcr_nodes = [n for n in net.nodes if isinstance(net.boundary_conditions.get(n), RCRBC)]
        self.rcr_nodes = rcr_nodes
        nr = len(rcr_nodes)
        self.nn, self.ne, self.nr = nn, ne, nr
        self.size = nn + ne + nr
        qo = nn  # offset of flows
        co = nn + ne  # offset of capacitor pressures

        self.e_in = np.array([nidx[e.inlet] for e in net.elements], dtype=int)
        self.e_out = np.array([nidx[e.outlet] for e in net.elements], dtype=int)
        self.r_lin = np.array([e.params.R_lin for e in net.elements], dtype=float)
        self.ind = np.array([e.params.L for e in net.elements], dtype=float)
        r_quad = np.array([e.params.R_quad for e in net.elements], dtype=float)
        self.r_quad = r_quad if self.flavor == "rri" else np.zeros(ne)
        self.nonlinear = bool(np.any(self.r_quad != 0.0))

        rows, cols, vals = [], [], []

        def add(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        dt = self.dt / self.lead
        for k in range(ne):
            add(k, self.e_in[k], 1.0)
            add(k, self.e_out[k], -1.0)
            add(k, qo + k, -(self.r_lin[k] + self.ind[k] / dt))

        eidx = net.element_index
        self.inflow_row = None
        self.inflow_bc = None
        res_rows, res_pd = [], []
        rcr_rows, rcr_pd, rcr_coef = [], [], []
        for i, n in enumerate(net.nodes):
            row = ne + i
            bc = net.boundary_conditions.get(n)
            incoming = [eidx[e] for e in net.incoming.get(n, ())]
            outgoing = [eidx[e] for e in net.outgoing.get(n, ())]
            if isinstance(bc, FlowBC):
                for k in outgoing:
                    add(row, qo + k, 1.0)
                self.inflow_row = row
                self.inflow_bc = bc
            elif isinstance(bc, ResistanceBC):
                (k,) = incoming
                add(row, i, 1.0)
                add(row, qo + k, -bc.R)
                res_rows.append(row)
                res_pd.append(bc.Pd)
            elif isinstance(bc, RCRBC):
                (k,) = incoming
                j = rcr_nodes.index(n)
                add(row, i, 1.0)
                add(row, co + j, -1.0)
                add(row, qo + k, -bc.Rp)
                # Pc - Pd - Rd*(Q - C*dPc/dt) = 0
                rrow = ne + nn + j
                add(rrow, qo + k, -bc.Rd)
                add(rrow, co + j, 1.0 + bc.Rd * bc.C / dt)
                rcr_rows.append(rrow)
                rcr_pd.append(bc.Pd)
                rcr_coef.append(bc.Rd * bc.C / dt)
            else:
                for k in incoming:
                    add(row, qo + k, 1.0)
                for k in outgoing:
                    add(row, qo + k, -1.0)
        self.res_rows = np.array(res_rows, dtype=int)
        self.res_pd = np.array(res_pd, dtype=float)
        self.rcr_rows = np.array(rcr_rows, dtype=int)
        self.rcr_pd = np.array(rcr_pd, dtype=float)
        self.rcr_coef = np.array(rcr_coef, dtype=float)
        self.K = sp.csc_matrix((vals, (rows, cols)), shape=(self.size, self.size))
        self._elem_rows = np.arange(ne)
        self._ind_dt = self.ind / self.dt
        self.rcr_rc_dt = self.rcr_coef / self.lead
        self._c_base = np.zeros(self.size)
        if len(self.res_rows):
            self._c_base[self.res_rows] = -self.res_pd
        if self.nr:
            self._c_base[self.rcr_rows] = -self.rcr_pd
        self._q_cols = qo + np.arange(ne)

    def constant(self, x_prev, t, inflow=None, x_prev2=None):
        """State-independent part of the residual at time ``t``."""
        c = self._c_base.copy()
        ne, nn = self.ne, self.nn
        hist = x_prev if self.order == 1 else 2.0 * x_prev - 0.5 * x_prev2
        c[:ne] = self._ind_dt * hist[nn:nn + ne]
        if self.inflow_row is not None:
            c[self.inflow_row] = -(float(self.inflow_bc(t)) if inflow is None else inflow)
        if self.nr:
            c[self.rcr_rows] -= self.rcr_rc_dt * hist[nn + ne:]
        return c

    def residual(self, x, c):
        r = self.K @ x + c
        if self.nonlinear:
            q = x[self.nn:self.nn + self.ne]
            r[:self.ne] -= self.r_quad * q * np.abs(q)
        return r

    def jacobian(self, x):
        if not self.nonlinear:
            return self.K
        q = x[self.nn:self.nn + self.ne]
        d = -2.0 * self.r_quad * np.abs(q)
        extra = sp.csc_matrix((d, (self._elem_rows, self._q_cols)), shape=(self.size, self.size))
        return (self.K + extra).tocsc()

    def initial_state(self):
        x = np.zeros(self.size)
        pd = 0.0
        for n in self.net.outlet_nodes:
            pd = self.net.boundary_conditions[n].Pd
            break
        x[:self.nn] = pd
        x[self.nn + self.ne:] = pd
        return x


def residual_and_jacobian(net, state, prev_state, dt, t, flavor="rri"):
    """Residual vector and dense Jacobian of the discretized network equations."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    asm = _Assembler(net, dt, flavor)
    state = np.asarray(state, dtype=float)
    prev_state = np.asarray(prev_state, dtype=float)
    if state.shape != (asm.size,) or prev_state.shape != (asm.size,):
        raise ValueError(f"state must have {asm.size} entries (nodes + elements + RCR outlets)")
    c = asm.constant(prev_state, t)
    return asm.residual(state, c), asm.jacobian(state).toarray()


def state_size(net):
    nr = sum(isinstance(bc, RCRBC) for bc in net.boundary_conditions.values())
    return len(net.nodes) + len(net.elements) + nr


def _factor(J, step, t):
    try:
        return splu(J.tocsc())
    except RuntimeError as exc:  # "Factor is exactly singular"
        raise SingularJacobianError(step, t) from exc


def simulate(net, cfg=None):
    """Run the network forward until the cycle-to-cycle change drops below
    ``cfg.cycle_tol`` or ``cfg.cycles`` cycles have elapsed.

    Returns the full history; use ``.last_cycle()`` for the final cycle.
    """
    cfg = cfg or SimulationConfig()
    require_valid(net)
    period = float(net.cycle_period)
    n = cfg.steps_per_cycle
    dt = period / n
    asm = _Assembler(net, dt, cfg.flavor)
    nn, ne = asm.nn, asm.ne
    first = asm
    if cfg.order == 2:
        first, asm = asm, _Assembler(net, dt, cfg.flavor, order=2)

    total = cfg.cycles * n
    hist = np.empty((total + 1, asm.size))
    x = asm.initial_state()
    hist[0] = x
    lu = _factor(first.jacobian(x), 0, 0.0)
    converged = False
    cycles_run = 0

    times = np.arange(total + 1) * dt
    inflow = asm.inflow_bc(times) if asm.inflow_bc is not None else np.zeros(total + 1)
    tol = cfg.newton_tol

    for step in range(1, total + 1):
        t = times[step]
        x_prev = hist[step - 1]
        if step == 2 and first is not asm:
            lu = _factor(asm.jacobian(x_prev), step, t)
        cur = first if step == 1 else asm
        c = cur.constant(x_prev, t, inflow[step], hist[step - 2] if step >= 2 else None)
        if not cur.nonlinear:
            # linear system: one solve is exact up to round-off
            x = -lu.solve(c)
        elif step >= 2:
            x = 2.0 * x_prev - hist[step - 2]
        else:
            x = x_prev.copy()
        r = cur.residual(x, c)
        norm = np.abs(r).max()
        scale = 1.0 + np.abs(x).max()
        it = 0
        while norm > tol * scale:
            if it >= cfg.max_newton or not math.isfinite(norm):
                raise SolverDivergenceError(step, t, norm)
            x = x - lu.solve(r)
            it += 1
            r_new = cur.residual(x, c)
            new_norm = np.abs(r_new).max()
            scale = 1.0 + np.abs(x).max()
            if cur.nonlinear and new_norm > 0.25 * norm and new_norm > tol * scale:
                # chord step contracted poorly: refactor at the current iterate
                lu = _factor(cur.jacobian(x), step, t)
            r, norm = r_new, new_norm
        hist[step] = x

        if step % n == 0:
            cycles_run = step // n
            if cycles_run >= 2 and not cfg.fixed_cycles:
                p = hist[: step + 1, :nn].T
                if _relative_cycle_change(p, n) < cfg.cycle_tol:
                    converged = True
                    hist = hist[: step + 1]
                    break

    time = times[: hist.shape[0]]
    pressure = np.ascontiguousarray(hist[:, :nn].T)
    flow = np.ascontiguousarray(hist[:, nn:nn + ne].T)
    dpdt = np.zeros_like(pressure)
    dqdt = np.zeros_like(flow)
    dpdt[:, 1:] = np.diff(pressure, axis=1) / dt
    dqdt[:, 1:] = np.diff(flow, axis=1) / dt
    if cycles_run >= 2 and not converged:
        converged = _relative_cycle_change(pressure, n) < cfg.cycle_tol
    return TimeSeriesSolution(
        time=time,
        node_ids=net.nodes,
        element_ids=tuple(e.id for e in net.elements),
        pressure=pressure,
        flow=flow,
        dpdt=dpdt,
        dqdt=dqdt,
        cycle_period=period,
        steps_per_cycle=n,
        cycles_run=cycles_run,
        converged=converged,
    )


def _relative_cycle_change(pressure, n):
    last = pressure[:, -(n + 1):]
    prev = pressure[:, -(2 * n + 1):-n]
    denom = np.maximum(np.max(np.abs(last), axis=1), np.finfo(float).tiny)
    return float(np.max(np.max(np.abs(last - prev), axis=1) / denom))


def cycle_convergence(sol, period=None):
    """Largest relative L-infinity change of node pressure between the last
    two complete cycles."""
    period = period if period is not None else sol.cycle_period
    if period is None or len(sol.time) < 2:
        raise InsufficientDataError("need a cycle period and at least two samples")
    dt = sol.time[1] - sol.time[0]
    n = int(round(period / dt))
    if len(sol.time) < 2 * n + 1:
        raise InsufficientDataError(
            f"need at least two full cycles ({2 * n + 1} samples), have {len(sol.time)}"
        )
    return _relative_cycle_change(sol.pressure, n)


# CSV interchange ----------------------------------------------------------------

CSV_HEADER = ("time", "entity_kind", "entity_id", "quantity", "value")


def write_solution_csv(sol, path, last_cycle_only=False):
    if last_cycle_only:
        sol = sol.last_cycle()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for k, t in enumerate(sol.time):
        ts = repr(float(t))
        for i, n in enumerate(sol.node_ids):
            w.writerow((ts, "node", n, "P", repr(float(sol.pressure[i, k]))))
        for i, e in enumerate(sol.element_ids):
            w.writerow((ts, "element", e, "Q", repr(float(sol.flow[i, k]))))
    Path(path).write_text(buf.getvalue())


def read_solution_csv(path, cycle_period=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValidationError(f"unexpected CSV header {header}")
        times, pvals, qvals = {}, {}, {}
        node_order, elem_order = {}, {}
        for row in reader:
            if not row:
                continue
            t, kind, eid, qty, val = row
            tf = float(t)
            ti = times.setdefault(tf, len(times))
            if kind == "node" and qty == "P":
                node_order.setdefault(eid, len(node_order))
                pvals[(eid, ti)] = float(val)
            elif kind == "element" and qty == "Q":
                elem_order.setdefault(eid, len(elem_order))
                qvals[(eid, ti)] = float(val)
            else:
                raise ValidationError(f"unknown CSV row kind/quantity {kind}/{qty}")
    time = np.array(sorted(times, key=times.get))
    nt = len(time)
    nodes = list(node_order)
    elems = list(elem_order)
    try:
        pressure = np.array([[pvals[(n, k)] for k in range(nt)] for n in nodes]).reshape(len(nodes), nt)
        flow = np.array([[qvals[(e, k)] for k in range(nt)] for e in elems]).reshape(len(elems), nt)
    except KeyError as exc:
        raise ValidationError(f"incomplete series in {path}: missing {exc}") from exc
    steps = None
    if cycle_period is not None and nt > 1:
        steps = int(round(cycle_period / (time[1] - time[0])))
    return TimeSeriesSolution(time, nodes, elems, pressure, flow,
                              cycle_period=cycle_period, steps_per_cycle=steps)


def steady_state(net, flavor="ri", inflow=None, max_newton=50, tol=1e-12):
    """Time-independent solution under a constant inflow.

    ``inflow`` defaults to the cycle mean of the prescribed waveform. For a
    linear (RI) network this equals the cycle-averaged periodic solution.
    Returns (node pressures, element flows) as dicts.
    """
    require_valid(net)
    asm = _Assembler(net, math.inf, flavor)
    if inflow is None:
        bc = asm.inflow_bc
        inflow = float(np.trapezoid(bc.flows, bc.times) / bc.period)
    x = np.zeros(asm.size)
    c = asm.constant(x, 0.0, inflow)
    for it in range(max_newton + 1):
        r = asm.residual(x, c)
        norm = np.abs(r).max()
        if norm <= tol * (1.0 + np.abs(x).max()):
            break
        if it == max_newton or not math.isfinite(norm):
            raise SolverDivergenceError(0, 0.0, norm, "steady-state Newton iteration did not converge")
        x = x - _factor(asm.jacobian(x), 0, 0.0).solve(r)
    nn, ne = asm.nn, asm.ne
    pressure = dict(zip(net.nodes, x[:nn].tolist()))
    flow = {e.id: float(q) for e, q in zip(net.elements, x[nn:nn + ne])}
    return pressure, flow
