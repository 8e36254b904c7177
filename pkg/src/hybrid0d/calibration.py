"""Levenberg-Marquardt fit of element parameters to an observed time series.

The objective is the element pressure-drop equation evaluated at observed
states: for every element with free parameters and every time sample,

    r = R_lin*Q + R_quad*Q|Q| + L*dQ/dt - (P_in - P_out)

which is linear in the parameters. Capacitance never enters.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .circuit import PARAM_NAMES, ElementParameters, check_flavor
from .errors import CalibrationError, InsufficientDataError, ValidationError


@dataclass(frozen=True)
class ReferenceSeries:
    time: np.ndarray
    node_ids: tuple
    element_ids: tuple
    pressure: np.ndarray  # (n_nodes, n_t)
    dpdt: np.ndarray
    flow: np.ndarray  # (n_elements, n_t)
    dqdt: np.ndarray
    cycle_period: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "_nidx", {n: i for i, n in enumerate(self.node_ids)})
        object.__setattr__(self, "_eidx", {e: i for i, e in enumerate(self.element_ids)})

    def P(self, node):
        return self.pressure[self._nidx[node]]

    def Q(self, element):
        return self.flow[self._eidx[element]]

    def dPdt(self, node):
        return self.dpdt[self._nidx[node]]

    def dQdt(self, element):
        return self.dqdt[self._eidx[element]]

    def has_node(self, node):
        return node in self._nidx

    def has_element(self, element):
        return element in self._eidx


def central_difference(values, dt, periodic=False, closed=False):
    """Time derivative along the last axis.

    ``periodic`` wraps the stencil around the samples; ``closed`` marks a
    periodic series whose last sample repeats the first. Otherwise the end
    points use second-order one-sided differences.
    """
    v = np.asarray(values, dtype=float)
    if not periodic:
        return np.gradient(v, dt, axis=-1, edge_order=2)
    core = v[..., :-1] if closed else v
    d = (np.roll(core, -1, axis=-1) - np.roll(core, 1, axis=-1)) / (2.0 * dt)
    if closed:
        d = np.concatenate([d, d[..., :1]], axis=-1)
    return d


def project_reference(time, pressure, flow, cycle_period=None, rtol=1e-6):
    """Finalize sampled node pressures and element flows into a reference.

    ``pressure`` and ``flow`` map ids to series on the common grid ``time``.
    Derivatives come from central differences; when ``cycle_period`` is
    given and the grid spans exactly one cycle the stencil wraps around.
    """
    t = np.asarray(time, dtype=float)
    if t.ndim != 1 or len(t) < 3:
        raise InsufficientDataError("a reference needs at least 3 samples")
    steps = np.diff(t)
    dt = float(steps.mean())
    if not np.allclose(steps, dt, rtol=rtol, atol=0.0) or dt <= 0:
        raise ValidationError("reference time grid is not uniform")
    node_ids = tuple(pressure)
    element_ids = tuple(flow)
    P = np.array([np.asarray(pressure[n], dtype=float) for n in node_ids]).reshape(len(node_ids), -1) \
        if node_ids else np.zeros((0, len(t)))
    Q = np.array([np.asarray(flow[e], dtype=float) for e in element_ids]).reshape(len(element_ids), -1) \
        if element_ids else np.zeros((0, len(t)))
    for arr in (P, Q):
        if arr.size and arr.shape[1] != len(t):
            raise ValidationError("series length does not match the time grid")
    periodic = closed = False
    if cycle_period is not None:
        span = t[-1] - t[0]
        if abs(span - cycle_period) <= 1e-6 * cycle_period:
            periodic = closed = True
        elif abs(span + dt - cycle_period) <= 1e-6 * cycle_period:
            periodic = True
    return ReferenceSeries(
        time=t, node_ids=node_ids, element_ids=element_ids,
        pressure=P, dpdt=central_difference(P, dt, periodic, closed),
        flow=Q, dqdt=central_difference(Q, dt, periodic, closed),
        cycle_period=cycle_period,
    )


def reference_from_solution(sol, cycle_period=None):
    period = cycle_period if cycle_period is not None else sol.cycle_period
    return project_reference(
        sol.time,
        {n: sol.pressure[i] for i, n in enumerate(sol.node_ids)},
        {e: sol.flow[i] for i, e in enumerate(sol.element_ids)},
        period,
    )


def area_average(samples):
    """Weighted mean of (value, weight) pairs.

    For pressure pass (p_i, a_i). For a flux, summing the velocity
    component normal to the slice times area is ``area_flux``.
    """
    vals = np.array([s[0] for s in samples], dtype=float)
    w = np.array([s[1] for s in samples], dtype=float)
    total = w.sum()
    if not total > 0:
        raise ValidationError("area weights must have positive total")
    return float(np.dot(vals, w) / total)


def area_flux(samples):
    """Sum of (normal velocity, area) products over a slice."""
    vals = np.array([s[0] for s in samples], dtype=float)
    w = np.array([s[1] for s in samples], dtype=float)
    if not w.sum() > 0:
        raise ValidationError("area weights must have positive total")
    return float(np.dot(vals, w))


# Problem definition ------------------------------------------------------------


@dataclass(frozen=True)
class LMSettings:
    damping: float = 1e-3
    up: float = 10.0
    down: float = 10.0
    max_iterations: int = 100
    residual_tol: float = 1e-10
    step_tol: float = 1e-10
    max_damping: float = 1e16


@dataclass(frozen=True)
class CalibrationProblem:
    """Topology, fixed values and the free-parameter index map.

    ``free`` lists (element id, parameter name) pairs in column order.
    ``fixed`` holds the value used for every element parameter, including
    frozen ones.
    """

    element_ids: tuple
    inlets: tuple
    outlets: tuple
    fixed: dict  # element id -> ElementParameters
    free: tuple
    flavor: str = "rri"
    settings: LMSettings = field(default_factory=LMSettings)

    @classmethod
    def from_network(cls, net, flavor="rri", settings=None):
        """Free parameters: every unfrozen R_lin/R_quad/L of non-connector
        elements; R_quad is excluded (and zeroed) for the RI flavor."""
        flavor = check_flavor(flavor)
        ids, ins, outs, fixed, free = [], [], [], {}, []
        for e in net.elements:
            p = e.params
            if e.kind == "connector":
                p = ElementParameters.zero_frozen(p.C)
            elif flavor == "ri":
                p = p.with_values(R_quad=0.0, frozen=p.frozen | {"R_quad"})
            fixed[e.id] = p
            names = [n for n in PARAM_NAMES if n not in p.frozen]
            if not names:
                continue
            ids.append(e.id)
            ins.append(e.inlet)
            outs.append(e.outlet)
            free.extend((e.id, n) for n in names)
        return cls(tuple(ids), tuple(ins), tuple(outs), fixed, tuple(free), flavor, settings or LMSettings())

    def vector(self, params):
        return np.array([getattr(params[eid], name) for eid, name in self.free], dtype=float)

    def parameters(self, theta):
        """Full parameter map with the free entries replaced by ``theta``."""
        vals = {eid: dict(zip(PARAM_NAMES, p.values())) for eid, p in self.fixed.items()}
        for (eid, name), v in zip(self.free, theta):
            vals[eid][name] = float(v)
        return {eid: self.fixed[eid].with_values(**v) for eid, v in vals.items()}


@dataclass
class _Data:
    """Observed per-element series stacked in problem order."""

    basis: np.ndarray  # (3, m, n_t): Q, Q|Q|, dQ/dt
    drop: np.ndarray  # (m, n_t)


def _observed(problem, ref):
    missing = [e for e in problem.element_ids if not ref.has_element(e)]
    missing += [n for n in set(problem.inlets + problem.outlets) if not ref.has_node(n)]
    if missing:
        raise ValidationError(f"reference lacks series for {sorted(missing)[:10]}")
    Q = np.array([ref.Q(e) for e in problem.element_ids]).reshape(len(problem.element_ids), -1)
    dQ = np.array([ref.dQdt(e) for e in problem.element_ids]).reshape(Q.shape)
    drop = np.array([ref.P(a) - ref.P(b) for a, b in zip(problem.inlets, problem.outlets)]).reshape(Q.shape)
    return _Data(np.stack([Q, Q * np.abs(Q), dQ]), drop)


def _coefficients(problem, theta):
    full = problem.parameters(theta)
    return np.array([full[e].values() for e in problem.element_ids]).reshape(-1, 3)


def _jacobian(problem, data):
    m, nt = data.drop.shape
    row_of = {e: i for i, e in enumerate(problem.element_ids)}
    rows, cols, vals = [], [], []
    for j, (eid, name) in enumerate(problem.free):
        i = row_of[eid]
        rows.append(i * nt + np.arange(nt))
        cols.append(np.full(nt, j))
        vals.append(data.basis[PARAM_NAMES.index(name), i])
    if not rows:
        return sp.csr_matrix((m * nt, 0))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(m * nt, len(problem.free)))


def _residual(problem, data, theta):
    coef = _coefficients(problem, theta)
    model = np.einsum("km,kmt->mt", coef.T, data.basis)
    return (model - data.drop).ravel()


def assemble_fit_residual(problem, reference, params):
    """Residual vector and sparse Jacobian with respect to the free parameters.

    ``params`` is a full element-id -> ElementParameters map or a vector of
    free values in ``problem.free`` order.
    """
    theta = np.asarray(params, dtype=float) if not isinstance(params, dict) else problem.vector(params)
    data = _observed(problem, reference)
    return _residual(problem, data, theta), _jacobian(problem, data)


@dataclass(frozen=True)
class CalibrationResult:
    params: dict
    residual_norm: float
    initial_residual_norm: float
    trace: tuple  # (iteration, residual norm, damping, accepted)
    status: str
    iterations: int
    free: tuple = ()

    def to_dict(self):
        return {
            "status": self.status,
            "iterations": self.iterations,
            "residual_norm": self.residual_norm,
            "initial_residual_norm": self.initial_residual_norm,
            "params": {eid: p.to_dict() for eid, p in sorted(self.params.items())},
            "free": [list(f) for f in self.free],
            "trace": [{"iteration": i, "residual_norm": r, "damping": lam, "accepted": acc}
                      for i, r, lam, acc in self.trace],
        }


def calibrate(problem, reference, init=None):
    """Levenberg-Marquardt on the free parameters.

    Steps solve (A + damping*diag(A)) d = -g with A = J'J and g = J'r.
    Accepted steps shrink the damping, rejected ones grow it. Stops when
    the residual norm falls below ``residual_tol`` relative to the norm of
    the observed pressure drops, when a step is below ``step_tol`` relative
    to the parameter norm, or after ``max_iterations``.
    """
    s = problem.settings
    data = _observed(problem, reference)
    theta = problem.vector(init) if init is not None else problem.vector(problem.fixed)
    if not np.all(np.isfinite(theta)):
        raise CalibrationError("initial parameters are not finite")
    J = _jacobian(problem, data)
    A = (J.T @ J).toarray()
    diag = np.diag(A).copy()
    scale = np.sqrt(np.where(diag > 0, diag, 1.0))
    As = A / np.outer(scale, scale)

    r = _residual(problem, data, theta)
    norm = float(np.linalg.norm(r))
    if not math.isfinite(norm):
        raise CalibrationError("residual at the initial parameters is not finite")
    r0 = norm
    target = s.residual_tol * max(float(np.linalg.norm(data.drop)), 1e-300)
    lam = s.damping
    trace = [(0, norm, lam, True)]
    status = "max-iterations"
    it = 0
    if not problem.free:
        status = "converged-step"
    elif norm <= target:
        status = "converged-residual"
    else:
        while it < s.max_iterations:
            it += 1
            g = (J.T @ r) / scale
            M = As + lam * np.diag(np.diag(As))
            try:
                step = -np.linalg.solve(M, g) / scale
            except np.linalg.LinAlgError:
                step = -np.linalg.lstsq(M, g, rcond=None)[0] / scale
            trial = theta + step
            r_new = _residual(problem, data, trial)
            new_norm = float(np.linalg.norm(r_new))
            small = np.linalg.norm(step) <= s.step_tol * (np.linalg.norm(theta) + s.step_tol)
            if math.isfinite(new_norm) and new_norm < norm:
                theta, r, norm = trial, r_new, new_norm
                lam = max(lam / s.down, 1e-300)
                trace.append((it, norm, lam, True))
                if norm <= target:
                    status = "converged-residual"
                    break
                if small:
                    status = "converged-step"
                    break
            else:
                lam *= s.up
                trace.append((it, norm, lam, False))
                if small:
                    status = "converged-step"
                    break
                if lam > s.max_damping:
                    status = "stagnation"
                    break
    return CalibrationResult(
        params=problem.parameters(theta),
        residual_norm=norm,
        initial_residual_norm=r0,
        trace=tuple(trace),
        status=status,
        iterations=it,
        free=problem.free,
    )


def write_calibration_report(result, path):
    Path(path).write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1))


def load_calibrated_parameters(path):
    data = json.loads(Path(path).read_text())
    return {eid: ElementParameters.from_dict(p) for eid, p in data["params"].items()}
