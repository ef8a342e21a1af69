# src/diagnostics.py
"""Energies, dissipation rates, inequality residuals, error norms and the per-run ledger.

Nothing here imports the schemes: states and parameters are read by attribute
(``u``, ``v``, ``sigma``, ``t``, ``n`` and ``chi``, ``mu``, ``eps``, ``dt``, ``solver.c_tol``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from utils.errors import NonNestedMeshError
from utils.mesh_fe import (CellField, NodalField, at_gauss_points, cell_l2_norm, gauss_points, gradient,
                           l2_norm, lumped_inner, lumped_norm, restrict, transfer)
from utils.potentials import f_eps, f_eps_prime, g_eps, g_eps_prime, lambda_eps, pos_part

logger = logging.getLogger(__name__)

ENERGY_FLOOR = 1e-12
MASS_RTOL = 1e-10

LEDGER_COLUMNS = [
    't', 'mass', 'min_u', 'min_v', 'max_v', 'E_uv', 'E_usigma', 'D1', 'D2', 'D3',
    'energy_residual', 'picard_iters', 'dt_condition_ok',
    'mass_v', 'g_functional', 'neg_part_l2', 'picard_residual', 'converged', 'energy_floor_hits',
]


# ---------------------------------------------------------------------------
# ledger types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FailureInfo:
    step: int
    t: float
    kind: str
    message: str
    wall_time: float


@dataclass(frozen=True)
class StepRecord:
    t: float
    mass: float
    min_u: float
    min_v: float
    max_v: float
    E_uv: float
    E_usigma: float = math.nan
    D1: float = math.nan
    D2: float = math.nan
    D3: float = math.nan
    energy_residual: float = math.nan
    picard_iters: int = 0
    dt_condition_ok: bool = True
    mass_v: float = math.nan
    g_functional: float = math.nan
    neg_part_l2: float = math.nan
    picard_residual: float = 0.0
    converged: bool = True
    energy_floor_hits: int = 0


@dataclass
class RunLedger:
    scheme_id: str
    records: list[StepRecord] = field(default_factory=list)
    weak_estimate_lhs: float = 0.0
    weak_estimate_rhs: float = math.nan
    failure: Optional[FailureInfo] = None
    counters: dict = field(default_factory=lambda: {
        'max_principle_violations': 0,
        'dt_condition_violations': 0,
        'v_floor_activations': 0,
        'energy_floor_activations': 0,
        'picard_caps_carried': 0,
        'energy_inequality_violations': 0,
    })
    wall_time: float = 0.0

    @property
    def global_min_u(self) -> float:
        return min((r.min_u for r in self.records), default=math.nan)

    @property
    def completed_steps(self) -> int:
        return max(len(self.records) - 1, 0)

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def weak_estimate_holds(self) -> bool:
        return self.weak_estimate_lhs <= self.weak_estimate_rhs

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=LEDGER_COLUMNS)

    def summary(self) -> dict:
        out = {
            'scheme': self.scheme_id,
            'completed_steps': self.completed_steps,
            'global_min_u': self.global_min_u,
            'weak_estimate_lhs': self.weak_estimate_lhs,
            'weak_estimate_rhs': self.weak_estimate_rhs,
            'weak_estimate_holds': self.weak_estimate_holds,
            'energy_floor': ENERGY_FLOOR,
            'wall_time_s': self.wall_time,
            'status': 'ok' if self.ok else 'failed',
        }
        out.update(self.counters)
        if self.failure is not None:
            out.update({f'failure_{k}': v for k, v in asdict(self.failure).items()})
        return out


@dataclass(frozen=True)
class EocRow:
    h: float
    e_u: float
    r_u: float
    e_v: float
    r_v: float
    e_vx: float
    r_vx: float


@dataclass
class EocTable:
    """Errors against a reference and the rates between consecutive rungs."""

    scheme_id: str
    rows: list[EocRow] = field(default_factory=list)

    def add_rung(self, h: float, e_u: float, e_v: float, e_vx: float) -> EocRow:
        if self.rows:
            prev = self.rows[-1]
            rates = [convergence_rate(e, e_prev, h, prev.h)
                     for e, e_prev in ((e_u, prev.e_u), (e_v, prev.e_v), (e_vx, prev.e_vx))]
        else:
            rates = [math.nan] * 3
        row = EocRow(h, e_u, rates[0], e_v, rates[1], e_vx, rates[2])
        self.rows.append(row)
        return row

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=['h', 'e_u', 'r_u', 'e_v', 'r_v', 'e_vx', 'r_vx'])


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def _integral(f: NodalField) -> float:
    return float(np.dot(f.mesh.lumped_weights, f.values))


def energy_floor_hits(u: NodalField, floor: float = ENERGY_FLOOR) -> int:
    return int(np.count_nonzero(u.values < floor))


def energy_uv(u: NodalField, v: NodalField, params, floor: float = ENERGY_FLOOR) -> float:
    """(mu/4) int I_h F(u) + (chi/2) ||grad I_h sqrt(v)||^2, with u floored at ``floor`` and v at 0."""
    s = np.maximum(u.values, floor)
    entropy = s * np.log(s) - s + 1.0
    grad_w = gradient(v.map(lambda x: np.sqrt(np.maximum(x, 0.0))))
    return 0.25 * params.mu * _integral(NodalField(u.mesh, entropy)) + 0.5 * params.chi * cell_l2_norm(grad_w) ** 2


def energy_usigma(u: NodalField, sigma: NodalField, params) -> float:
    """(mu/4) int I_h F_eps(u) + (chi/2) ||sigma||^2."""
    entropy = u.map(lambda x: f_eps(x, params.eps))
    return 0.25 * params.mu * _integral(entropy) + 0.5 * params.chi * l2_norm(sigma) ** 2


def g_functional(u: NodalField, eps: float) -> float:
    values = u.map(lambda x: g_eps(x, eps))
    if values.min() < 0.0:
        logger.warning("G_eps is negative at %d node(s) (min %.3e)",
                       int(np.count_nonzero(values.values < 0)), values.min())
    return _integral(values)


def neg_part_l2(u: NodalField) -> float:
    neg = u.map(lambda x: np.minimum(x, 0.0))
    return lumped_inner(neg, neg)


def dissipations(u_new: NodalField, v_old: NodalField, sigma_new: Optional[NodalField], params) -> tuple[float, float, float]:
    """(D1, D2, D3) of the (u, sigma) energy law; D2 and D3 are NaN without sigma.

    1/v enters through the nodal interpolant of 1/max(v, v_floor) and the element
    integrals use the same Gauss rule as the sigma step.
    """
    mesh = u_new.mesh
    du = np.diff(u_new.values)
    dfp = np.diff(f_eps_prime(u_new.values, params.eps))
    d1 = 0.25 * float(np.sum(du * dfp)) / mesh.h
    if sigma_new is None:
        return d1, math.nan, math.nan

    v_floor = getattr(getattr(params, 'solver', None), 'v_floor', 1e-300)
    _, weights, phi_left = gauss_points(mesh)
    s = at_gauss_points(sigma_new, phi_left)
    inv_v = at_gauss_points(1.0 / np.maximum(v_old.values, v_floor), phi_left)
    u_plus = pos_part(at_gauss_points(u_new, phi_left))
    w = weights[None, :]

    d2 = cell_l2_norm(gradient(sigma_new)) ** 2 + float((inv_v * s ** 4 * w).sum()) / 3.0
    d3 = 0.5 * float((u_plus * s ** 2 * w).sum())
    return d1, d2, d3


def tol_energy(energy: float, c_tol: float) -> float:
    return 10.0 * c_tol * (1.0 + abs(energy))


def _dt_between(prev, nxt, params, dt) -> float:
    if dt is not None:
        return dt
    step = nxt.t - prev.t
    return step if step > 0 else params.dt


def energy_residual_uvs(prev, nxt, params, dt: Optional[float] = None) -> float:
    """delta_t E(u, sigma) + mu D1 + chi D2 + mu chi D3 for one UVS step; <= tol_energy when the step is a solution."""
    dt = _dt_between(prev, nxt, params, dt)
    d1, d2, d3 = dissipations(nxt.u, prev.v, nxt.sigma, params)
    delta = (energy_usigma(nxt.u, nxt.sigma, params) - energy_usigma(prev.u, prev.sigma, params)) / dt
    return delta + params.mu * d1 + params.chi * d2 + params.mu * params.chi * d3


def _g_inequality(prev_u: NodalField, next_u: NodalField, v: NodalField, params, dt: float, dissipation: float) -> float:
    delta = (g_functional(next_u, params.eps) - g_functional(prev_u, params.eps)) / dt
    bound = 0.5 * params.chi ** 2 * cell_l2_norm(gradient(v)) ** 2
    return delta + 0.5 * dissipation - bound


def energy_residual_uvnd(prev_u: NodalField, next_u: NodalField, v: NodalField, params,
                         dt: Optional[float] = None) -> float:
    """LHS - RHS of the G_eps inequality for a UV-ND step.

    ``v`` is the chemical field the cell step used (v^n).
    """
    dt = params.dt if dt is None else dt
    u = next_u.values
    mid = 0.5 * (u[:-1] + u[1:])
    dg = gradient(next_u.map(lambda x: g_eps_prime(x, params.eps))).values
    dissipation = next_u.mesh.h * float(np.sum(mid ** 2 * dg ** 2))
    return _g_inequality(prev_u, next_u, v, params, dt, dissipation)


def energy_residual_uvns(prev_u: NodalField, next_u: NodalField, v: NodalField, params,
                         dt: Optional[float] = None) -> float:
    """LHS - RHS of the G_eps inequality for a UV-NS step, dissipation |Lambda_eps grad I_h G_eps'|^2."""
    dt = params.dt if dt is None else dt
    lam = lambda_eps(next_u, params.eps).values
    dg = gradient(next_u.map(lambda x: g_eps_prime(x, params.eps))).values
    dissipation = next_u.mesh.h * float(np.sum((lam * dg) ** 2))
    return _g_inequality(prev_u, next_u, v, params, dt, dissipation)


def weak_estimate_accumulate(ledger: RunLedger, v_new: NodalField, dt: float) -> RunLedger:
    ledger.weak_estimate_lhs += dt * cell_l2_norm(gradient(v_new)) ** 2
    return ledger


# ---------------------------------------------------------------------------
# errors and rates
# ---------------------------------------------------------------------------

def convergence_rate(e: float, e_prev: float, h: float, h_prev: float) -> float:
    if e <= 0 or e_prev <= 0:
        return math.nan
    return math.log(e / e_prev) / math.log(h / h_prev)


def error_and_rate(ref: NodalField, approx: NodalField, prev_error: Optional[float] = None,
                   h: Optional[float] = None, h_prev: Optional[float] = None,
                   derivative: bool = False, strict: bool = True) -> tuple[float, float]:
    """L2 error of ``approx`` against a fine reference and the rate to the previous rung.

    With ``derivative`` the error is that of the cell gradients. ``strict`` requires
    nested meshes; otherwise the reference is evaluated at the coarse nodes.
    """
    coarse = approx.mesh
    try:
        ref_coarse = restrict(ref, coarse) if strict else transfer(ref, coarse)
    except NonNestedMeshError:
        logger.error("reference with J=%d is not nested over J=%d", ref.mesh.J, coarse.J)
        raise
    if derivative:
        e = cell_l2_norm(CellField(coarse, gradient(ref_coarse).values - gradient(approx).values))
    else:
        e = l2_norm(ref_coarse - approx)
    h = coarse.h if h is None else h
    if prev_error is None or h_prev is None:
        return e, math.nan
    return e, convergence_rate(e, prev_error, h, h_prev)


# ---------------------------------------------------------------------------
# recorder
# ---------------------------------------------------------------------------

class DiagnosticsRecorder:
    """Observer that turns a sequence of steps into a ``RunLedger``."""

    def __init__(self, scheme_id: str, initial, params):
        self.scheme_id = scheme_id
        self.params = params
        self.initial_mass = _integral(initial.u)
        self.ledger = RunLedger(scheme_id)
        self.ledger.weak_estimate_rhs = lumped_norm(initial.v) ** 2
        self.ledger.records.append(self._record(initial))

    def _record(self, state, report=None, residual: float = math.nan, d=(math.nan,) * 3) -> StepRecord:
        u, v, sigma = state.u, state.v, state.sigma
        hits = energy_floor_hits(u)
        e_usigma = energy_usigma(u, sigma, self.params) if sigma is not None else math.nan
        extra = {}
        if report is not None:
            extra = dict(picard_iters=report.picard_iters, dt_condition_ok=report.dt_condition_ok,
                         picard_residual=report.picard_residual, converged=report.converged)
        return StepRecord(
            t=state.t, mass=_integral(u), min_u=u.min(), min_v=v.min(), max_v=v.max(),
            E_uv=energy_uv(u, v, self.params), E_usigma=e_usigma, D1=d[0], D2=d[1], D3=d[2],
            energy_residual=residual, mass_v=_integral(v), g_functional=g_functional(u, self.params.eps),
            neg_part_l2=neg_part_l2(u), energy_floor_hits=hits, **extra)

    def _residual(self, prev, nxt, dt: float) -> tuple[float, float]:
        """Energy-inequality residual of the step and its certification tolerance."""
        if self.scheme_id == 'uvs':
            residual = energy_residual_uvs(prev, nxt, self.params, dt)
            return residual, tol_energy(energy_usigma(nxt.u, nxt.sigma, self.params), self.params.solver.c_tol)
        if self.scheme_id == 'uv-nd':
            residual = energy_residual_uvnd(prev.u, nxt.u, prev.v, self.params, dt)
        elif self.scheme_id == 'uv-ns':
            residual = energy_residual_uvns(prev.u, nxt.u, prev.v, self.params, dt)
        else:
            return math.nan, math.nan
        return residual, tol_energy(g_functional(nxt.u, self.params.eps), self.params.solver.c_tol)

    def __call__(self, prev, nxt, report):
        dt = nxt.t - prev.t
        ledger = self.ledger
        d = dissipations(nxt.u, prev.v, nxt.sigma, self.params)
        if any(x < 0 for x in d if not math.isnan(x)):
            logger.warning("%s: negative dissipation %s at step %d", self.scheme_id, d, nxt.n)
        residual, tol = self._residual(prev, nxt, dt)
        if residual > tol:
            ledger.counters['energy_inequality_violations'] += 1
            logger.warning("%s: energy inequality residual %.3e above %.3e at step %d",
                           self.scheme_id, residual, tol, nxt.n)
        record = self._record(nxt, report, residual, d)
        ledger.records.append(record)
        weak_estimate_accumulate(ledger, nxt.v, dt)

        if not report.max_principle_ok:
            ledger.counters['max_principle_violations'] += 1
        if not report.dt_condition_ok:
            ledger.counters['dt_condition_violations'] += 1
        if report.carried_forward:
            ledger.counters['picard_caps_carried'] += 1
        ledger.counters['v_floor_activations'] += report.v_floor_activations
        if record.energy_floor_hits:
            ledger.counters['energy_floor_activations'] += 1
        drift = abs(record.mass - self.initial_mass) / max(abs(self.initial_mass), 1e-300)
        if drift > MASS_RTOL:
            logger.warning("%s: mass drift %.3e at step %d", self.scheme_id, drift, nxt.n)

    def fail(self, step: int, t: float, exc: Exception, wall_time: float):
        self.ledger.failure = FailureInfo(step, t, type(exc).__name__, str(exc), wall_time)

    def finish(self, state, wall_time: float) -> RunLedger:
        ledger = self.ledger
        ledger.wall_time = wall_time
        if ledger.counters['dt_condition_violations']:
            logger.warning("%s: dt condition violated at %d step(s)", self.scheme_id,
                           ledger.counters['dt_condition_violations'])
        if not ledger.weak_estimate_holds:
            logger.warning("%s: weak v-estimate violated (%.6g > %.6g)", self.scheme_id,
                           ledger.weak_estimate_lhs, ledger.weak_estimate_rhs)
        return ledger
