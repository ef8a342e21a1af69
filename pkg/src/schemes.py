# src/schemes.py
"""Time steppers for the 1D chemotaxis-consumption system.

Five schemes share the lumped v-step and differ in how the cell equation is
discretised:

    uv      linear, chemotaxis lagged on v^n
    uv-nd   nonlinear diffusion through the truncated potential G_eps (Picard)
    uv-ns   nonlinear sensitivity Lambda_eps (Picard)
    uvs     coupled (u, sigma = grad sqrt v) system (alternating Picard)
    uv-ad   upwind finite volumes written as P1 with artificial diffusion

``run`` drives any of them over [0, T] and returns a ``RunLedger``.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional

import numpy as np
from tqdm import tqdm

from src.diagnostics import DiagnosticsRecorder, RunLedger
from utils.errors import ChemotaxisError, ConfigError, InvalidStateError, NonConvergenceError
from utils.linalg import (TriDiagMatrix, assemble_consistent_mass, assemble_convection,
                          assemble_gauss_weighted_mass, assemble_lumped_mass, assemble_reaction,
                          assemble_stiffness, assemble_weighted_stiffness, check_conservative, solve)
from utils.mesh_fe import GAUSS_ORDER, Mesh1D, NodalField, at_gauss_points, gauss_points, gradient, h1_norm
from utils.potentials import f_eps_prime, g_eps_prime, lambda_eps, pos_part

logger = logging.getLogger(__name__)

SCHEME_IDS = ('uv', 'uv-nd', 'uv-ns', 'uvs', 'uv-ad')


# ---------------------------------------------------------------------------
# parameters and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhysicalParams:
    chi: float
    mu: float

    def __post_init__(self):
        if not (self.chi > 0 and self.mu > 0):
            raise ConfigError(f"chi and mu must be positive, got chi={self.chi}, mu={self.mu}")


@dataclass(frozen=True)
class SolverParams:
    """Time step, truncation and Picard controls.

    ``carry_forward_on_cap`` left as None means the scheme default: on for uv-ns,
    off for the other nonlinear schemes.
    """

    dt: float
    eps: float
    c_tol: float = 1e-8
    max_iter: int = 100
    carry_forward_on_cap: Optional[bool] = None
    v_floor: float = 1e-300

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not 0 < self.eps < 1:
            raise ConfigError(f"eps must lie in (0, 1), got {self.eps}")
        if not self.c_tol > 0:
            raise ConfigError(f"c_tol must be positive, got {self.c_tol}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"max_iter must be a positive integer, got {self.max_iter}")
        if not self.v_floor > 0:
            raise ConfigError(f"v_floor must be positive, got {self.v_floor}")

    @classmethod
    def for_mesh(cls, mesh: Mesh1D, dt: float, eps: Optional[float] = None, **kwargs) -> 'SolverParams':
        return cls(dt=dt, eps=mesh.h ** 2 if eps is None else eps, **kwargs)

    def carry_forward(self, scheme_id: str) -> bool:
        if self.carry_forward_on_cap is None:
            return scheme_id == 'uv-ns'
        return bool(self.carry_forward_on_cap)


@dataclass(frozen=True)
class SchemeParams:
    physical: PhysicalParams
    solver: SolverParams

    @property
    def chi(self) -> float:
        return self.physical.chi

    @property
    def mu(self) -> float:
        return self.physical.mu

    @property
    def dt(self) -> float:
        return self.solver.dt

    @property
    def eps(self) -> float:
        return self.solver.eps

    def with_dt(self, dt: float) -> 'SchemeParams':
        return replace(self, solver=replace(self.solver, dt=dt))


@dataclass(frozen=True, eq=False)
class SchemeState:
    u: NodalField
    v: NodalField
    sigma: Optional[NodalField] = None
    t: float = 0.0
    n: int = 0

    def __post_init__(self):
        meshes = {self.u.mesh, self.v.mesh} | ({self.sigma.mesh} if self.sigma is not None else set())
        if len(meshes) != 1:
            raise InvalidStateError("u, v and sigma must live on the same mesh")

    @property
    def mesh(self) -> Mesh1D:
        return self.u.mesh


@dataclass(frozen=True)
class StepReport:
    picard_iters: int = 0
    picard_residual: float = 0.0
    converged: bool = True
    dt_condition_ok: bool = True
    v_floor_activations: int = 0
    max_principle_ok: bool = True
    carried_forward: bool = False


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def _dt_condition(v_old: NodalField, params: SchemeParams) -> bool:
    grad_max = float(np.max(np.abs(gradient(v_old).values)))
    if grad_max == 0.0:
        return True
    return params.dt < 2.0 / (params.chi ** 2 * grad_max)


def _max_principle_holds(v_old: NodalField, v_new: NodalField) -> bool:
    if v_old.min() <= 0.0:
        return True
    return v_new.min() > 0.0 and v_new.max() <= v_old.max() * (1.0 + 1e-12)


def step_v(u_new: NodalField, v_old: NodalField, params: SchemeParams, step: Optional[int] = None,
           t: Optional[float] = None) -> NodalField:
    """Lumped implicit v-step: [M/dt + K + mu M_(u+)] v = M v_old / dt."""
    mesh = v_old.mesh
    mass = assemble_lumped_mass(mesh)
    A = mass / params.dt + assemble_stiffness(mesh) + assemble_reaction(mesh, params.mu * pos_part(u_new.values))
    return NodalField(mesh, solve(A, mass @ v_old / params.dt, step, t))


def _finish(state: SchemeState, u_new: NodalField, sigma_new: Optional[NodalField], params: SchemeParams,
            report: StepReport) -> tuple[SchemeState, StepReport]:
    step = state.n + 1
    v_new = step_v(u_new, state.v, params, step, state.t + params.dt)
    ok = _max_principle_holds(state.v, v_new)
    if not ok:
        logger.warning("maximum principle violated by the v-step at step %d", step)
    new_state = SchemeState(u_new, v_new, sigma_new, state.t + params.dt, step)
    return new_state, replace(report, max_principle_ok=ok)


def _relative_increment(mesh: Mesh1D, new: tuple, old: tuple) -> float:
    diff = sum(h1_norm(NodalField(mesh, a - b)) ** 2 for a, b in zip(new, old))
    base = sum(h1_norm(NodalField(mesh, b)) ** 2 for b in old)
    return math.sqrt(diff) / math.sqrt(base) if base > 0 else math.sqrt(diff)


def _picard(scheme_id: str, state: SchemeState, params: SchemeParams, start: tuple,
            sweep: Callable[[tuple], tuple]) -> tuple[tuple, StepReport]:
    """Fixed-point loop shared by the nonlinear schemes, stopped on the relative H1 increment."""
    solver = params.solver
    current = start
    residual = math.inf
    with np.errstate(over='ignore', invalid='ignore'):
        for iteration in range(1, solver.max_iter + 1):
            new = sweep(current)
            residual = _relative_increment(state.mesh, new, current)
            current = new
            if residual <= solver.c_tol:
                return current, StepReport(picard_iters=iteration, picard_residual=residual)

    if solver.carry_forward(scheme_id):
        logger.warning("%s: Picard cap of %d reached at step %d (residual %.3e), carrying last iterate forward",
                       scheme_id, solver.max_iter, state.n + 1, residual)
        return current, StepReport(picard_iters=solver.max_iter, picard_residual=residual,
                                   converged=False, carried_forward=True)
    raise NonConvergenceError(f"{scheme_id}: Picard iteration did not converge in {solver.max_iter} iterations",
                              step=state.n + 1, residual=residual)


def _u_operator(mesh: Mesh1D, dt: float) -> tuple[TriDiagMatrix, TriDiagMatrix, TriDiagMatrix]:
    mass = assemble_lumped_mass(mesh)
    stiffness = assemble_stiffness(mesh)
    return mass, stiffness, mass / dt + stiffness


# ---------------------------------------------------------------------------
# UV
# ---------------------------------------------------------------------------

def uv_system(state: SchemeState, params: SchemeParams) -> TriDiagMatrix:
    mesh = state.mesh
    mass, stiffness, base = _u_operator(mesh, params.dt)
    return base - params.chi * assemble_convection(mesh, gradient(state.v))


def uv_step(state: SchemeState, params: SchemeParams) -> tuple[SchemeState, StepReport]:
    mesh = state.mesh
    mass = assemble_lumped_mass(mesh)
    A = uv_system(state, params)
    check_conservative(A, mass, params.dt)
    u_new = NodalField(mesh, solve(A, mass @ state.u / params.dt, state.n + 1, state.t))
    return _finish(state, u_new, None, params, StepReport(dt_condition_ok=_dt_condition(state.v, params)))


# ---------------------------------------------------------------------------
# UV-ND
# ---------------------------------------------------------------------------

def nonlinear_diffusion_load(u: np.ndarray, mesh: Mesh1D, eps: float) -> np.ndarray:
    """Vector of (u^2 grad I_h G_eps'(u), grad phi_i) with u^2 taken at element midpoints."""
    mid = 0.5 * (u[:-1] + u[1:])
    flux = mid * mid * np.diff(g_eps_prime(u, eps)) / mesh.h
    load = np.zeros(mesh.J)
    load[:-1] -= flux
    load[1:] += flux
    return load


def uvnd_step(state: SchemeState, params: SchemeParams) -> tuple[SchemeState, StepReport]:
    mesh = state.mesh
    mass, stiffness, A = _u_operator(mesh, params.dt)
    convection = assemble_convection(mesh, gradient(state.v))
    check_conservative(A, mass, params.dt)
    base_rhs = mass @ state.u / params.dt
    step = state.n + 1

    def sweep(current):
        (u_l,) = current
        rhs = (base_rhs + stiffness @ u_l + params.chi * (convection @ u_l)
               - nonlinear_diffusion_load(u_l, mesh, params.eps))
        return (solve(A, rhs, step, state.t),)

    (u_new,), report = _picard('uv-nd', state, params, (state.u.values,), sweep)
    report = replace(report, dt_condition_ok=_dt_condition(state.v, params))
    return _finish(state, NodalField(mesh, u_new), None, params, report)


# ---------------------------------------------------------------------------
# UV-NS
# ---------------------------------------------------------------------------

def sensitivity_load(u: NodalField, v: NodalField, eps: float) -> np.ndarray:
    """Vector of (Lambda_eps(u) grad v, grad phi_i)."""
    flux = lambda_eps(u, eps).values * gradient(v).values
    load = np.zeros(u.mesh.J)
    load[:-1] -= flux
    load[1:] += flux
    return load


def uvns_step(state: SchemeState, params: SchemeParams) -> tuple[SchemeState, StepReport]:
    mesh = state.mesh
    mass, _, A = _u_operator(mesh, params.dt)
    check_conservative(A, mass, params.dt)
    base_rhs = mass @ state.u / params.dt
    step = state.n + 1

    def sweep(current):
        (u_l,) = current
        rhs = base_rhs + params.chi * sensitivity_load(NodalField(mesh, u_l), state.v, params.eps)
        return (solve(A, rhs, step, state.t),)

    (u_new,), report = _picard('uv-ns', state, params, (state.u.values,), sweep)
    report = replace(report, dt_condition_ok=_dt_condition(state.v, params))
    return _finish(state, NodalField(mesh, u_new), None, params, report)


# ---------------------------------------------------------------------------
# UVS
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SigmaCoefficients:
    """Quadrature data derived from v^n, fixed during one UVS step."""

    mesh: Mesh1D
    weights: np.ndarray
    phi_left: np.ndarray
    sqrt_v: np.ndarray
    inv_sqrt_v: np.ndarray
    inv_v: np.ndarray
    floor_hits: int = 0

    @classmethod
    def from_v(cls, v: NodalField, v_floor: float, order: int = GAUSS_ORDER) -> 'SigmaCoefficients':
        hits = int(np.count_nonzero(v.values < v_floor))
        floored = np.maximum(v.values, v_floor)
        _, weights, phi_left = gauss_points(v.mesh, order)
        return cls(v.mesh, weights, phi_left, np.sqrt(floored), 1.0 / np.sqrt(floored), 1.0 / floored, hits)

    def at_points(self, values: np.ndarray) -> np.ndarray:
        return at_gauss_points(values, self.phi_left)

    def integrate(self, values_at_points: np.ndarray) -> float:
        return float((values_at_points * self.weights[None, :]).sum())

    def load(self, values_at_points: np.ndarray) -> np.ndarray:
        """(f, phi_i) for every node i."""
        w = self.weights[None, :]
        out = np.zeros(self.mesh.J)
        out[:-1] += (values_at_points * self.phi_left[None, :] * w).sum(axis=1)
        out[1:] += (values_at_points * (1.0 - self.phi_left[None, :]) * w).sum(axis=1)
        return out

    def derivative_load(self, values_at_points: np.ndarray) -> np.ndarray:
        """(f, d/dx phi_i) for every node i."""
        cell = (values_at_points * self.weights[None, :]).sum(axis=1) / self.mesh.h
        out = np.zeros(self.mesh.J)
        out[:-1] -= cell
        out[1:] += cell
        return out

    def positive_part_mass(self, u: np.ndarray) -> TriDiagMatrix:
        return assemble_gauss_weighted_mass(self.mesh, pos_part(self.at_points(u)), self.weights, self.phi_left)


def chemotaxis_sigma_load(u: np.ndarray, sigma: np.ndarray, coeffs: SigmaCoefficients) -> np.ndarray:
    """(u sqrt(v) sigma, grad phi_i)."""
    return coeffs.derivative_load(coeffs.at_points(u) * coeffs.at_points(coeffs.sqrt_v) * coeffs.at_points(sigma))


def sigma_load(u_lag: np.ndarray, sigma_lag: np.ndarray, coeffs: SigmaCoefficients, params: SchemeParams) -> np.ndarray:
    """Explicit part of the sigma equation evaluated at the lagged iterate.

    -(1/3)(sigma^3 / v) + 2 (sigma_x sigma / sqrt v) - (2/3)(grad(sqrt v) sigma^2 / v)
    - (mu/2)(sqrt(v) u grad I_h F_eps'(u)), where 1/v and 1/sqrt(v) enter through their
    nodal interpolants and grad(sqrt v)/v = -grad(1/sqrt v).
    """
    mesh = coeffs.mesh
    s = coeffs.at_points(sigma_lag)
    s_x = gradient(NodalField(mesh, sigma_lag)).values[:, None]
    q = coeffs.at_points(coeffs.inv_sqrt_v)
    q_x = (np.diff(coeffs.inv_sqrt_v) / mesh.h)[:, None]
    r = coeffs.at_points(coeffs.inv_v)
    fp_x = (np.diff(f_eps_prime(u_lag, params.eps)) / mesh.h)[:, None]
    w = coeffs.at_points(coeffs.sqrt_v)
    u = coeffs.at_points(u_lag)

    integrand = (-(1.0 / 3.0) * r * s ** 3
                 + 2.0 * q * s_x * s
                 + (2.0 / 3.0) * q_x * s ** 2
                 - 0.5 * params.mu * w * u * fp_x)
    return coeffs.load(integrand)


def sigma_system(u_new: np.ndarray, coeffs: SigmaCoefficients, params: SchemeParams) -> TriDiagMatrix:
    mesh = coeffs.mesh
    A = (assemble_consistent_mass(mesh) / params.dt + assemble_stiffness(mesh)
         + 0.5 * params.mu * coeffs.positive_part_mass(u_new))
    return A.with_dirichlet_rows()


def uvs_step(state: SchemeState, params: SchemeParams) -> tuple[SchemeState, StepReport]:
    if state.sigma is None:
        raise InvalidStateError("uvs needs a sigma field; build the state with initial_state('uvs', ...)")
    mesh = state.mesh
    step = state.n + 1
    coeffs = SigmaCoefficients.from_v(state.v, params.solver.v_floor)
    if coeffs.floor_hits:
        logger.warning("uvs: v below v_floor at %d node(s) at step %d", coeffs.floor_hits, step)

    mass, _, A_u = _u_operator(mesh, params.dt)
    check_conservative(A_u, mass, params.dt)
    mass_c = assemble_consistent_mass(mesh)
    base_u = mass @ state.u / params.dt
    base_sigma = mass_c @ state.sigma / params.dt

    def sweep(current):
        u_l, sigma_l = current
        u_next = solve(A_u, base_u + 2.0 * params.chi * chemotaxis_sigma_load(u_l, sigma_l, coeffs), step, state.t)
        rhs = base_sigma + sigma_load(u_l, sigma_l, coeffs, params)
        rhs[0] = rhs[-1] = 0.0
        sigma_next = solve(sigma_system(u_next, coeffs, params), rhs, step, state.t)
        sigma_next[[0, -1]] = 0.0
        return u_next, sigma_next

    (u_new, sigma_new), report = _picard('uvs', state, params, (state.u.values, state.sigma.values), sweep)
    report = replace(report, dt_condition_ok=_dt_condition(state.v, params), v_floor_activations=coeffs.floor_hits)
    return _finish(state, NodalField(mesh, u_new), NodalField(mesh, sigma_new), params, report)


# ---------------------------------------------------------------------------
# UV-AD
# ---------------------------------------------------------------------------

def uvad_system_fe(state: SchemeState, params: SchemeParams) -> TriDiagMatrix:
    """M/dt + K + h(chi/2)(|v_x| u_x, ubar_x) - chi (u v_x, ubar_x)."""
    mesh = state.mesh
    g = gradient(state.v)
    _, _, base = _u_operator(mesh, params.dt)
    artificial = assemble_weighted_stiffness(mesh, 0.5 * mesh.h * params.chi * np.abs(g.values))
    return base + artificial - params.chi * assemble_convection(mesh, g)


def uvad_system_fv(state: SchemeState, params: SchemeParams) -> TriDiagMatrix:
    """Upwind finite-volume matrix on the control volumes K_j, zero flux through both ends."""
    mesh = state.mesh
    h, chi = mesh.h, params.chi
    g = gradient(state.v).values
    g_plus, g_minus = np.maximum(g, 0.0), np.minimum(g, 0.0)
    volumes = mesh.control_volumes[:, 1] - mesh.control_volumes[:, 0]

    diag = volumes / params.dt
    diag[:-1] += 1.0 / h + chi * g_plus        # flux through x_{j+1/2}
    diag[1:] += 1.0 / h - chi * g_minus        # flux through x_{j-1/2}
    upper = -1.0 / h + chi * g_minus
    lower = -1.0 / h - chi * g_plus
    return TriDiagMatrix(mesh, lower, diag, upper)


def uvad_step(state: SchemeState, params: SchemeParams) -> tuple[SchemeState, StepReport]:
    mesh = state.mesh
    mass = assemble_lumped_mass(mesh)
    A = uvad_system_fe(state, params)
    check_conservative(A, mass, params.dt)
    u_new = NodalField(mesh, solve(A, mass @ state.u / params.dt, state.n + 1, state.t))
    if state.u.min() > 0 and u_new.min() <= 0:
        logger.warning("uv-ad lost positivity at step %d (min u = %.3e)", state.n + 1, u_new.min())
    return _finish(state, u_new, None, params, StepReport(dt_condition_ok=_dt_condition(state.v, params)))


SCHEMES: dict[str, Callable[[SchemeState, SchemeParams], tuple[SchemeState, StepReport]]] = {
    'uv': uv_step,
    'uv-nd': uvnd_step,
    'uv-ns': uvns_step,
    'uvs': uvs_step,
    'uv-ad': uvad_step,
}


# ---------------------------------------------------------------------------
# initial data, residuals, time loop
# ---------------------------------------------------------------------------

def init_sigma(v0: NodalField) -> NodalField:
    """Lumped projection of grad I_h sqrt(v0) onto P1, zero at both endpoints."""
    if v0.min() <= 0.0:
        raise InvalidStateError(f"sigma needs v0 > 0 at every node, min v0 = {v0.min():.3e}")
    g = gradient(v0.map(np.sqrt)).values
    sigma = np.zeros(v0.mesh.J)
    sigma[1:-1] = 0.5 * (g[:-1] + g[1:])
    return NodalField(v0.mesh, sigma)


def initial_state(scheme_id: str, u0: NodalField, v0: NodalField, t0: float = 0.0) -> SchemeState:
    scheme_id = _check_scheme(scheme_id)
    sigma = init_sigma(v0) if scheme_id == 'uvs' else None
    return SchemeState(u0, v0, sigma, t0, 0)


def _check_scheme(scheme_id: str) -> str:
    key = scheme_id.lower()
    if key not in SCHEMES:
        raise ConfigError(f"unknown scheme '{scheme_id}', expected one of {', '.join(SCHEME_IDS)}")
    return key


def _dual_norm(mesh: Mesh1D, r: np.ndarray) -> float:
    z = solve(assemble_consistent_mass(mesh) + assemble_stiffness(mesh), r)
    return math.sqrt(max(float(np.dot(r, z)), 0.0))


def nonlinear_residual(scheme_id: str, prev: SchemeState, nxt: SchemeState, params: SchemeParams) -> float:
    """Relative H1-dual norm of the nonlinear cell-equation residual at a returned iterate.

    Only meaningful for uv-nd, uv-ns and uvs; the linear schemes return 0.
    """
    scheme_id = _check_scheme(scheme_id)
    mesh = prev.mesh
    mass, stiffness, base = _u_operator(mesh, params.dt)
    u, u_old = nxt.u.values, prev.u.values
    time_part = mass @ (u - u_old) / params.dt

    if scheme_id == 'uv-nd':
        convection = assemble_convection(mesh, gradient(prev.v))
        r = time_part + nonlinear_diffusion_load(u, mesh, params.eps) - params.chi * (convection @ u)
        scale = base @ u
    elif scheme_id == 'uv-ns':
        r = time_part + stiffness @ u - params.chi * sensitivity_load(nxt.u, prev.v, params.eps)
        scale = base @ u
    elif scheme_id == 'uvs':
        coeffs = SigmaCoefficients.from_v(prev.v, params.solver.v_floor)
        sigma, sigma_old = nxt.sigma.values, prev.sigma.values
        r_u = time_part + stiffness @ u - 2.0 * params.chi * chemotaxis_sigma_load(u, sigma, coeffs)
        A_sigma = (assemble_consistent_mass(mesh) / params.dt + assemble_stiffness(mesh)
                   + 0.5 * params.mu * coeffs.positive_part_mass(u))
        r_sigma = (A_sigma @ sigma - assemble_consistent_mass(mesh) @ sigma_old / params.dt
                   - sigma_load(u, sigma, coeffs, params))
        r_sigma[0] = r_sigma[-1] = 0.0
        num = math.hypot(_dual_norm(mesh, r_u), _dual_norm(mesh, r_sigma))
        den = math.hypot(_dual_norm(mesh, base @ u), _dual_norm(mesh, A_sigma @ sigma))
        return num / den if den > 0 else num
    else:
        return 0.0

    den = _dual_norm(mesh, scale)
    num = _dual_norm(mesh, r)
    return num / den if den > 0 else num


def _step_plan(T: float, dt: float) -> tuple[int, Optional[float]]:
    """Number of full steps and the length of a trailing short step (None when T is a multiple of dt)."""
    if T < 0:
        raise ConfigError(f"T must be non-negative, got {T}")
    ratio = T / dt
    nearest = round(ratio)
    if abs(ratio - nearest) <= 1e-9 * max(1.0, ratio):
        return int(nearest), None
    full = int(math.floor(ratio))
    return full, T - full * dt


def run(scheme_id: str, initial: SchemeState, params: SchemeParams, T: float,
        observers: Iterable[Callable] = (), progress: bool = False) -> RunLedger:
    """Advance ``initial`` to time T and return the diagnostics ledger.

    Scheme errors end the run and are recorded on the ledger rather than raised.
    Each observer is called as ``observer(prev_state, next_state, report)`` after every step.
    """
    scheme_id = _check_scheme(scheme_id)
    if scheme_id == 'uvs' and initial.sigma is None:
        initial = replace(initial, sigma=init_sigma(initial.v))
    stepper = SCHEMES[scheme_id]
    n_full, last_dt = _step_plan(T, params.dt)
    plan = [params] * n_full + ([params.with_dt(last_dt)] if last_dt is not None else [])

    recorder = DiagnosticsRecorder(scheme_id, initial, params)
    callbacks = [recorder, *observers]
    logger.info("%s: %d step(s) to T=%g on J=%d, dt=%g", scheme_id, len(plan), T, initial.mesh.J, params.dt)

    started = time.perf_counter()
    state = initial
    for step_params in tqdm(plan, desc=scheme_id, disable=not progress, leave=False):
        try:
            nxt, report = stepper(state, step_params)
        except ChemotaxisError as exc:
            recorder.fail(state.n + 1, state.t, exc, time.perf_counter() - started)
            logger.warning("%s failed at step %d (t=%.6g): %s", scheme_id, state.n + 1, state.t, exc)
            break
        logger.debug("%s step %d: t=%.6g picard=%d residual=%.2e min_u=%.3e",
                     scheme_id, nxt.n, nxt.t, report.picard_iters, report.picard_residual, nxt.u.min())
        for callback in callbacks:
            callback(state, nxt, report)
        state = nxt

    ledger = recorder.finish(state, time.perf_counter() - started)
    logger.info("%s finished: %d step(s), global min u = %.6g%s", scheme_id, len(ledger.records) - 1,
                ledger.global_min_u, '' if ledger.failure is None else f", failed at step {ledger.failure.step}")
    return ledger
