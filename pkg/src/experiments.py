# src/experiments.py
"""Run configuration, the four preset experiments and the drivers behind the CLI commands."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.diagnostics import EocTable, error_and_rate
from src.schemes import (SCHEME_IDS, PhysicalParams, SchemeParams, SchemeState, SolverParams, initial_state, run)
from utils.data_loader import parse_number, read_key_value_file, write_frame, write_snapshot, write_summary
from utils.data_processor import build_table1, eoc_fit_summary
from utils.errors import ChemotaxisError, ConfigError, DivergedRunError, InvalidStateError
from utils.mesh_fe import Mesh1D, NodalField, interpolate
from utils.pdf_generator import generate_eoc_pdf, generate_table1_pdf
from utils.reference_handler import load_reference, save_reference

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_FAILED = 0, 1, 2

# fractions of T at which snapshots are written besides t = 0
DEFAULT_SNAPSHOT_FRACTIONS = (1e-3, 1e-2, 1e-1, 1.0)

TABLE1_H = (1 / 100, 1 / 500, 1 / 1000, 1 / 5000, 1 / 10000)
TABLE1_DT = (1e-7, 1e-8)
EOC_LADDER = (1 / 200, 1 / 400, 1 / 600, 1 / 800, 1 / 1000)
EOC_REFERENCE_H, EOC_REFERENCE_DT = 1 / 10000, 1e-8
PUBLISHED_REFERENCE_H, PUBLISHED_REFERENCE_DT = 1e-5, 1e-9

_EXPRESSION_NAMESPACE = {
    'np': np, 'pi': np.pi, 'cos': np.cos, 'sin': np.sin, 'exp': np.exp, 'sqrt': np.sqrt, 'log': np.log,
}

PRESETS = {
    'example-i': dict(u0='1.0001 + cos(5*pi*x)', v0='1.0001 + cos(2*pi*x)',
                      T=0.3, chi=100.0, mu=1000.0, h=1e-3, dt=1e-6),
    'example-ii': dict(u0='1.1 - exp(-((x - 0.5)/0.1)**2)', v0='2 - exp(-((x - 0.5)/0.01)**2)',
                       T=1e-4, chi=100.0, mu=1.0, h=1 / 1000, dt=1e-8),
    'example-iii': dict(u0='4*(2.0001 + cos(7*pi*x))', v0='3*(2.0001 + cos(12*pi*x))',
                        T=1e-4, chi=30.0, mu=10000.0, h=1e-3, dt=1e-7),
    'example-iv': dict(u0='3*(1.0001 + cos(8*pi*x))', v0='5*(1.0001 + cos(7*pi*x))',
                       T=1e-4, chi=10.0, mu=1500.0, h=1 / 1000, dt=1e-8),
}


def presets():
    return sorted(PRESETS)


def evaluate_expression(expression: str, x: np.ndarray) -> np.ndarray:
    """Evaluate an initial-data expression in x with numpy's elementary functions only."""
    try:
        code = compile(expression, '<initial data>', 'eval')
        value = eval(code, {'__builtins__': {}}, {**_EXPRESSION_NAMESPACE, 'x': x})
    except Exception as exc:
        raise ConfigError(f"cannot evaluate initial data {expression!r}: {exc}") from exc
    return np.broadcast_to(np.asarray(value, dtype=float), x.shape)


@dataclass(frozen=True)
class RunConfig:
    scheme_id: str
    u0: str
    v0: str
    T: float
    chi: float
    mu: float
    dt: float
    h: Optional[float] = None
    J: Optional[int] = None
    a: float = 0.0
    b: float = 1.0
    eps: Optional[float] = None
    c_tol: float = 1e-8
    max_iter: int = 100
    carry_forward_on_cap: Optional[bool] = None
    v_floor: float = 1e-300
    preset: Optional[str] = None
    out_dir: str = 'output'
    snapshot_times: Optional[tuple] = None

    def __post_init__(self):
        if self.scheme_id not in SCHEME_IDS:
            raise ConfigError(f"unknown scheme '{self.scheme_id}', expected one of {', '.join(SCHEME_IDS)}")
        if (self.h is None) == (self.J is None):
            raise ConfigError("give exactly one of h and J")
        for name in ('T', 'chi', 'mu', 'dt'):
            value = getattr(self, name)
            if not (value > 0 or (name == 'T' and value == 0)):
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.h is not None and not self.h > 0:
            raise ConfigError(f"h must be positive, got {self.h}")
        if not self.b > self.a:
            raise ConfigError(f"domain [{self.a}, {self.b}] is empty")

    @classmethod
    def from_preset(cls, name: str, scheme_id: str = 'uv', **overrides) -> 'RunConfig':
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset '{name}', expected one of {', '.join(presets())}") from None
        base.update({k: v for k, v in overrides.items() if v is not None})
        if 'J' in base and overrides.get('h') is None:
            base.pop('h', None)
        return cls(scheme_id=scheme_id, preset=name, **base)

    def mesh(self) -> Mesh1D:
        try:
            if self.J is not None:
                return Mesh1D(self.a, self.b, self.J)
            return Mesh1D.from_h(self.a, self.b, self.h)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def params(self) -> SchemeParams:
        solver = SolverParams.for_mesh(self.mesh(), self.dt, eps=self.eps, c_tol=self.c_tol, max_iter=self.max_iter,
                                       carry_forward_on_cap=self.carry_forward_on_cap, v_floor=self.v_floor)
        return SchemeParams(PhysicalParams(self.chi, self.mu), solver)

    def initial_fields(self) -> tuple[NodalField, NodalField]:
        mesh = self.mesh()
        u0 = interpolate(lambda x: evaluate_expression(self.u0, x), mesh)
        v0 = interpolate(lambda x: evaluate_expression(self.v0, x), mesh)
        return u0, v0

    def initial_state(self) -> SchemeState:
        """Initial state for the configured scheme; bad initial data is a configuration error."""
        u0, v0 = self.initial_fields()
        try:
            return initial_state(self.scheme_id, u0, v0)
        except (InvalidStateError, DivergedRunError) as exc:
            raise ConfigError(f"invalid initial data: {exc}") from exc

    def resolved_snapshot_times(self) -> tuple:
        if self.snapshot_times is not None:
            return tuple(sorted(self.snapshot_times))
        return tuple(f * self.T for f in DEFAULT_SNAPSHOT_FRACTIONS)


_CONFIG_KEYS = {
    'scheme': ('scheme_id', str), 'preset': ('preset', str), 'u0': ('u0', str), 'v0': ('v0', str),
    't': ('T', float), 'chi': ('chi', float), 'mu': ('mu', float), 'dt': ('dt', float), 'h': ('h', float),
    'j': ('J', int), 'a': ('a', float), 'b': ('b', float), 'eps': ('eps', float), 'c_tol': ('c_tol', float),
    'max_iter': ('max_iter', int), 'carry_forward_on_cap': ('carry_forward_on_cap', 'bool'),
    'v_floor': ('v_floor', float), 'out': ('out_dir', str), 'out_dir': ('out_dir', str),
    'snapshot_times': ('snapshot_times', 'floats'),
}
_REQUIRED = ('u0', 'v0', 'T', 'chi', 'mu', 'dt')


def _convert(key: str, raw: str, kind):
    try:
        if kind == 'bool':
            lowered = raw.lower()
            if lowered not in ('true', 'false', 'yes', 'no', '1', '0'):
                raise ValueError(raw)
            return lowered in ('true', 'yes', '1')
        if kind == 'floats':
            return tuple(parse_number(item) for item in raw.split(',') if item.strip())
        if kind is float:
            return parse_number(raw)
        if kind is int:
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        return raw
    except Exception:
        raise ConfigError(f"cannot parse value {raw!r} for key '{key}'") from None


def load_config(path: str, **overrides) -> RunConfig:
    """Build a RunConfig from a key-value file; keyword overrides (e.g. from the CLI) win over the file."""
    entries = read_key_value_file(path)
    values = {}
    for key, raw in entries.items():
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown key '{key}' in {path}")
        name, kind = _CONFIG_KEYS[key]
        values[name] = _convert(key, raw, kind)
    values.update({k: v for k, v in overrides.items() if v is not None})
    if overrides.get('h') is not None:
        values.pop('J', None)

    scheme_id = values.pop('scheme_id', 'uv')
    preset = values.pop('preset', None)
    if preset is not None:
        return RunConfig.from_preset(preset, scheme_id, **values)
    missing = [k for k in _REQUIRED if k not in values]
    if 'h' not in values and 'J' not in values:
        missing.append('h or J')
    if missing:
        raise ConfigError(f"{path} is missing required key(s): {', '.join(missing)}")
    return RunConfig(scheme_id=scheme_id, **values)


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

class SnapshotWriter:
    """Observer writing u and v at the first step reaching each requested time."""

    def __init__(self, out_dir: str, times: Sequence[float]):
        self.out_dir = out_dir
        self.pending = sorted(times)
        self.written = []

    def write(self, state):
        x = state.mesh.nodes
        write_snapshot(self.out_dir, 'u', state.t, x, state.u.values)
        write_snapshot(self.out_dir, 'v', state.t, x, state.v.values)
        self.written.append(state.t)

    def __call__(self, prev, nxt, report):
        due = False
        while self.pending and self.pending[0] <= nxt.t * (1.0 + 1e-12):
            self.pending.pop(0)
            due = True
        if due:
            self.write(nxt)


def execute(config: RunConfig, observers=(), progress: bool = False):
    state = config.initial_state()
    return run(config.scheme_id, state, config.params(), config.T, observers=observers, progress=progress)


def cmd_run(config: RunConfig, progress: bool = True) -> int:
    """Run one configuration and write ledger.csv, snapshots and summary.txt under ``config.out_dir``."""
    state = config.initial_state()
    os.makedirs(config.out_dir, exist_ok=True)
    times = config.resolved_snapshot_times()
    snapshots = SnapshotWriter(config.out_dir, [t for t in times if t > 0])
    snapshots.write(state)

    ledger = run(config.scheme_id, state, config.params(), config.T, observers=[snapshots], progress=progress)
    write_frame(ledger.to_frame(), os.path.join(config.out_dir, 'ledger.csv'))

    code = EXIT_OK if ledger.ok else EXIT_FAILED
    summary = ledger.summary()
    summary.update({
        'exit_status': code,
        'preset': config.preset or 'custom',
        'h': config.mesh().h,
        'dt': config.dt,
        'eps': config.params().eps,
        'snapshot_times': ', '.join(f"{t:.6e}" for t in snapshots.written),
        'snapshot_times_note': 'log-spaced fractions of T unless configured',
    })
    write_summary(os.path.join(config.out_dir, 'summary.txt'), summary)
    if not ledger.ok:
        logger.error("run failed at step %d: %s", ledger.failure.step, ledger.failure.message)
    return code


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def worker_count(jobs: Optional[int] = None) -> int:
    if jobs is not None:
        return jobs
    try:
        return int(os.environ.get('THREADS', '1'))
    except ValueError:
        raise ConfigError(f"THREADS must be an integer, got {os.environ['THREADS']!r}") from None


def _table1_cell(config: RunConfig) -> dict:
    ledger = execute(config)
    return {'scheme': config.scheme_id, 'dt': config.dt, 'h': config.h, 'min_u': ledger.global_min_u,
            'failed': not ledger.ok, 'failure': '' if ledger.ok else ledger.failure.kind,
            'failure_step': ledger.failure.step if ledger.failure else -1, 'steps': ledger.completed_steps}


def cmd_table1(out_dir: str = 'output', dt_list: Sequence[float] = TABLE1_DT, h_list: Sequence[float] = TABLE1_H,
               schemes: Sequence[str] = SCHEME_IDS, preset: str = 'example-ii', jobs: Optional[int] = None,
               pdf: bool = False) -> pd.DataFrame:
    """Minimum of u over every (scheme, dt, h) run of a preset, failed cells marked 'x'."""
    configs = [RunConfig.from_preset(preset, scheme, h=h, dt=dt, out_dir=out_dir)
               for scheme in schemes for dt in dt_list for h in h_list]
    logger.info("table1: %d run(s) of %s on %d worker(s)", len(configs), preset, worker_count(jobs))
    cells = Parallel(n_jobs=worker_count(jobs))(delayed(_table1_cell)(c) for c in configs)
    for cell in cells:
        logger.info("table1 %s dt=%g h=%g -> %s", cell['scheme'], cell['dt'], cell['h'],
                    'x' if cell['failed'] else f"{cell['min_u']:.3e}")

    table = build_table1(cells)
    write_frame(table, os.path.join(out_dir, 'table1.csv'))
    write_frame(pd.DataFrame(cells), os.path.join(out_dir, 'table1_cells.csv'))
    if pdf:
        generate_table1_pdf(os.path.join(out_dir, 'table1.pdf'), table, preset)
    return table


def _ladder_run(config: RunConfig) -> tuple:
    ledger_state = {}

    def keep_last(prev, nxt, report):
        ledger_state['state'] = nxt

    ledger = run(config.scheme_id, config.initial_state(), config.params(), config.T, observers=[keep_last])
    if not ledger.ok:
        raise ChemotaxisError(f"{config.scheme_id} run with h={config.h:g} failed at step {ledger.failure.step}: "
                              f"{ledger.failure.message}")
    final = ledger_state.get('state')
    if final is None:
        return u0.values, v0.values
    return final.u.values, final.v.values


@dataclass(frozen=True)
class EocStudy:
    scheme_id: str
    ladder: tuple = EOC_LADDER
    dt: float = EOC_REFERENCE_DT
    reference_h: float = EOC_REFERENCE_H
    self_reference: bool = False
    preset: str = 'example-iv'
    reference_path: Optional[str] = None
    save_reference_path: Optional[str] = None
    strict_nesting: bool = False

    @classmethod
    def published(cls, scheme_id: str, **kwargs) -> 'EocStudy':
        return cls(scheme_id, dt=PUBLISHED_REFERENCE_DT, reference_h=PUBLISHED_REFERENCE_H, **kwargs)

    @property
    def reference_scheme(self) -> str:
        return self.scheme_id if self.self_reference else 'uv'


def compute_reference(study: EocStudy) -> tuple[NodalField, NodalField]:
    if study.reference_path:
        u, v, meta = load_reference(study.reference_path)
        logger.info("eoc: loaded reference J=%d from %s", u.mesh.J, study.reference_path)
        return u, v
    config = RunConfig.from_preset(study.preset, study.reference_scheme, h=study.reference_h, dt=study.dt)
    logger.info("eoc: computing %s reference with h=%g, dt=%g", study.reference_scheme, study.reference_h, study.dt)
    u_values, v_values = _ladder_run(config)
    mesh = config.mesh()
    u, v = NodalField(mesh, u_values), NodalField(mesh, v_values)
    if study.save_reference_path:
        save_reference(study.save_reference_path, u, v, {'scheme': study.reference_scheme, 'h': study.reference_h,
                                                         'dt': study.dt, 'preset': study.preset})
    return u, v


def eoc_table(study: EocStudy, jobs: Optional[int] = None) -> EocTable:
    ref_u, ref_v = compute_reference(study)
    configs = [RunConfig.from_preset(study.preset, study.scheme_id, h=h, dt=study.dt) for h in study.ladder]
    results = Parallel(n_jobs=worker_count(jobs))(delayed(_ladder_run)(c) for c in configs)

    table = EocTable(study.scheme_id)
    for config, (u_values, v_values) in zip(configs, results):
        mesh = config.mesh()
        u, v = NodalField(mesh, u_values), NodalField(mesh, v_values)
        e_u, _ = error_and_rate(ref_u, u, strict=study.strict_nesting)
        e_v, _ = error_and_rate(ref_v, v, strict=study.strict_nesting)
        e_vx, _ = error_and_rate(ref_v, v, derivative=True, strict=study.strict_nesting)
        row = table.add_rung(mesh.h, e_u, e_v, e_vx)
        logger.info("eoc %s h=%g: e(u)=%.4e r(u)=%.4f", study.scheme_id, mesh.h, row.e_u, row.r_u)
    return table


def cmd_eoc(study: EocStudy, out_dir: str = 'output', jobs: Optional[int] = None, pdf: bool = False) -> pd.DataFrame:
    os.makedirs(out_dir, exist_ok=True)
    eoc = eoc_table(study, jobs).to_frame()
    fit = eoc_fit_summary(eoc)
    write_frame(eoc, os.path.join(out_dir, 'eoc.csv'))
    write_frame(fit, os.path.join(out_dir, 'eoc_fit.csv'))
    if pdf:
        note = (f"Reference: scheme {study.reference_scheme}, h = {study.reference_h:g}, dt = {study.dt:g}"
                if not study.reference_path else f"Reference loaded from {study.reference_path}")
        generate_eoc_pdf(os.path.join(out_dir, 'eoc.pdf'), eoc, fit, study.scheme_id, note)
    return eoc
