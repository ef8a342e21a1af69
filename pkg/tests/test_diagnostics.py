import math
from dataclasses import replace

import numpy as np
import pytest

from src import schemes
from src.diagnostics import (LEDGER_COLUMNS, EocTable, RunLedger, StepRecord, convergence_rate, dissipations,
                             energy_residual_uvnd, energy_residual_uvns, energy_residual_uvs, energy_uv,
                             energy_usigma, error_and_rate, g_functional, neg_part_l2, tol_energy,
                             weak_estimate_accumulate)
from src.experiments import RunConfig, execute
from src.schemes import SchemeState, initial_state, run, step_v
from utils.errors import NonNestedMeshError
from utils.mesh_fe import (Mesh1D, NodalField, cell_l2_norm, gradient, interpolate, lumped_norm, restrict)
from utils.potentials import g_eps_prime


class TestEnergies:
    def test_energy_uv_steady_state(self, mesh, params):
        assert energy_uv(NodalField.constant(mesh, 1.0), NodalField.constant(mesh, 2.0), params) == pytest.approx(0.0)

    def test_energy_uv_of_e(self, mesh, params):
        energy = energy_uv(NodalField.constant(mesh, math.e), NodalField.constant(mesh, 2.0), params)
        assert energy == pytest.approx(params.mu / 4.0)

    def test_energy_uv_floors_negative_u(self, mesh, params):
        u = NodalField(mesh, np.r_[-1.0, np.ones(mesh.J - 1)])
        assert math.isfinite(energy_uv(u, NodalField.constant(mesh, 1.0), params))

    def test_energy_usigma(self, mesh, params):
        one = NodalField.constant(mesh, 1.0)
        assert energy_usigma(one, NodalField.constant(mesh, 0.0), params) == pytest.approx(0.0, abs=1e-14)
        assert energy_usigma(one, one, params) == pytest.approx(params.chi / 2.0)

    def test_g_functional_of_one(self, mesh):
        assert g_functional(NodalField.constant(mesh, 1.0), 0.01) == pytest.approx(100.0)

    def test_neg_part(self, mesh):
        u = NodalField(mesh, np.r_[-2.0, np.ones(mesh.J - 1)])
        assert neg_part_l2(u) == pytest.approx(4.0 * mesh.h / 2.0)
        assert neg_part_l2(NodalField.constant(mesh, 1.0)) == 0.0


class TestDissipations:
    def test_constant_u(self, mesh, params):
        d1, d2, d3 = dissipations(NodalField.constant(mesh, 2.0), NodalField.constant(mesh, 1.0), None, params)
        assert d1 == 0.0
        assert math.isnan(d2) and math.isnan(d3)

    def test_zero_sigma(self, mesh, params, smooth_fields):
        u, v = smooth_fields
        _, d2, d3 = dissipations(u, v, NodalField.constant(mesh, 0.0), params)
        assert d2 == 0.0 and d3 == 0.0

    def test_two_node_hand_value(self, make_params):
        mesh = Mesh1D(0.0, 1.0, 2)
        params = make_params(mesh, eps=1e-3)
        d1, _, _ = dissipations(NodalField(mesh, [1.0, 2.0]), NodalField.constant(mesh, 1.0), None, params)
        assert d1 == pytest.approx(0.25 * math.log(2.0))

    def test_nonnegative(self, mesh, params, rng):
        u = NodalField(mesh, rng.uniform(-1.0, 3.0, size=mesh.J))
        sigma = NodalField(mesh, np.r_[0.0, rng.normal(size=mesh.J - 2), 0.0])
        v = NodalField(mesh, rng.uniform(0.1, 2.0, size=mesh.J))
        assert all(d >= 0 for d in dissipations(u, v, sigma, params))


class TestEnergyInequalities:
    def test_constant_states(self, mesh, params, smooth_fields):
        _, v = smooth_fields
        u = NodalField.constant(mesh, 1.5)
        expected = -0.5 * params.chi ** 2 * cell_l2_norm(gradient(v)) ** 2
        assert energy_residual_uvnd(u, u, v, params) == pytest.approx(expected, rel=1e-12)
        assert energy_residual_uvns(u, u, v, params) == pytest.approx(expected, rel=1e-12)
        assert energy_residual_uvnd(u, u, NodalField.constant(mesh, 3.0), params) == 0.0

    def test_sensitivity_dissipation_matches_product(self, mesh, params, smooth_fields):
        u, _ = smooth_fields
        flat_v = NodalField.constant(mesh, 1.0)
        gp = g_eps_prime(u.values, params.eps)
        product = float(np.sum(np.diff(u.values) * np.diff(gp))) / mesh.h
        assert energy_residual_uvns(u, u, flat_v, params) == pytest.approx(0.5 * product, rel=1e-10)

    def test_uvs_steady_state(self, mesh, params):
        state = initial_state('uvs', NodalField.constant(mesh, 1.0), NodalField.constant(mesh, 2.0))
        nxt, _ = schemes.uvs_step(state, params)
        tol = tol_energy(energy_usigma(nxt.u, nxt.sigma, params), params.solver.c_tol)
        assert abs(energy_residual_uvs(state, nxt, params)) <= tol

    @pytest.mark.parametrize('scheme_id', ['uv-nd', 'uv-ns', 'uvs'])
    def test_certified_along_a_run(self, scheme_id, make_state, params):
        ledger = run(scheme_id, make_state(scheme_id), params, 20 * params.dt)
        frame = ledger.to_frame()
        energy = frame['E_usigma'] if scheme_id == 'uvs' else frame['g_functional']
        tol = tol_energy(energy, params.solver.c_tol)
        assert ledger.ok
        assert (frame['energy_residual'].iloc[1:] <= tol.iloc[1:]).all()
        assert ledger.counters['energy_inequality_violations'] == 0

    def test_uvs_energy_decays(self, make_state, params):
        frame = run('uvs', make_state('uvs'), params, 20 * params.dt).to_frame()
        slack = tol_energy(frame['E_usigma'].max(), params.solver.c_tol) * params.dt
        assert np.all(np.diff(frame['E_usigma']) <= slack)

    def test_perturbed_uvs_state_is_flagged(self, make_state, params):
        prev = make_state('uvs')
        nxt, _ = schemes.uvs_step(prev, params)
        bump = NodalField(nxt.mesh, np.sin(np.pi * nxt.mesh.nodes))
        forged = replace(nxt, sigma=nxt.sigma + bump)
        residual = energy_residual_uvs(prev, forged, params)
        assert residual > tol_energy(energy_usigma(forged.u, forged.sigma, params), params.solver.c_tol)

    def test_perturbed_uvnd_state_is_flagged(self, make_state, params):
        prev = make_state('uv-nd')
        nxt, _ = schemes.uvnd_step(prev, params)
        forged = nxt.u.map(lambda u: u * (1.0 + 0.3 * np.cos(4 * np.pi * nxt.mesh.nodes)))
        residual = energy_residual_uvnd(prev.u, forged, prev.v, params)
        assert residual > tol_energy(g_functional(forged, params.eps), params.solver.c_tol)

    @pytest.mark.slow
    @pytest.mark.parametrize('preset, scheme_id, h, dt', [
        ('example-i', 'uvs', 1 / 100, 1e-6),
        ('example-ii', 'uv-nd', 1 / 100, 1e-8),
        ('example-ii', 'uv-nd', 1 / 1000, 1e-8),
        ('example-ii', 'uv-ns', 1 / 100, 1e-8),
        ('example-ii', 'uv-ns', 1 / 1000, 1e-8),
    ])
    def test_certified_over_a_thousand_steps(self, preset, scheme_id, h, dt):
        ledger = execute(RunConfig.from_preset(preset, scheme_id, h=h, dt=dt, T=1000 * dt))
        assert ledger.ok
        assert ledger.completed_steps == 1000
        assert ledger.counters['energy_inequality_violations'] == 0
        assert ledger.weak_estimate_holds


class TestWeakEstimate:
    def test_constant_v(self, mesh, params):
        ledger = run('uv', initial_state('uv', NodalField.constant(mesh, 1.0), NodalField.constant(mesh, 2.0)),
                     params, 5 * params.dt)
        assert ledger.weak_estimate_lhs == pytest.approx(0.0, abs=1e-20)
        assert ledger.weak_estimate_rhs == pytest.approx(4.0)

    def test_single_heat_step(self, make_params):
        mesh = Mesh1D(0.0, 1.0, 201)
        params = make_params(mesh, dt=1e-2)
        v0 = interpolate(lambda x: np.cos(np.pi * x), mesh)
        v1 = step_v(NodalField.constant(mesh, 0.0), v0, params)
        ledger = weak_estimate_accumulate(RunLedger('uv'), v1, params.dt)
        assert 0 < ledger.weak_estimate_lhs <= lumped_norm(v0) ** 2
        assert lumped_norm(v0) ** 2 == pytest.approx(0.5, rel=1e-4)


class TestRates:
    def test_halving_is_first_order(self):
        assert convergence_rate(0.5, 1.0, 0.05, 0.1) == pytest.approx(1.0)

    def test_scale_invariant(self):
        r = convergence_rate(0.03, 0.1, 0.01, 0.02)
        assert convergence_rate(7 * 0.03, 7 * 0.1, 0.01, 0.02) == pytest.approx(r)

    def test_zero_error_has_no_rate(self):
        assert math.isnan(convergence_rate(0.0, 1.0, 0.5, 1.0))

    def test_error_of_restriction_is_zero(self):
        fine, coarse = Mesh1D(0.0, 1.0, 101), Mesh1D(0.0, 1.0, 11)
        ref = interpolate(lambda x: np.sin(2 * x), fine)
        e, r = error_and_rate(ref, restrict(ref, coarse))
        assert e == 0.0
        assert math.isnan(r)

    def test_rate_from_previous_rung(self):
        fine, coarse = Mesh1D(0.0, 1.0, 101), Mesh1D(0.0, 1.0, 11)
        ref = interpolate(lambda x: x ** 2, fine)
        approx = NodalField(coarse, restrict(ref, coarse).values + 1e-3)
        e, r = error_and_rate(ref, approx, prev_error=4e-3, h=coarse.h, h_prev=2 * coarse.h)
        assert e == pytest.approx(1e-3)
        assert r == pytest.approx(2.0)

    def test_non_nested_strict(self):
        fine, coarse = Mesh1D.from_h(0.0, 1.0, 1 / 1000), Mesh1D.from_h(0.0, 1.0, 1 / 600)
        ref = interpolate(lambda x: x, fine)
        with pytest.raises(NonNestedMeshError):
            error_and_rate(ref, interpolate(lambda x: x, coarse))
        e, _ = error_and_rate(ref, interpolate(lambda x: x, coarse), strict=False)
        assert e == pytest.approx(0.0, abs=1e-12)

    def test_eoc_table(self):
        table = EocTable('uv')
        first = table.add_rung(0.1, 1e-2, 2e-2, 1e-1)
        second = table.add_rung(0.05, 2.5e-3, 5e-3, 5e-2)
        assert math.isnan(first.r_u)
        assert second.r_u == pytest.approx(2.0)
        assert second.r_v == pytest.approx(2.0)
        assert second.r_vx == pytest.approx(1.0)
        assert list(table.to_frame().columns) == ['h', 'e_u', 'r_u', 'e_v', 'r_v', 'e_vx', 'r_vx']


class TestLedger:
    def test_frame_and_summary(self):
        ledger = RunLedger('uv', records=[StepRecord(0.0, 1.0, 0.5, 1.0, 2.0, 0.3),
                                          StepRecord(1e-3, 1.0, -0.1, 1.0, 1.9, 0.2)])
        assert ledger.global_min_u == -0.1
        assert ledger.completed_steps == 1
        assert list(ledger.to_frame().columns) == LEDGER_COLUMNS
        summary = ledger.summary()
        assert summary['status'] == 'ok'
        assert summary['global_min_u'] == -0.1

    def test_counters_and_supplements(self, make_state, params):
        ledger = run('uvs', make_state('uvs'), params, 3 * params.dt)
        frame = ledger.to_frame()
        assert frame['mass_v'].iloc[-1] < frame['mass_v'].iloc[0]
        assert (frame['neg_part_l2'] == 0.0).all()
        assert (frame['D1'].iloc[1:] >= 0).all() and (frame['D2'].iloc[1:] >= 0).all()
        assert frame['converged'].all()
        assert ledger.counters['v_floor_activations'] == 0
        assert set(ledger.summary()) >= {'max_principle_violations', 'dt_condition_violations',
                                         'energy_floor_activations', 'picard_caps_carried'}

    def test_energy_floor_hits_are_counted(self, mesh, params):
        u0 = NodalField(mesh, np.r_[0.0, np.full(mesh.J - 1, 1.0)])
        ledger = run('uv', SchemeState(u0, NodalField.constant(mesh, 1.0)), params, params.dt)
        assert ledger.records[0].energy_floor_hits == 1
