import logging
from dataclasses import replace

import numpy as np
import pytest

from src import schemes
from src.schemes import (SCHEME_IDS, PhysicalParams, SchemeState, SolverParams, StepReport, init_sigma, initial_state,
                         nonlinear_residual, run, step_v, uvad_system_fe, uvad_system_fv)
from utils.errors import ConfigError, DivergedRunError, InvalidStateError, NonConvergenceError
from utils.linalg import assemble_lumped_mass, check_conservative
from utils.mesh_fe import Mesh1D, NodalField, interpolate


def _mass(u):
    return float(np.dot(u.mesh.lumped_weights, u.values))


def _advance(scheme_id, state, params, steps):
    for _ in range(steps):
        state, report = schemes.SCHEMES[scheme_id](state, params)
    return state, report


class TestParameters:
    @pytest.mark.parametrize('chi, mu', [(0.0, 1.0), (1.0, -1.0)])
    def test_physical_positive(self, chi, mu):
        with pytest.raises(ConfigError):
            PhysicalParams(chi, mu)

    def test_solver_defaults(self, mesh):
        solver = SolverParams.for_mesh(mesh, 1e-6)
        assert solver.eps == pytest.approx(mesh.h ** 2)
        assert solver.c_tol == 1e-8
        assert solver.max_iter == 100

    def test_eps_override(self, mesh):
        assert SolverParams.for_mesh(mesh, 1e-6, eps=1e-3).eps == 1e-3

    @pytest.mark.parametrize('kwargs', [dict(dt=0.0, eps=0.1), dict(dt=1e-3, eps=1.5),
                                        dict(dt=1e-3, eps=0.1, max_iter=0), dict(dt=1e-3, eps=0.1, c_tol=-1.0)])
    def test_solver_validation(self, kwargs):
        with pytest.raises(ConfigError):
            SolverParams(**kwargs)

    def test_carry_forward_defaults(self):
        solver = SolverParams(dt=1e-3, eps=0.1)
        assert solver.carry_forward('uv-ns')
        assert not solver.carry_forward('uv-nd')
        assert not solver.carry_forward('uvs')
        assert SolverParams(dt=1e-3, eps=0.1, carry_forward_on_cap=True).carry_forward('uv-nd')

    def test_state_on_one_mesh(self, mesh):
        other = Mesh1D(0.0, 1.0, 5)
        with pytest.raises(InvalidStateError):
            SchemeState(NodalField.constant(mesh, 1.0), NodalField.constant(other, 1.0))


class TestStepV:
    def test_no_consumption_keeps_constant(self, mesh, params):
        v = step_v(NodalField.constant(mesh, 0.0), NodalField.constant(mesh, 3.0), params)
        np.testing.assert_allclose(v.values, 3.0, rtol=1e-13)

    def test_constant_consumption(self, mesh, params):
        U, c = 2.0, 3.0
        v = step_v(NodalField.constant(mesh, U), NodalField.constant(mesh, c), params)
        np.testing.assert_allclose(v.values, c / (1.0 + params.mu * params.dt * U), rtol=1e-13)

    def test_negative_u_is_not_a_source(self, mesh, params):
        v = step_v(NodalField.constant(mesh, -5.0), NodalField.constant(mesh, 1.0), params)
        np.testing.assert_allclose(v.values, 1.0, rtol=1e-13)

    def test_maximum_principle(self, make_params):
        mesh = Mesh1D.from_h(0.0, 1.0, 1e-3)
        params = make_params(mesh, dt=1e-6, chi=100.0, mu=1000.0)
        u = interpolate(lambda x: 1.0001 + np.cos(5 * np.pi * x), mesh)
        v_old = interpolate(lambda x: 1.0001 + np.cos(2 * np.pi * x), mesh)
        v_new = step_v(u, v_old, params)
        assert v_new.min() > 0
        assert v_new.max() <= v_old.max()


class TestConservation:
    @pytest.mark.parametrize('scheme_id', SCHEME_IDS)
    def test_mass_is_conserved(self, scheme_id, make_state, params):
        state = make_state(scheme_id)
        m0 = _mass(state.u)
        state, _ = _advance(scheme_id, state, params, 5)
        assert _mass(state.u) == pytest.approx(m0, rel=1e-12)
        assert state.n == 5
        assert state.t == pytest.approx(5 * params.dt)

    @pytest.mark.parametrize('scheme_id', ['uv', 'uv-ad'])
    def test_linear_step_operator_is_conservative(self, scheme_id, make_state, params):
        state = make_state(scheme_id)
        A = schemes.uv_system(state, params) if scheme_id == 'uv' else uvad_system_fe(state, params)
        assert check_conservative(A, assemble_lumped_mass(state.mesh), params.dt) < 1e-12

    @pytest.mark.parametrize('scheme_id', SCHEME_IDS)
    def test_every_step_checks_conservation(self, scheme_id, make_state, params, monkeypatch):
        drifts = []

        def record(A, mass, dt):
            drifts.append(check_conservative(A, mass, dt))
            return drifts[-1]

        monkeypatch.setattr(schemes, 'check_conservative', record)
        _advance(scheme_id, make_state(scheme_id), params, 2)
        assert len(drifts) == 2
        assert max(drifts) < 1e-12


class TestUV:
    def test_constant_v_is_heat_step(self, mesh, params):
        u = interpolate(lambda x: 1.0 + 0.5 * np.cos(np.pi * x), mesh)
        state = initial_state('uv', u, NodalField.constant(mesh, 2.0))
        nxt, report = schemes.uv_step(state, params)
        assert nxt.u.max() <= u.max()
        assert nxt.u.min() >= u.min()
        assert report.dt_condition_ok
        assert report.picard_iters == 0
        assert nxt.sigma is None

    def test_dt_condition_flag(self, make_state, make_params, mesh):
        state = make_state('uv')
        assert schemes._dt_condition(state.v, make_params(mesh, dt=1e-5, chi=10.0))
        assert not schemes._dt_condition(state.v, make_params(mesh, dt=1.0, chi=10.0))


class TestNonlinearSchemes:
    @pytest.mark.parametrize('scheme_id', ['uv-nd', 'uv-ns'])
    def test_constant_state_is_fixed_point(self, scheme_id, mesh, params):
        state = initial_state(scheme_id, NodalField.constant(mesh, 1.3), NodalField.constant(mesh, 2.0))
        nxt, report = schemes.SCHEMES[scheme_id](state, params)
        np.testing.assert_allclose(nxt.u.values, 1.3, rtol=1e-13)
        assert report.picard_iters == 1
        assert report.converged

    @pytest.mark.parametrize('scheme_id', ['uv-nd', 'uv-ns', 'uvs'])
    def test_converges_on_smooth_data(self, scheme_id, make_state, params):
        nxt, report = schemes.SCHEMES[scheme_id](make_state(scheme_id), params)
        assert report.converged
        assert report.picard_residual <= params.solver.c_tol
        assert 1 <= report.picard_iters < params.solver.max_iter

    @pytest.mark.parametrize('scheme_id', ['uv-nd', 'uv-ns', 'uvs'])
    def test_fixed_point_consistency(self, scheme_id, make_state, params):
        prev = make_state(scheme_id)
        nxt, _ = schemes.SCHEMES[scheme_id](prev, params)
        assert nonlinear_residual(scheme_id, prev, nxt, params) <= 10 * params.solver.c_tol

        bumped = replace(nxt, u=nxt.u + NodalField(nxt.mesh, 1e-3 * np.sin(3 * np.pi * nxt.mesh.nodes)))
        assert nonlinear_residual(scheme_id, prev, bumped, params) > 10 * params.solver.c_tol

    @pytest.mark.parametrize('scheme_id', ['uv', 'uv-ad'])
    def test_linear_schemes_have_no_residual(self, scheme_id, make_state, params):
        prev = make_state(scheme_id)
        nxt, _ = schemes.SCHEMES[scheme_id](prev, params)
        assert nonlinear_residual(scheme_id, prev, nxt, params) == 0.0

    @pytest.mark.parametrize('scheme_id', ['uv-nd', 'uvs'])
    def test_cap_without_carry_raises(self, scheme_id, make_state, make_params, mesh):
        params = make_params(mesh, dt=1e-4, c_tol=1e-15, max_iter=1)
        with pytest.raises(NonConvergenceError) as info:
            schemes.SCHEMES[scheme_id](make_state(scheme_id), params)
        assert info.value.step == 1

    def test_cap_with_carry_forward(self, make_state, make_params, mesh, caplog):
        params = make_params(mesh, dt=1e-4, c_tol=1e-15, max_iter=1)
        with caplog.at_level(logging.WARNING, logger='src.schemes'):
            nxt, report = schemes.uvns_step(make_state('uv-ns'), params)
        assert report.carried_forward
        assert not report.converged
        assert report.picard_iters == 1
        assert 'carrying last iterate forward' in caplog.text

    def test_schemes_agree_on_one_small_step(self, make_params):
        mesh = Mesh1D.from_h(0.0, 1.0, 1e-3)
        params = make_params(mesh, dt=1e-8, chi=10.0, mu=1500.0)
        u0 = interpolate(lambda x: 3 * (1.0001 + np.cos(8 * np.pi * x)), mesh)
        v0 = interpolate(lambda x: 5 * (1.0001 + np.cos(7 * np.pi * x)), mesh)
        results = {s: schemes.SCHEMES[s](initial_state(s, u0, v0), params)[0].u.values
                   for s in ('uv', 'uv-nd', 'uv-ns')}
        np.testing.assert_allclose(results['uv'], results['uv-nd'], atol=1e-4)
        np.testing.assert_allclose(results['uv'], results['uv-ns'], atol=1e-4)
        np.testing.assert_allclose(results['uv-nd'], results['uv-ns'], atol=1e-4)


class TestUVS:
    def test_needs_sigma(self, mesh, params):
        state = SchemeState(NodalField.constant(mesh, 1.0), NodalField.constant(mesh, 1.0))
        with pytest.raises(InvalidStateError):
            schemes.uvs_step(state, params)

    def test_constant_steady_state(self, mesh, params):
        m0, c = 1.2, 2.0
        state = initial_state('uvs', NodalField.constant(mesh, m0), NodalField.constant(mesh, c))
        np.testing.assert_array_equal(state.sigma.values, 0.0)
        nxt, report = schemes.uvs_step(state, params)
        np.testing.assert_allclose(nxt.u.values, m0, rtol=1e-13)
        np.testing.assert_allclose(nxt.sigma.values, 0.0, atol=1e-13)
        np.testing.assert_allclose(nxt.v.values, c / (1.0 + params.mu * params.dt * m0), rtol=1e-13)
        assert report.v_floor_activations == 0

    def test_sigma_vanishes_at_ends(self, make_state, params):
        nxt, _ = _advance('uvs', make_state('uvs'), params, 3)
        assert nxt.sigma.values[0] == 0.0
        assert nxt.sigma.values[-1] == 0.0

    def test_v_floor_is_reported(self, mesh, make_params, caplog):
        params = make_params(mesh, dt=1e-6, v_floor=1e-3)
        v0 = interpolate(lambda x: 1e-4 + x ** 2, mesh)
        state = initial_state('uvs', NodalField.constant(mesh, 1.0), v0)
        with caplog.at_level(logging.WARNING, logger='src.schemes'):
            _, report = schemes.uvs_step(state, params)
        assert report.v_floor_activations > 0
        assert 'v_floor' in caplog.text


class TestUVAD:
    def test_constant_v_matches_uv(self, mesh, params):
        u = interpolate(lambda x: 1.0 + x ** 2, mesh)
        state = initial_state('uv-ad', u, NodalField.constant(mesh, 2.0))
        np.testing.assert_allclose(uvad_system_fe(state, params).to_dense(),
                                   schemes.uv_system(state, params).to_dense(), rtol=1e-14)

    def test_finite_volume_form_matches_finite_element_form(self, rng, make_params):
        mesh = Mesh1D(0.0, 1.0, 21)
        for _ in range(100):
            params = make_params(mesh, dt=10 ** rng.uniform(-8, -2), chi=10 ** rng.uniform(-1, 2))
            v = NodalField(mesh, rng.uniform(0.1, 5.0, size=mesh.J))
            state = SchemeState(NodalField.constant(mesh, 1.0), v)
            fe, fv = uvad_system_fe(state, params).to_dense(), uvad_system_fv(state, params).to_dense()
            np.testing.assert_allclose(fe, fv, rtol=1e-13, atol=1e-13 * np.abs(fe).max())

    def test_offdiagonals_are_nonpositive(self, rng, make_params):
        mesh = Mesh1D(0.0, 1.0, 21)
        state = SchemeState(NodalField.constant(mesh, 1.0), NodalField(mesh, rng.uniform(0.1, 5.0, size=mesh.J)))
        A = uvad_system_fe(state, make_params(mesh, chi=100.0))
        assert np.all(A.lower <= 0) and np.all(A.upper <= 0)

    def test_keeps_positivity_where_uv_does_not(self, make_params):
        mesh = Mesh1D.from_h(0.0, 1.0, 1 / 100)
        params = make_params(mesh, dt=1e-6, chi=100.0, mu=1.0)
        u0 = interpolate(lambda x: 1.1 - np.exp(-((x - 0.5) / 0.1) ** 2), mesh)
        v0 = interpolate(lambda x: 2.0 - np.exp(-((x - 0.5) / 0.01) ** 2), mesh)
        state, _ = _advance('uv-ad', initial_state('uv-ad', u0, v0), params, 50)
        assert state.u.min() > 0


class TestInitSigma:
    def test_constant(self, mesh):
        np.testing.assert_array_equal(init_sigma(NodalField.constant(mesh, 4.0)).values, 0.0)

    def test_square(self):
        mesh = Mesh1D(0.0, 1.0, 101)
        sigma = init_sigma(interpolate(lambda x: (1.0 + x) ** 2, mesh))
        np.testing.assert_allclose(sigma.values[1:-1], 1.0, rtol=1e-10)
        assert sigma.values[0] == 0.0 and sigma.values[-1] == 0.0

    def test_rejects_non_positive(self, mesh):
        with pytest.raises(InvalidStateError):
            init_sigma(interpolate(lambda x: x - 0.5, mesh))


class TestRun:
    def test_zero_steps(self, make_state, params):
        ledger = run('uv', make_state('uv'), params, 0.0)
        assert len(ledger.records) == 1
        assert ledger.completed_steps == 0
        assert ledger.ok

    def test_step_plan(self):
        assert schemes._step_plan(1e-4, 1e-8) == (10000, None)
        full, last = schemes._step_plan(1.05, 0.1)
        assert full == 10
        assert last == pytest.approx(0.05)

    def test_short_final_step(self, make_state, params):
        T = 3.5 * params.dt
        seen = []
        ledger = run('uv', make_state('uv'), params, T, observers=[lambda prev, nxt, report: seen.append(nxt.t)])
        assert ledger.completed_steps == 4
        assert seen[-1] == pytest.approx(T)
        assert ledger.records[-1].t == pytest.approx(T)

    def test_observers_see_every_step(self, make_state, params):
        calls = []
        run('uv-ad', make_state('uv-ad'), params, 3 * params.dt,
            observers=[lambda prev, nxt, report: calls.append((prev.n, nxt.n, isinstance(report, StepReport)))])
        assert calls == [(0, 1, True), (1, 2, True), (2, 3, True)]

    def test_uvs_sigma_is_initialised(self, smooth_fields, params):
        u0, v0 = smooth_fields
        ledger = run('uvs', SchemeState(u0, v0), params, 2 * params.dt)
        assert ledger.ok
        assert not np.isnan(ledger.records[-1].E_usigma)

    def test_failure_is_recorded_not_raised(self, make_state, params, monkeypatch):
        calls = {'n': 0}

        def flaky(state, step_params):
            calls['n'] += 1
            if calls['n'] == 3:
                raise DivergedRunError("blew up")
            return schemes.uv_step(state, step_params)

        monkeypatch.setitem(schemes.SCHEMES, 'uv', flaky)
        ledger = run('uv', make_state('uv'), params, 10 * params.dt)
        assert not ledger.ok
        assert ledger.failure.step == 3
        assert ledger.failure.kind == 'DivergedRunError'
        assert ledger.completed_steps == 2

    def test_picard_cap_is_a_recorded_failure(self, make_state, make_params, mesh):
        params = make_params(mesh, dt=1e-4, c_tol=1e-15, max_iter=1)
        ledger = run('uv-nd', make_state('uv-nd'), params, 2e-4)
        assert ledger.failure.kind == 'NonConvergenceError'
        assert ledger.failure.step == 1

    def test_unknown_scheme(self, make_state, params):
        with pytest.raises(ConfigError):
            run('uv-xx', make_state('uv'), params, 1e-3)

    @pytest.mark.parametrize('scheme_id', SCHEME_IDS)
    def test_ledger_invariants(self, scheme_id, make_state, params):
        seen = []
        ledger = run(scheme_id, make_state(scheme_id), params, 10 * params.dt,
                     observers=[lambda prev, nxt, report: seen.append(nxt.u.min())])
        frame = ledger.to_frame()
        assert ledger.ok
        assert len(frame) == ledger.completed_steps + 1 == 11
        np.testing.assert_allclose(frame['mass'], frame['mass'].iloc[0], rtol=1e-10)
        assert ledger.global_min_u == min([frame['min_u'].iloc[0], *seen])
        assert ledger.weak_estimate_holds
        assert ledger.counters['max_principle_violations'] == 0
        assert np.all(np.diff(frame['max_v']) <= 1e-12 * frame['max_v'].iloc[0])
        assert ledger.counters['energy_inequality_violations'] == 0


def test_maximum_principle_on_example_i(make_params):
    mesh = Mesh1D.from_h(0.0, 1.0, 1e-3)
    params = make_params(mesh, dt=1e-6, chi=100.0, mu=1000.0)
    u0 = interpolate(lambda x: 1.0001 + np.cos(5 * np.pi * x), mesh)
    v0 = interpolate(lambda x: 1.0001 + np.cos(2 * np.pi * x), mesh)
    ledger = run('uv', initial_state('uv', u0, v0), params, 200 * params.dt)
    frame = ledger.to_frame()
    assert (frame['min_v'] > 0).all()
    assert np.all(np.diff(frame['max_v']) <= 0)
    assert ledger.counters['max_principle_violations'] == 0
