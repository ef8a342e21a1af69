import numpy as np
import pytest

from src.schemes import PhysicalParams, SchemeParams, SolverParams, initial_state
from utils.mesh_fe import Mesh1D, interpolate


@pytest.fixture
def mesh():
    return Mesh1D(0.0, 1.0, 41)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture
def make_params():
    def _make(mesh, dt=1e-5, chi=1.0, mu=10.0, **solver):
        return SchemeParams(PhysicalParams(chi, mu), SolverParams.for_mesh(mesh, dt, **solver))
    return _make


@pytest.fixture
def params(mesh, make_params):
    return make_params(mesh)


@pytest.fixture
def smooth_fields(mesh):
    u0 = interpolate(lambda x: 1.5 + 0.5 * np.cos(np.pi * x), mesh)
    v0 = interpolate(lambda x: 2.0 + np.cos(2.0 * np.pi * x), mesh)
    return u0, v0


@pytest.fixture
def make_state(smooth_fields):
    def _make(scheme_id):
        u0, v0 = smooth_fields
        return initial_state(scheme_id, u0, v0)
    return _make
