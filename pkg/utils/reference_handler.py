# utils/reference_handler.py
import logging
import os

import joblib
import numpy as np

from utils.data_loader import read_snapshot
from utils.errors import ConfigError
from utils.mesh_fe import Mesh1D, NodalField

logger = logging.getLogger(__name__)


def save_reference(path, u, v, meta=None):
    """
    Persist a reference solution for later EOC studies.

    Args:
        path (str): Target ``.joblib`` file.
        u (NodalField): Reference cell density.
        v (NodalField): Reference chemical concentration on the same mesh.
        meta (dict): Free-form description (scheme, h, dt, T, preset).
    """
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.exists(directory):
        os.makedirs(directory)
    mesh = u.mesh
    payload = {'a': mesh.a, 'b': mesh.b, 'J': mesh.J,
               'u': np.asarray(u.values), 'v': np.asarray(v.values), 'meta': dict(meta or {})}
    joblib.dump(payload, path)
    logger.info("saved reference (J=%d) to %s", mesh.J, path)
    return path


def load_reference(path):
    """
    Load a reference written by ``save_reference``, or a ``u`` snapshot CSV whose ``v`` twin sits next to it.

    Returns:
        tuple: (u, v, meta) with u, v as NodalField.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Reference file not found at: {path}")
    if path.endswith('.csv'):
        return _load_snapshot_pair(path)
    payload = joblib.load(path)
    try:
        mesh = Mesh1D(payload['a'], payload['b'], payload['J'])
        return NodalField(mesh, payload['u']), NodalField(mesh, payload['v']), payload.get('meta', {})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path} is not a reference file: {exc}") from exc


def _load_snapshot_pair(u_path):
    directory, name = os.path.split(u_path)
    if not name.startswith('u_'):
        raise ConfigError(f"reference snapshot must be a u_*.csv file, got {name}")
    v_path = os.path.join(directory, 'v_' + name[2:])
    x, u = read_snapshot(u_path)
    x_v, v = read_snapshot(v_path)
    if len(x) != len(x_v) or not np.allclose(x, x_v):
        raise ConfigError(f"{u_path} and {v_path} are sampled on different nodes")
    mesh = Mesh1D(x[0], x[-1], len(x))
    if not np.allclose(mesh.nodes, x, rtol=0.0, atol=1e-12 * mesh.length):
        raise ConfigError(f"{u_path} is not sampled on a uniform mesh")
    return NodalField(mesh, u), NodalField(mesh, v), {'source': u_path}
