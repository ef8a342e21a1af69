# utils/potentials.py
"""Truncated entropy potentials and the element-wise sensitivity coefficient.

Every function accepts scalars or numpy arrays and is evaluated branch-wise with
``np.where``; the outer branches are the quadratic C1 continuations of the middle
branch at u = eps and u = 1/eps.
"""
import numpy as np

from utils.mesh_fe import CellField, NodalField


def _branches(u, eps):
    u = np.asarray(u, dtype=float)
    return u, u < eps, u > 1.0 / eps


def _scalar(result, u):
    return float(result) if np.ndim(u) == 0 else result


# G_eps: truncation of -log(u) + 1/eps


def g_eps_second(u, eps):
    u, low, high = _branches(u, eps)
    safe = np.where(low | high, 1.0, u)
    out = np.where(low, 1.0 / eps**2, np.where(high, eps**2, 1.0 / safe**2))
    return _scalar(out, u)


def g_eps_prime(u, eps):
    u, low, high = _branches(u, eps)
    safe = np.where(low | high, 1.0, u)
    out = np.where(
        low, -1.0 / eps + (u - eps) / eps**2,
        np.where(high, -eps + eps**2 * (u - 1.0 / eps), -1.0 / safe))
    return _scalar(out, u)


def g_eps(u, eps):
    u, low, high = _branches(u, eps)
    safe = np.where(low | high, 1.0, u)
    lo = u - eps
    hi = u - 1.0 / eps
    out = np.where(
        low, -np.log(eps) + 1.0 / eps - lo / eps + lo**2 / (2.0 * eps**2),
        np.where(high, np.log(eps) + 1.0 / eps - eps * hi + 0.5 * eps**2 * hi**2,
                 -np.log(safe) + 1.0 / eps))
    return _scalar(out, u)


# F_eps: truncation of u log u - u + 1


def a_eps(u, eps):
    u = np.asarray(u, dtype=float)
    out = np.clip(u, eps, 1.0 / eps)
    return _scalar(out, u)


def f_eps_second(u, eps):
    return _scalar(1.0 / np.asarray(a_eps(u, eps)), np.asarray(u))


def f_eps_prime(u, eps):
    u, low, high = _branches(u, eps)
    safe = np.where(low | high, 1.0, u)
    log_eps = np.log(eps)
    out = np.where(
        low, log_eps + (u - eps) / eps,
        np.where(high, -log_eps + eps * (u - 1.0 / eps), np.log(safe)))
    return _scalar(out, u)


def _f_middle(u):
    return u * np.log(u) - u + 1.0


def f_eps(u, eps):
    u, low, high = _branches(u, eps)
    safe = np.where(low | high, 1.0, u)
    log_eps = np.log(eps)
    lo = u - eps
    hi = u - 1.0 / eps
    out = np.where(
        low, _f_middle(eps) + log_eps * lo + lo**2 / (2.0 * eps),
        np.where(high, _f_middle(1.0 / eps) - log_eps * hi + 0.5 * eps * hi**2,
                 _f_middle(safe)))
    return _scalar(out, u)


def pos_part(u):
    return _scalar(np.maximum(np.asarray(u, dtype=float), 0.0), u)


def neg_part(u):
    return _scalar(np.minimum(np.asarray(u, dtype=float), 0.0), u)


def lambda_eps(u: NodalField, eps: float) -> CellField:
    """Element-wise Lambda with (Lambda * dG')**2 = du * dG', where G' = I_h g_eps_prime(u).

    The sign follows the element midpoint value (ties count as positive); elements with
    equal end values take that value.
    """
    values = u.values
    left, right = values[:-1], values[1:]
    du = right - left
    gp = g_eps_prime(values, eps)
    dg = np.diff(gp)
    sign = np.where(left + right >= 0.0, 1.0, -1.0)

    flat = du == 0.0
    # dg can underflow to zero for tiny du in the outer branches; use the limit there
    degenerate = ~flat & (dg == 0.0)
    regular = ~flat & ~degenerate
    safe_dg = np.where(regular, dg, 1.0)
    radicand = np.where(regular, du * safe_dg, 0.0)

    out = np.empty_like(du)
    out[regular] = sign[regular] * np.sqrt(radicand[regular]) / np.abs(safe_dg[regular])
    mid = 0.5 * (left + right)
    out[degenerate] = sign[degenerate] / np.sqrt(g_eps_second(mid[degenerate], eps))
    out[flat] = left[flat]
    return CellField(u.mesh, out)
