# utils/mesh_fe.py
"""Uniform 1D meshes, P1 finite-element fields and the discrete inner products built on them."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from utils.errors import DivergedRunError, MeshMismatchError, NonNestedMeshError

# element quadrature for products of P1 fields; exact up to degree 5
GAUSS_ORDER = 3


@dataclass(frozen=True)
class Mesh1D:
    """Uniform partition of [a, b] into J nodes and J - 1 elements of length h."""

    a: float
    b: float
    J: int

    def __post_init__(self):
        if int(self.J) != self.J or self.J < 2:
            raise ValueError(f"Mesh1D needs at least 2 nodes, got J={self.J}")
        if not self.b > self.a:
            raise ValueError(f"Mesh1D needs a < b, got [{self.a}, {self.b}]")
        object.__setattr__(self, 'J', int(self.J))
        object.__setattr__(self, 'a', float(self.a))
        object.__setattr__(self, 'b', float(self.b))

    @classmethod
    def from_h(cls, a: float, b: float, h: float) -> 'Mesh1D':
        n_elements = int(round((b - a) / h))
        if n_elements < 1 or not np.isclose(n_elements * h, b - a, rtol=1e-9, atol=0.0):
            raise ValueError(f"h={h} does not divide [{a}, {b}] into whole elements")
        return cls(a, b, n_elements + 1)

    @property
    def h(self) -> float:
        return (self.b - self.a) / (self.J - 1)

    @property
    def n_elements(self) -> int:
        return self.J - 1

    @property
    def length(self) -> float:
        return self.b - self.a

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.a + self.h * np.arange(self.J)
        x[-1] = self.b
        x.flags.writeable = False
        return x

    @cached_property
    def lumped_weights(self) -> np.ndarray:
        # exact integral of each hat function: h inside, h/2 at both ends
        w = np.full(self.J, self.h)
        w[0] = w[-1] = 0.5 * self.h
        w.flags.writeable = False
        return w

    @cached_property
    def control_volumes(self) -> np.ndarray:
        """Edges x_{j-1/2}, x_{j+1/2} of every control volume K_j, shape (J, 2)."""
        mid = 0.5 * (self.nodes[:-1] + self.nodes[1:])
        left = np.concatenate(([self.a], mid))
        right = np.concatenate((mid, [self.b]))
        edges = np.column_stack((left, right))
        edges.flags.writeable = False
        return edges


def _frozen_values(values, expected: int, kind: str) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True).reshape(-1)
    if arr.size != expected:
        raise ValueError(f"{kind} expects {expected} values, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.count_nonzero(~np.isfinite(arr)))
        raise DivergedRunError(f"{kind} holds {bad} non-finite value(s)")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class NodalField:
    """P1 coefficients, one per mesh node."""

    mesh: Mesh1D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_values(self.values, self.mesh.J, 'NodalField'))

    def __len__(self):
        return self.mesh.J

    def __add__(self, other: 'NodalField') -> 'NodalField':
        _same_mesh(self, other)
        return NodalField(self.mesh, self.values + other.values)

    def __sub__(self, other: 'NodalField') -> 'NodalField':
        _same_mesh(self, other)
        return NodalField(self.mesh, self.values - other.values)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> 'NodalField':
        """Nodal interpolant I_h(fn(self))."""
        return NodalField(self.mesh, fn(self.values))

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())

    @classmethod
    def constant(cls, mesh: Mesh1D, c: float) -> 'NodalField':
        return cls(mesh, np.full(mesh.J, float(c)))


@dataclass(frozen=True, eq=False)
class CellField:
    """Piecewise-constant values, one per element."""

    mesh: Mesh1D
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_values(self.values, self.mesh.n_elements, 'CellField'))

    def __len__(self):
        return self.mesh.n_elements

    def __sub__(self, other: 'CellField') -> 'CellField':
        _same_mesh(self, other)
        return CellField(self.mesh, self.values - other.values)


def _same_mesh(f, g):
    if f.mesh != g.mesh:
        raise MeshMismatchError(f"fields live on different meshes: {f.mesh} vs {g.mesh}")


def interpolate(f: Callable[[np.ndarray], np.ndarray], mesh: Mesh1D) -> NodalField:
    """Nodal P1 interpolation I_h f. ``f`` is called once with the array of node coordinates."""
    values = np.asarray(f(mesh.nodes), dtype=float)
    return NodalField(mesh, np.broadcast_to(values, (mesh.J,)))


def lumped_inner(f: NodalField, g: NodalField) -> float:
    """(f, g)_h = integral of I_h(f g), i.e. the trapezoidal rule on the nodal product."""
    _same_mesh(f, g)
    return float(np.dot(f.mesh.lumped_weights, f.values * g.values))


def gradient(f: NodalField) -> CellField:
    return CellField(f.mesh, np.diff(f.values) / f.mesh.h)


def l2_norm(f: NodalField) -> float:
    """Exact L2 norm of the P1 interpolant (consistent mass matrix)."""
    left, right = f.values[:-1], f.values[1:]
    per_element = f.mesh.h / 3.0 * (left * left + left * right + right * right)
    return float(np.sqrt(per_element.sum()))


def cell_l2_norm(g: CellField) -> float:
    return float(np.sqrt(g.mesh.h * np.dot(g.values, g.values)))


def lumped_norm(f: NodalField) -> float:
    return float(np.sqrt(lumped_inner(f, f)))


def h1_norm(f: NodalField) -> float:
    return float(np.hypot(l2_norm(f), cell_l2_norm(gradient(f))))


def nesting_ratio(fine: Mesh1D, coarse: Mesh1D) -> int | None:
    """Number of fine elements per coarse element, or None when the meshes are not nested."""
    if not (np.isclose(fine.a, coarse.a) and np.isclose(fine.b, coarse.b)):
        return None
    ratio, remainder = divmod(fine.n_elements, coarse.n_elements)
    if remainder or ratio < 1:
        return None
    return ratio


def restrict(fine: NodalField, coarse_mesh: Mesh1D) -> NodalField:
    """Copy fine values at the nodes shared with ``coarse_mesh``."""
    ratio = nesting_ratio(fine.mesh, coarse_mesh)
    if ratio is None:
        raise NonNestedMeshError(
            f"mesh with J={coarse_mesh.J} is not nested in mesh with J={fine.mesh.J} on [{fine.mesh.a}, {fine.mesh.b}]")
    return NodalField(coarse_mesh, fine.values[::ratio])


def transfer(fine: NodalField, coarse_mesh: Mesh1D) -> NodalField:
    """Restrict when nested, otherwise evaluate the fine P1 interpolant at the coarse nodes."""
    if nesting_ratio(fine.mesh, coarse_mesh) is not None:
        return restrict(fine, coarse_mesh)
    if not (np.isclose(fine.mesh.a, coarse_mesh.a) and np.isclose(fine.mesh.b, coarse_mesh.b)):
        raise NonNestedMeshError("meshes cover different domains")
    return NodalField(coarse_mesh, np.interp(coarse_mesh.nodes, fine.mesh.nodes, fine.values))


def gauss_points(mesh: Mesh1D, order: int = GAUSS_ORDER):
    """Gauss-Legendre abscissae mapped to every element plus the reference weights scaled by h/2.

    Returns (xi, weights, left_shape) where ``left_shape`` holds the value of the left hat
    function at each reference point; evaluating a P1 field at the points is then
    ``left * phi_l + right * (1 - phi_l)``.
    """
    from scipy.special import roots_legendre

    xi, wts = roots_legendre(order)
    phi_left = 0.5 * (1.0 - xi)
    return xi, 0.5 * mesh.h * wts, phi_left


def at_gauss_points(f: NodalField | np.ndarray, phi_left: np.ndarray) -> np.ndarray:
    """Values of a P1 field at the element quadrature points, shape (n_elements, n_points)."""
    values = f.values if isinstance(f, NodalField) else np.asarray(f, dtype=float)
    left, right = values[:-1, None], values[1:, None]
    return left * phi_left[None, :] + right * (1.0 - phi_left[None, :])
