# utils/linalg.py
"""Tridiagonal operators assembled from P1 bilinear forms on a 1D mesh, and their direct solve."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack

from utils.errors import DivergedRunError, MeshMismatchError, SingularSystemError
from utils.mesh_fe import CellField, Mesh1D, NodalField

logger = logging.getLogger(__name__)

PIVOT_RTOL = 1e-14
RESIDUAL_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class TriDiagMatrix:
    """Band storage: ``lower[i] = A[i+1, i]``, ``diag[i] = A[i, i]``, ``upper[i] = A[i, i+1]``."""

    mesh: Mesh1D
    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        J = self.mesh.J
        for name, expected in (('lower', J - 1), ('diag', J), ('upper', J - 1)):
            band = np.array(getattr(self, name), dtype=float).reshape(-1)
            if band.size != expected:
                raise ValueError(f"TriDiagMatrix.{name} needs {expected} entries, got {band.size}")
            if not np.all(np.isfinite(band)):
                raise DivergedRunError(f"TriDiagMatrix.{name} holds non-finite entries")
            band.flags.writeable = False
            object.__setattr__(self, name, band)

    @classmethod
    def zeros(cls, mesh: Mesh1D) -> 'TriDiagMatrix':
        return cls(mesh, np.zeros(mesh.J - 1), np.zeros(mesh.J), np.zeros(mesh.J - 1))

    @classmethod
    def from_dense(cls, mesh: Mesh1D, A: np.ndarray) -> 'TriDiagMatrix':
        A = np.asarray(A, dtype=float)
        return cls(mesh, np.diagonal(A, -1), np.diagonal(A), np.diagonal(A, 1))

    def _check(self, other: 'TriDiagMatrix'):
        if other.mesh != self.mesh:
            raise MeshMismatchError("operators assembled on different meshes")

    def __add__(self, other: 'TriDiagMatrix') -> 'TriDiagMatrix':
        self._check(other)
        return TriDiagMatrix(self.mesh, self.lower + other.lower, self.diag + other.diag, self.upper + other.upper)

    def __sub__(self, other: 'TriDiagMatrix') -> 'TriDiagMatrix':
        self._check(other)
        return TriDiagMatrix(self.mesh, self.lower - other.lower, self.diag - other.diag, self.upper - other.upper)

    def __mul__(self, scalar: float) -> 'TriDiagMatrix':
        return TriDiagMatrix(self.mesh, scalar * self.lower, scalar * self.diag, scalar * self.upper)

    __rmul__ = __mul__

    def __truediv__(self, scalar: float) -> 'TriDiagMatrix':
        return self * (1.0 / scalar)

    def __neg__(self) -> 'TriDiagMatrix':
        return self * -1.0

    def __matmul__(self, x):
        values = x.values if isinstance(x, NodalField) else np.asarray(x, dtype=float)
        y = self.diag * values
        y[:-1] += self.upper * values[1:]
        y[1:] += self.lower * values[:-1]
        return y

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.lower, -1) + np.diag(self.upper, 1)

    def norm_inf(self) -> float:
        row = np.abs(self.diag).copy()
        row[:-1] += np.abs(self.upper)
        row[1:] += np.abs(self.lower)
        return float(row.max())

    def column_sums(self) -> np.ndarray:
        col = self.diag.copy()
        col[:-1] += self.lower
        col[1:] += self.upper
        return col

    def with_dirichlet_rows(self, rows=(0, -1)) -> 'TriDiagMatrix':
        """Identity rows for homogeneous Dirichlet nodes, decoupled from their neighbours.

        The column couplings are dropped as well, so the pivoted LU never swaps a
        boundary row and the boundary unknowns come out exactly zero for a zero rhs.
        """
        lower, diag, upper = self.lower.copy(), self.diag.copy(), self.upper.copy()
        J = self.mesh.J
        for r in rows:
            r = r % J
            diag[r] = 1.0
            if r > 0:
                lower[r - 1] = 0.0
                upper[r - 1] = 0.0
            if r < J - 1:
                upper[r] = 0.0
                lower[r] = 0.0
        return TriDiagMatrix(self.mesh, lower, diag, upper)


def _from_element_blocks(mesh: Mesh1D, a11, a12, a21, a22) -> TriDiagMatrix:
    """Scatter per-element 2x2 blocks [[a11, a12], [a21, a22]] (row = test node) into band storage."""
    n = mesh.n_elements
    a11, a12, a21, a22 = (np.broadcast_to(np.asarray(b, dtype=float), (n,)) for b in (a11, a12, a21, a22))
    diag = np.zeros(mesh.J)
    diag[:-1] += a11
    diag[1:] += a22
    return TriDiagMatrix(mesh, a21, diag, a12)


def _cell_values(mesh: Mesh1D, weights) -> np.ndarray:
    if isinstance(weights, CellField):
        if weights.mesh != mesh:
            raise MeshMismatchError("cell weights live on a different mesh")
        return weights.values
    if weights is None:
        return np.ones(mesh.n_elements)
    return np.broadcast_to(np.asarray(weights, dtype=float), (mesh.n_elements,))


def _nodal_values(mesh: Mesh1D, weights) -> np.ndarray:
    if isinstance(weights, NodalField):
        if weights.mesh != mesh:
            raise MeshMismatchError("nodal weights live on a different mesh")
        return weights.values
    return np.broadcast_to(np.asarray(weights, dtype=float), (mesh.J,))


def assemble_stiffness(mesh: Mesh1D) -> TriDiagMatrix:
    return assemble_weighted_stiffness(mesh, None)


def assemble_weighted_stiffness(mesh: Mesh1D, cell_weights=None) -> TriDiagMatrix:
    """(c grad u, grad ubar) with c constant on each element."""
    c = _cell_values(mesh, cell_weights) / mesh.h
    return _from_element_blocks(mesh, c, -c, -c, c)


def assemble_lumped_mass(mesh: Mesh1D) -> TriDiagMatrix:
    return assemble_reaction(mesh, 1.0)


def assemble_reaction(mesh: Mesh1D, nodal_weights) -> TriDiagMatrix:
    """Lumped (c u, ubar)_h: diagonal with entries w_j c_j."""
    c = _nodal_values(mesh, nodal_weights)
    J = mesh.J
    return TriDiagMatrix(mesh, np.zeros(J - 1), mesh.lumped_weights * c, np.zeros(J - 1))


def assemble_consistent_mass(mesh: Mesh1D) -> TriDiagMatrix:
    h = mesh.h
    return _from_element_blocks(mesh, h / 3.0, h / 6.0, h / 6.0, h / 3.0)


def assemble_gauss_weighted_mass(mesh: Mesh1D, coeff_at_points: np.ndarray, weights: np.ndarray,
                                 phi_left: np.ndarray) -> TriDiagMatrix:
    """(c u, ubar) integrated with the element quadrature rule; ``coeff_at_points`` has shape (n_elements, n_points)."""
    c = np.asarray(coeff_at_points, dtype=float)
    pl = phi_left[None, :]
    pr = 1.0 - pl
    w = weights[None, :]
    a11 = (c * pl * pl * w).sum(axis=1)
    a12 = (c * pl * pr * w).sum(axis=1)
    a22 = (c * pr * pr * w).sum(axis=1)
    return _from_element_blocks(mesh, a11, a12, a12, a22)


def assemble_convection(mesh: Mesh1D, cell_weights) -> TriDiagMatrix:
    """(u g, grad ubar) for cell-constant g and P1 trial u.

    Every column sums to zero, so the form vanishes for ubar = 1.
    """
    half = 0.5 * _cell_values(mesh, cell_weights)
    return _from_element_blocks(mesh, -half, -half, half, half)


_FORMS = {
    'stiffness': assemble_weighted_stiffness,
    'convection': assemble_convection,
    'reaction': assemble_reaction,
}


def assemble_weighted_ops(mesh: Mesh1D, form: str, weights) -> TriDiagMatrix:
    """Assemble one of the weighted forms.

    Args:
        mesh (Mesh1D): Mesh the operator lives on.
        form (str): ``'convection'`` for (u g, grad ubar), ``'stiffness'`` for (c grad u, grad ubar),
            ``'reaction'`` for the lumped (c u, ubar)_h.
        weights: CellField / per-element array for the first two forms, NodalField / per-node array
            for the reaction form.

    Returns:
        TriDiagMatrix: The assembled operator.
    """
    try:
        builder = _FORMS[form]
    except KeyError:
        raise ValueError(f"unknown form '{form}', expected one of {sorted(_FORMS)}") from None
    return builder(mesh, weights)


def check_conservative(A: TriDiagMatrix, mass: TriDiagMatrix, dt: float, tol: float = 1e-12) -> float:
    """Largest column sum of A - mass/dt relative to the scale of A; logs when above ``tol``."""
    drift = (A - mass / dt).column_sums()
    scale = max(A.norm_inf(), 1.0)
    worst = float(np.abs(drift).max() / scale)
    if worst > tol:
        logger.warning("Step-1 operator is not conservative: relative column sum %.3e", worst)
    return worst


def solve(A: TriDiagMatrix, rhs, step: int | None = None, t: float | None = None) -> np.ndarray:
    """Solve A x = rhs with LAPACK's pivoted tridiagonal LU.

    Raises:
        DivergedRunError: rhs holds NaN or Inf.
        SingularSystemError: a pivot is below 1e-14 ||A||_inf or the residual check fails.
    """
    b = rhs.values if isinstance(rhs, NodalField) else np.asarray(rhs, dtype=float)
    if not np.all(np.isfinite(b)):
        raise DivergedRunError("right-hand side holds non-finite values"
                               + (f" (step {step})" if step is not None else ''))
    norm_a = A.norm_inf()
    dl, d, du, du2, ipiv, info = lapack.dgttrf(A.lower.copy(), A.diag.copy(), A.upper.copy())
    if info < 0:
        raise SingularSystemError(f"dgttrf rejected argument {-info}", step, t)
    if info > 0 or np.min(np.abs(d)) < PIVOT_RTOL * norm_a:
        raise SingularSystemError(f"near-zero pivot, min |u_ii| = {np.min(np.abs(d)):.3e}", step, t)

    x, info = lapack.dgttrs(dl, d, du, du2, ipiv, b.copy())
    if info != 0:
        raise SingularSystemError(f"dgttrs failed with info={info}", step, t)
    if not np.all(np.isfinite(x)):
        raise DivergedRunError("linear solve produced non-finite values"
                               + (f" (step {step})" if step is not None else ''))

    residual = np.max(np.abs(A @ x - b))
    bound = RESIDUAL_RTOL * (norm_a * np.max(np.abs(x)) + np.max(np.abs(b)))
    if residual > bound:
        raise SingularSystemError(f"residual {residual:.3e} exceeds {bound:.3e}", step, t)
    return x
