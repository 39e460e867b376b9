"""Bilinear-quad finite elements for plane-stress elasticity and conduction."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .grid import ELASTIC, THERMAL, TOProblem

YOUNG = 1.0
POISSON = 0.3
CONDUCTIVITY = 1.0
# void floors of the material interpolation
ELASTIC_FLOOR = 1e-9
THERMAL_FLOOR = 1e-3

PCG_TOL = 1e-8


class FemError(RuntimeError):
    pass


class SingularSystemError(FemError):
    pass


class SolverError(FemError):
    pass


_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
# natural coordinates of the element nodes, counter-clockwise from lower-left
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


def _shape_gradients(xi, eta):
    """dN/dx, dN/dy at a point of a unit square element (Jacobian = I/2)."""
    dn_dxi = 0.25 * _XI * (1 + eta * _ETA)
    dn_deta = 0.25 * _ETA * (1 + xi * _XI)
    return 2.0 * dn_dxi, 2.0 * dn_deta


@functools.lru_cache(maxsize=None)
def element_stiffness(physics: str) -> np.ndarray:
    """Unit-material element matrix by 2x2 Gauss integration.

    Node order is counter-clockwise from the lower-left corner; elastic DOFs
    are interleaved ``(u0, v0, u1, v1, ...)``.
    """
    det_j = 0.25
    if physics == THERMAL:
        ke = np.zeros((4, 4))
        for xi in _GAUSS:
            for eta in _GAUSS:
                gx, gy = _shape_gradients(xi, eta)
                ke += CONDUCTIVITY * (np.outer(gx, gx) + np.outer(gy, gy)) * det_j
    elif physics == ELASTIC:
        nu = POISSON
        d = YOUNG / (1 - nu ** 2) * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
        ke = np.zeros((8, 8))
        for xi in _GAUSS:
            for eta in _GAUSS:
                gx, gy = _shape_gradients(xi, eta)
                b = np.zeros((3, 8))
                b[0, 0::2] = gx
                b[1, 1::2] = gy
                b[2, 0::2] = gy
                b[2, 1::2] = gx
                ke += b.T @ d @ b * det_j
    else:
        raise ValueError(f"unknown physics {physics!r}")
    ke = 0.5 * (ke + ke.T)
    ke.setflags(write=False)
    return ke


@dataclass(frozen=True)
class _Mesh:
    edof: np.ndarray     # (n_elem, dofs per element)
    rows: np.ndarray     # COO pattern
    cols: np.ndarray
    n_dof: int


@functools.lru_cache(maxsize=32)
def _mesh(width: int, height: int, dpn: int) -> _Mesh:
    node = np.arange((height + 1) * (width + 1)).reshape(height + 1, width + 1)
    ll = node[1:, :-1].ravel()
    lr = node[1:, 1:].ravel()
    ur = node[:-1, 1:].ravel()
    ul = node[:-1, :-1].ravel()
    corners = np.stack([ll, lr, ur, ul], axis=1)
    if dpn == 2:
        edof = np.empty((corners.shape[0], 8), dtype=np.int64)
        edof[:, 0::2] = 2 * corners
        edof[:, 1::2] = 2 * corners + 1
    else:
        edof = corners.astype(np.int64)
    k = edof.shape[1]
    rows = np.repeat(edof, k, axis=1).ravel()
    cols = np.tile(edof, (1, k)).ravel()
    return _Mesh(edof, rows, cols, node.size * dpn)


def material_scale(density: np.ndarray, penal: float, physics: str) -> np.ndarray:
    """Modified SIMP interpolation ``floor + x^p (1 - floor)``."""
    floor = ELASTIC_FLOOR if physics == ELASTIC else THERMAL_FLOOR
    return floor + np.asarray(density) ** penal * (1.0 - floor)


def fixed_dofs(problem: TOProblem) -> np.ndarray:
    dpn = problem.dofs_per_node
    f = problem.bc.fixed
    node = f[:, 0] * (problem.width + 1) + f[:, 1]
    return np.unique(node * dpn + f[:, 2])


def load_vector(problem: TOProblem) -> np.ndarray:
    mesh = _mesh(problem.width, problem.height, problem.dofs_per_node)
    f = np.zeros(mesh.n_dof)
    ld = problem.loads
    if len(ld.nodes):
        node = ld.nodes[:, 0] * (problem.width + 1) + ld.nodes[:, 1]
        np.add.at(f, node * problem.dofs_per_node + ld.directions, ld.magnitudes)
    if ld.source is not None:
        # unit elements: each node takes a quarter of the element's heat
        np.add.at(f, mesh.edof.ravel(), np.repeat(ld.source.ravel() / 4.0, 4))
    return f


def assemble(problem: TOProblem, density: np.ndarray, penal: float) -> sp.csr_matrix:
    mesh = _mesh(problem.width, problem.height, problem.dofs_per_node)
    ke = element_stiffness(problem.physics)
    scale = material_scale(density, penal, problem.physics).ravel()
    vals = (scale[:, None] * ke.ravel()[None, :]).ravel()
    k = sp.coo_matrix((vals, (mesh.rows, mesh.cols)), shape=(mesh.n_dof, mesh.n_dof))
    return k.tocsr()


def pcg(a, b, *, x0=None, tol=PCG_TOL, maxiter=None):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``|b - A x| <= tol |b|``. Returns ``(x, iterations)``; raises
    :class:`SolverError` when the iteration cap is hit first.
    """
    n = b.shape[0]
    maxiter = 10 * n if maxiter is None else maxiter
    diag = a.diagonal()
    if np.any(diag <= 0):
        raise SingularSystemError("non-positive diagonal entry; matrix is not SPD")
    inv_d = 1.0 / diag
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - a @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0
    stop = tol * bnorm
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        if np.linalg.norm(r) <= stop:
            return x, it - 1
        ap = a @ p
        pap = p @ ap
        if pap <= 0:
            raise SingularSystemError("matrix is not positive definite")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= stop:
        return x, maxiter
    raise SolverError(f"PCG did not converge in {maxiter} iterations")


def direct_solve(a, b):
    """Sparse LU with a symmetric ordering (matrix is SPD)."""
    lu = splu(sp.csc_matrix(a), permc_spec="MMD_AT_PLUS_A",
              options=dict(SymmetricMode=True))
    return lu.solve(b)


@dataclass
class FemSolution:
    nodal: np.ndarray
    compliance: float
    energy: np.ndarray
    iterations: int = 0


def assemble_and_solve(problem: TOProblem, density: np.ndarray, penal: float = 3.0, *,
                       solver: str = "pcg", x0: np.ndarray | None = None,
                       tol: float = PCG_TOL) -> FemSolution:
    """Solve ``K(x) u = f`` and return nodal values, compliance and element energies.

    Elastic compliance and element energies carry the 1/2 factor
    (``C = u.f / 2``); thermal ones do not (``C = t.f``). In both cases the
    compliance is the sum of the element energies. ``solver`` is ``"pcg"``
    or ``"direct"``; ``x0`` warm-starts PCG with a previous full nodal vector.
    """
    density = np.asarray(density, dtype=np.float64)
    if density.shape != problem.domain.shape:
        raise ValueError(f"density shape {density.shape} != domain {problem.domain.shape}")
    if penal < 1:
        raise ValueError("penal must be >= 1")
    fixed = fixed_dofs(problem)
    if fixed.size == 0:
        raise SingularSystemError("no fixed degrees of freedom")
    if not np.any(density[problem.domain.active] > 0):
        raise SingularSystemError("all-void density")

    mesh = _mesh(problem.width, problem.height, problem.dofs_per_node)
    k = assemble(problem, density, penal)
    f = load_vector(problem)
    free = np.setdiff1d(np.arange(mesh.n_dof), fixed)
    u = np.zeros(mesh.n_dof)
    u[fixed] = problem.bc.prescribed_value
    rhs = f[free]
    if problem.bc.prescribed_value != 0.0:
        rhs = rhs - k[free][:, fixed] @ u[fixed]
    kff = k[free][:, free]

    iters = 0
    if solver == "pcg":
        guess = None if x0 is None else np.asarray(x0)[free]
        u[free], iters = pcg(kff, rhs, x0=guess, tol=tol)
    elif solver == "direct":
        u[free] = direct_solve(kff, rhs)
    else:
        raise ValueError(f"unknown solver {solver!r}")
    if not np.all(np.isfinite(u)):
        raise SingularSystemError("solution is not finite")

    ke = element_stiffness(problem.physics)
    ue = u[mesh.edof]
    scale = material_scale(density, penal, problem.physics).ravel()
    energy = scale * np.einsum("ei,ij,ej->e", ue, ke, ue)
    if problem.physics == ELASTIC:
        energy *= 0.5
        compliance = 0.5 * float(u @ f)
    else:
        compliance = float(u @ f)
    energy = np.maximum(energy, 0.0).reshape(problem.domain.shape)
    return FemSolution(u, compliance, energy, iters)


def total_volume(density: np.ndarray, problem: TOProblem | None = None) -> float:
    density = np.asarray(density)
    if problem is None:
        return float(density.sum())
    return float(density[problem.domain.active].sum())
