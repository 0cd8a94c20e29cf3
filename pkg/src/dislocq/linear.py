"""Flat linearized pure-traction elasticity on P1 elements.

Unknowns are nodal displacement vectors stored node-major: degree of freedom
``node * dim + i`` is the ``i``-th component at ``node``.

The flat operator ``A`` is the exact Hessian, at zero displacement, of the
discrete energy ``sum_cells vol * 1/2 sum_ab w_ab (gamma_ab - delta_ab)^2``.
For ``w = 1`` this gives ``psi^T A psi = int |d psi + d psi^T|^2``, and the
equation ``A psi = f`` with

    f = 2 (int_boundary tau . N - int rho . N)

is the Galerkin form of ``d_b (d_a X^b + d_b X^a) = rho`` in the domain with
``(d_a X^b + d_b X^a) M_b = tau`` on the boundary.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse

from .errors import PreconditionError, SolverError
from .mesh import Mesh, facet_rule, quadrature

__all__ = [
    "KillingBasis",
    "DisplacementField",
    "TractionProblem",
    "killing_basis",
    "assemble_flat_operator",
    "assemble_mass",
    "load_vector",
    "doping_coefficients",
    "dope",
    "projected_cg",
    "gauge_fix",
    "gauge_functionals",
    "solve_traction",
]


@dataclass(frozen=True)
class KillingBasis:
    """Euclidean Killing fields ``xi_A(y) = alpha_A y + beta_A`` on a mesh.

    Translations come first, then rotations in the planes (1,2), (1,3), (2,3).
    """

    mesh: Mesh
    alpha: np.ndarray
    beta: np.ndarray
    gram: np.ndarray

    @property
    def dim(self):
        return self.mesh.dim

    def __len__(self):
        return len(self.beta)

    def evaluate(self, points):
        """Values at ``points`` (..., dim); result shape (N, ..., dim)."""
        pts = np.asarray(points, dtype=float)
        return np.einsum("Aij,...j->A...i", self.alpha, pts) + self.beta.reshape(
            (len(self),) + (1,) * (pts.ndim - 1) + (self.dim,)
        )

    @property
    def nodal(self):
        """Nodal interpolants as columns of a (N_nodes * dim, N) matrix."""
        return self.evaluate(self.mesh.nodes).reshape(len(self), -1).T

    def combination(self, coeffs):
        """Nodal vector of ``sum_A c_A xi_A``."""
        return self.nodal @ np.asarray(coeffs, dtype=float)


def killing_basis(mesh: Mesh) -> KillingBasis:
    d = mesh.dim
    alphas, betas = [], []
    for i in range(d):
        alphas.append(np.zeros((d, d)))
        b = np.zeros(d)
        b[i] = 1.0
        betas.append(b)
    for a, b in itertools.combinations(range(d), 2):
        al = np.zeros((d, d))
        al[a, b] = -1.0
        al[b, a] = 1.0
        alphas.append(al)
        betas.append(np.zeros(d))
    alpha = np.array(alphas)
    beta = np.array(betas)
    pts, w, _ = quadrature(mesh, 2)
    vals = np.einsum("Aij,cqj->Acqi", alpha, pts) + beta[:, None, None, :]
    gram = np.einsum("Acqi,Bcqi,cq->AB", vals, vals, w)
    gram = 0.5 * (gram + gram.T)
    for arr in (alpha, beta, gram):
        arr.setflags(write=False)
    return KillingBasis(mesh, alpha, beta, gram)


@dataclass(frozen=True)
class DisplacementField:
    """Nodal displacement ``psi`` with ``phi = id + psi``."""

    mesh: Mesh
    values: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(self.mesh.num_nodes, self.mesh.dim)
        if not np.isfinite(v).all():
            raise PreconditionError("displacement contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def flat(self):
        return self.values.reshape(-1)

    def gradients(self):
        """Piecewise-constant ``d psi^i / d y^a`` per cell, shape (C, dim, dim)."""
        return np.einsum("cki,cka->cia", self.values[self.mesh.cells], self.mesh.gradients)

    def deformed_nodes(self):
        return self.mesh.nodes + self.values

    def max_norm(self):
        return float(np.abs(self.values).max()) if self.values.size else 0.0


@dataclass(frozen=True)
class TractionProblem:
    """Body force ``rho`` and boundary traction ``tau``.

    Each may be ``None`` (zero), a callable or an array.  A callable ``rho``
    maps points ``(..., dim)`` to vectors; a callable ``tau`` receives the
    boundary points and the outward unit conormals there.  Arrays are nodal
    (N, dim) for ``rho`` and per facet (B, dim) for ``tau``.
    """

    rho: Callable | np.ndarray | None = None
    tau: Callable | np.ndarray | None = None


def _element_matrices(mesh: Mesh, weights):
    B = mesh.gradients
    vol = mesh.volumes
    d = mesh.dim
    w = np.ones((d, d)) if weights is None else np.asarray(weights, dtype=float)
    eye = np.eye(d)
    # K[c, k, i, l, j] = 2 vol (delta_ij sum_a w_ia B_ka B_la + w_ij B_kj B_li)
    t1 = np.einsum("ij,ia,cka,cla->ckilj", eye, w, B, B)
    t2 = np.einsum("ij,ckj,cli->ckilj", w, B, B)
    K = 2.0 * vol[:, None, None, None, None] * (t1 + t2)
    n = (d + 1) * d
    return K.reshape(-1, n, n)


def _dof_map(mesh: Mesh):
    d = mesh.dim
    return (mesh.cells[:, :, None] * d + np.arange(d)[None, None, :]).reshape(mesh.num_cells, -1)


def _scatter(mesh: Mesh, Ke):
    dofs = _dof_map(mesh)
    n = dofs.shape[1]
    rows = np.repeat(dofs, n, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, n)).reshape(-1)
    size = mesh.num_nodes * mesh.dim
    return sparse.coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(size, size)).tocsr()


def assemble_flat_operator(mesh: Mesh, weights=None) -> sparse.csr_matrix:
    """Hessian at zero displacement of the flat discrete energy.

    ``weights`` is the symmetric matrix ``w_AB`` of the energy (all ones for
    the isotropic energy).  The result is exactly symmetric.
    """
    A = _scatter(mesh, _element_matrices(mesh, weights))
    A = 0.5 * (A + A.T)
    A.sum_duplicates()
    A.sort_indices()
    return A.tocsr()


def assemble_mass(mesh: Mesh) -> sparse.csr_matrix:
    """Consistent P1 mass matrix acting on vector fields (identity in components)."""
    d = mesh.dim
    local = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    Ke = np.einsum("c,kl,ij->ckilj", mesh.volumes, local, np.eye(d)).reshape(mesh.num_cells, (d + 1) * d, -1)
    return _scatter(mesh, Ke)


def _body_load(mesh: Mesh, rho):
    """``int rho . N`` for every nodal basis vector."""
    d = mesh.dim
    out = np.zeros((mesh.num_nodes, d))
    if rho is None:
        return out.reshape(-1)
    if callable(rho):
        pts, w, bary = quadrature(mesh, 2)
        vals = np.asarray(rho(pts), dtype=float)
        contrib = np.einsum("cq,qk,cqi->cki", w, bary, vals)
        np.add.at(out, mesh.cells, contrib)
        return out.reshape(-1)
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (mesh.num_nodes, d):
        raise PreconditionError(f"nodal rho must have shape {(mesh.num_nodes, d)}")
    return assemble_mass(mesh) @ rho.reshape(-1)


def _boundary_load(mesh: Mesh, tau):
    d = mesh.dim
    out = np.zeros((mesh.num_nodes, d))
    if tau is None:
        return out.reshape(-1)
    pts, w, bary = facet_rule(mesh, 2)
    if callable(tau):
        normals = np.broadcast_to(mesh.conormals[:, None, :], pts.shape)
        vals = np.asarray(tau(pts, normals), dtype=float)
    else:
        tau = np.asarray(tau, dtype=float)
        if tau.shape != (len(mesh.boundary_facets), d):
            raise PreconditionError(f"facet tau must have shape {(len(mesh.boundary_facets), d)}")
        vals = np.broadcast_to(tau[:, None, :], pts.shape)
    contrib = np.einsum("fq,qk,fqi->fki", w, bary, vals)
    np.add.at(out, mesh.boundary_facets, contrib)
    return out.reshape(-1)


def load_vector(mesh: Mesh, problem: TractionProblem) -> np.ndarray:
    """Right-hand side ``2 (int_boundary tau . N - int rho . N)`` before doping."""
    return 2.0 * (_boundary_load(mesh, problem.tau) - _body_load(mesh, problem.rho))


def _cholesky_solve(gram, rhs):
    try:
        L = np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise PreconditionError("Killing gram matrix is not positive definite (degenerate mesh)") from None
    return np.linalg.solve(L.T, np.linalg.solve(L, rhs))


def doping_coefficients(basis: KillingBasis, problem: TractionProblem | None = None, load=None):
    """Coefficients ``c`` of the Killing field added to ``rho``.

    ``sigma_A = int_boundary xi_A . tau - int xi_A . rho`` and ``M c = sigma``.
    Either a problem or an already assembled load vector may be given.

    Returns
    -------
    c, sigma : ndarray
    """
    if load is None:
        load = load_vector(basis.mesh, problem or TractionProblem())
    sigma = 0.5 * (basis.nodal.T @ load)
    return _cholesky_solve(basis.gram, sigma), sigma


def dope(basis: KillingBasis, load, mass=None):
    """Doped load vector, coefficients and sigma for an assembled load."""
    c, sigma = doping_coefficients(basis, load=load)
    mass = assemble_mass(basis.mesh) if mass is None else mass
    return load - 2.0 * (mass @ basis.combination(c)), c, sigma


class _KernelProjector:
    """Euclidean orthogonal projection off the span of nodal Killing fields."""

    def __init__(self, K):
        q, _ = np.linalg.qr(K)
        self.q = q

    def __call__(self, v):
        return v - self.q @ (self.q.T @ v)


def projected_cg(A, b, K, tol=1e-12, max_iter=None, x0=None):
    """Jacobi-preconditioned CG for ``A x = b`` on the complement of ``span K``.

    ``b`` is projected first; every iterate and search direction is
    re-projected.  Returns ``(x, residual_history)`` where the history holds
    relative residual norms.
    """
    project = _KernelProjector(K)
    b = project(np.asarray(b, dtype=float))
    n = b.size
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else project(np.array(x0, dtype=float))
    if bnorm == 0.0:
        return np.zeros(n), [0.0]
    diag = A.diagonal()
    inv_diag = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 1.0)
    r = project(b - A @ x)
    z = project(inv_diag * r)
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    for _ in range(max_iter):
        if history[-1] < tol:
            return x, history
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        step = rz / pAp
        x = project(x + step * p)
        r = project(r - step * Ap)
        history.append(np.linalg.norm(r) / bnorm)
        z = project(inv_diag * r)
        rz_new = r @ z
        p = project(z + (rz_new / rz) * p)
        rz = rz_new
    # the recursive residual can drift; confirm with a true residual
    true = np.linalg.norm(project(b - A @ x)) / bnorm
    if true < tol:
        return x, history
    raise SolverError(
        f"projected CG stalled at relative residual {history[-1]:.3e} after {len(history) - 1} iterations",
        history,
    )


def _origin_patch(mesh: Mesh):
    node = mesh.origin_node()
    if node is None:
        raise PreconditionError("the coordinate origin is not a mesh node; gauge fixing needs it")
    cells = np.nonzero((mesh.cells == node).any(axis=1))[0]
    return node, cells


def gauge_functionals(mesh: Mesh, values):
    """Gauge quantities of one or more nodal fields.

    Values ``psi(0)`` followed by ``d psi^b / d y^a`` for ``a < b`` from the
    volume-weighted mean gradient of the cells touching the origin.
    ``values`` has shape (..., N_nodes, dim); result (..., N).
    """
    node, cells = _origin_patch(mesh)
    v = np.asarray(values, dtype=float)
    vol = mesh.volumes[cells]
    grads = np.einsum("...cki,cka->...cia", v[..., mesh.cells[cells], :], mesh.gradients[cells])
    mean = np.einsum("...cia,c->...ia", grads, vol) / vol.sum()
    pairs = list(itertools.combinations(range(mesh.dim), 2))
    rot = np.stack([mean[..., b, a] for a, b in pairs], axis=-1)
    return np.concatenate([v[..., node, :], rot], axis=-1)


def gauge_fix(basis: KillingBasis, values):
    """Subtract the unique Killing field that zeroes the gauge functionals."""
    mesh = basis.mesh
    v = np.asarray(values, dtype=float).reshape(mesh.num_nodes, mesh.dim)
    nodal = basis.evaluate(mesh.nodes)
    G = gauge_functionals(mesh, nodal).T
    if abs(np.linalg.det(G)) < 1e-12:
        raise PreconditionError("gauge system is singular")
    a = np.linalg.solve(G, gauge_functionals(mesh, v))
    return v - np.einsum("A,Ani->ni", a, nodal), a


def solve_traction(mesh: Mesh, A, basis: KillingBasis, problem: TractionProblem, tol=1e-12, max_iter=None,
                   mass=None) -> DisplacementField:
    """Dope, solve and gauge-fix the flat pure-traction problem.

    The result's ``info`` holds the doping coefficients ``c``, ``sigma``, the
    CG residual history and the subtracted gauge coefficients.
    """
    load = load_vector(mesh, problem)
    if not np.isfinite(load).all():
        raise PreconditionError("problem data must be finite")
    doped, c, sigma = dope(basis, load, mass)
    x, history = projected_cg(A, doped, basis.nodal, tol=tol, max_iter=max_iter)
    fixed, gauge = gauge_fix(basis, x)
    return DisplacementField(mesh, fixed, {"c": c, "sigma": sigma, "residual_history": history, "gauge": gauge})
