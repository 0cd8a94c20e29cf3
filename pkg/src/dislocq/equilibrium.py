"""Discrete energy, its gradient, the doped outer iteration and rescaling.

The unknown is the nodal displacement ``psi`` of ``phi = id + psi`` on P1
elements.  On each cell ``F = I + grad psi`` is constant; at every
quadrature point the configuration is ``gamma = E^T F^T F E`` with the frame
``E`` sampled there, and

    E_h(psi) = sum_cells sum_q w_q sqrt(det h(y_q)) e(gamma_q).

The outer iteration freezes the flat Hessian ``A`` and solves
``A psi_{n+1} = A psi_n - grad E_h(psi_n)`` after doping the right-hand side
with a Killing field so that the pure-traction problem is solvable.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .constitutive import EnergyModel, energy_gradient, thermodynamic_stress
from .errors import DivergenceError, DomainError, InvertedElementError, PreconditionError
from .geometry import EuclideanMetric, HeisenbergChart, HyperbolicMetric, MetricField
from .linear import (
    DisplacementField,
    KillingBasis,
    assemble_flat_operator,
    assemble_mass,
    dope,
    gauge_fix,
    killing_basis,
    projected_cg,
)
from .mesh import Mesh, quadrature

__all__ = [
    "ProblemSpec",
    "IterationReport",
    "CellFields",
    "edge_problem",
    "screw_problem",
    "discrete_energy",
    "weak_residual",
    "projected_norm",
    "gradient_check",
    "outer_iteration",
    "solve_screw_3d",
    "rescale_solution",
    "RescaledSolution",
    "cell_fields",
    "decomposition",
    "EPSILON_MAX",
]

EPSILON_MAX = 0.2


def _env_threads():
    raw = os.environ.get("DISLOCQ_THREADS", "").strip()
    if not raw:
        return 0
    try:
        return max(0, int(raw))
    except ValueError:
        raise PreconditionError(f"DISLOCQ_THREADS must be an integer, got {raw!r}") from None


def _chunks(n, threads):
    if threads <= 1 or n < 2 * threads:
        return [slice(0, n)]
    bounds = np.linspace(0, n, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def _map_cells(func, n, threads):
    """Evaluate ``func(slice)`` over contiguous cell chunks and concatenate in order."""
    parts = _chunks(n, threads)
    if len(parts) == 1:
        return func(parts[0])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        out = list(pool.map(func, parts))
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class ProblemSpec:
    """Everything that defines one instance of the nonlinear problem.

    ``metric`` must provide ``frames(points) -> (h, E)`` with ``E`` an
    ``h``-orthonormal frame; it is sampled once at the quadrature points.
    """

    mesh: Mesh
    metric: MetricField | HeisenbergChart
    model: EnergyModel = field(default_factory=EnergyModel.isotropic)
    epsilon: float = 0.0
    outer_tol: float = 1e-11
    linear_tol: float = 1e-12
    max_outer: int = 50
    quadrature_order: int = 2
    threads: int | None = None
    epsilon_max: float = EPSILON_MAX

    def __post_init__(self):
        if self.mesh.dim != getattr(self.metric, "dim", self.mesh.dim):
            raise PreconditionError("metric and mesh dimensions differ")
        if self.outer_tol <= 0 or self.linear_tol <= 0 or self.max_outer < 1:
            raise PreconditionError("tolerances must be positive and max_outer >= 1")
        self.model.weights(self.mesh.dim)
        if self.mesh.origin_node() is None:
            raise PreconditionError("the coordinate origin must be a mesh node")

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def n_threads(self):
        return _env_threads() if self.threads is None else self.threads

    @cached_property
    def samples(self):
        """Quadrature data ``(weights * sqrt(det h), frames)`` of shapes (C, Q), (C, Q, d, d)."""
        pts, w, _ = quadrature(self.mesh, self.quadrature_order)
        C, Q, d = pts.shape
        h, E = self.metric.frames(pts.reshape(-1, d))
        h = np.asarray(h).reshape(C, Q, d, d)
        E = np.asarray(E).reshape(C, Q, d, d)
        wq = w * np.sqrt(np.linalg.det(h))
        wq.setflags(write=False)
        E.setflags(write=False)
        return wq, E

    @cached_property
    def weights(self):
        return self.model.weights(self.dim)

    @cached_property
    def flat_operator(self):
        return assemble_flat_operator(self.mesh, self.weights)

    @cached_property
    def mass(self):
        return assemble_mass(self.mesh)

    @cached_property
    def basis(self) -> KillingBasis:
        return killing_basis(self.mesh)

    @cached_property
    def h1_operator(self):
        return (self.flat_operator + self.mass).tocsr()


def edge_problem(mesh: Mesh, epsilon: float, **kwargs) -> ProblemSpec:
    """Uniform edge dislocations: hyperbolic metric of curvature ``-epsilon^2``, toy energy."""
    if mesh.dim != 2:
        raise PreconditionError("the edge problem needs a 2d mesh")
    metric = HyperbolicMetric(epsilon) if epsilon > 0 else EuclideanMetric(2)
    return ProblemSpec(mesh, metric, EnergyModel.isotropic(), epsilon=float(epsilon), **kwargs)


def screw_problem(mesh: Mesh, beta: float, alpha: float = 1.0, beta_w: float = 1.0,
                  chart_radius: float = 0.5, flat: bool = False, **kwargs) -> ProblemSpec:
    """Uniform screw dislocations in Heisenberg normal coordinates, anisotropic energy.

    ``flat=True`` replaces the chart metric and frame by the identity.
    """
    if mesh.dim != 3:
        raise PreconditionError("the screw problem needs a 3d mesh")
    if not (alpha > 0 and beta_w > 0):
        raise PreconditionError("alpha and beta_w must be positive")
    if flat:
        metric = EuclideanMetric(3)
    else:
        metric = HeisenbergChart(beta=beta, radius=chart_radius)
        r = float(np.linalg.norm(mesh.nodes, axis=1).max())
        if r > chart_radius * (1.0 + 1e-9):
            raise DomainError(f"mesh extends to |y| = {r:.6g}, beyond the chart radius {chart_radius}")
    return ProblemSpec(mesh, metric, EnergyModel.anisotropic(alpha, beta_w), **kwargs)


# ---------------------------------------------------------------------------
# Energy and gradient


def _as_values(spec: ProblemSpec, psi):
    if isinstance(psi, DisplacementField):
        psi = psi.values
    return np.asarray(psi, dtype=float).reshape(spec.mesh.num_nodes, spec.dim)


def _deformation_gradients(spec: ProblemSpec, values, cells=slice(None)):
    mesh = spec.mesh
    grads = np.einsum("cki,cka->cia", values[mesh.cells[cells]], mesh.gradients[cells])
    F = grads + np.eye(spec.dim)
    det = np.linalg.det(F)
    if (det <= 0.0).any():
        local = int(np.argmax(det <= 0.0))
        cell = int(np.arange(mesh.num_cells)[cells][local])
        raise InvertedElementError(cell, f"cell {cell} is inverted (det F = {det[local]:.3e})", values)
    return F


def _gamma(F, E):
    m = np.einsum("cia,cib->cab", F, F)
    return np.einsum("cqaA,cab,cqbB->cqAB", E, m, E)


def _cell_energies(spec: ProblemSpec, values, cells):
    wq, E = spec.samples
    F = _deformation_gradients(spec, values, cells)
    gamma = _gamma(F, E[cells])
    d = gamma - np.eye(spec.dim)
    e = 0.5 * np.einsum("cqab,ab,cqab->cq", d, spec.weights, d)
    return np.einsum("cq,cq->c", wq[cells], e)


def cell_energies(spec: ProblemSpec, psi) -> np.ndarray:
    """Energy contribution of every cell."""
    values = _as_values(spec, psi)
    return _map_cells(lambda s: _cell_energies(spec, values, s), spec.mesh.num_cells, spec.n_threads)


def discrete_energy(spec: ProblemSpec, psi) -> float:
    """``E_h(psi)``; raises :class:`InvertedElementError` on an inverted cell."""
    return float(np.sum(cell_energies(spec, psi)))


def _cell_gradients(spec: ProblemSpec, values, cells):
    wq, E = spec.samples
    F = _deformation_gradients(spec, values, cells)
    gamma = _gamma(F, E[cells])
    G = spec.weights * (gamma - np.eye(spec.dim))
    P = np.einsum("cq,cqaA,cqAB,cqbB->cab", wq[cells], E[cells], G, E[cells])
    dEdF = 2.0 * np.einsum("cia,cab->cib", F, P)
    return np.einsum("cia,cka->cki", dEdF, spec.mesh.gradients[cells])


def weak_residual(spec: ProblemSpec, psi) -> np.ndarray:
    """Exact gradient of :func:`discrete_energy` with respect to nodal ``psi`` (flattened)."""
    values = _as_values(spec, psi)
    contrib = _map_cells(lambda s: _cell_gradients(spec, values, s), spec.mesh.num_cells, spec.n_threads)
    out = np.zeros((spec.mesh.num_nodes, spec.dim))
    np.add.at(out, spec.mesh.cells, contrib)
    return out.reshape(-1)


def projected_norm(spec: ProblemSpec, g) -> float:
    """Euclidean norm of ``g`` after removing its component along the nodal Killing fields."""
    q, _ = np.linalg.qr(spec.basis.nodal)
    g = np.asarray(g, dtype=float)
    return float(np.linalg.norm(g - q @ (q.T @ g)))


def _greedy_colors(mesh: Mesh):
    """Node colouring with no two nodes of one colour sharing a cell."""
    n = mesh.num_nodes
    neighbours = [set() for _ in range(n)]
    for cell in mesh.cells.tolist():
        for a in cell:
            neighbours[a].update(cell)
    color = np.full(n, -1)
    for v in range(n):
        used = {color[u] for u in neighbours[v] if u != v}
        c = 0
        while c in used:
            c += 1
        color[v] = c
    return color


def gradient_check(spec: ProblemSpec, psi, step=1e-6):
    """Compare :func:`weak_residual` with central differences of the energy.

    Nodes are grouped so that no two nodes of a group share a cell; a whole
    group is perturbed at once and the difference of each node's patch
    energy gives its derivative.  Returns ``(rel_error, g, g_fd)`` with
    ``rel_error = max|g - g_fd| / max|g|``.
    """
    mesh = spec.mesh
    values = _as_values(spec, psi)
    g = weak_residual(spec, values).reshape(-1, spec.dim)
    colors = _greedy_colors(mesh)
    fd = np.zeros_like(g)
    for c in range(colors.max() + 1):
        nodes = np.nonzero(colors == c)[0]
        mark = np.zeros(mesh.num_nodes, dtype=bool)
        mark[nodes] = True
        owner = np.where(mark[mesh.cells], mesh.cells, -1).max(axis=1)
        touched = owner >= 0
        for i in range(spec.dim):
            diffs = []
            for sgn in (1.0, -1.0):
                v = values.copy()
                v[nodes, i] += sgn * step
                diffs.append(_cell_energies(spec, v, np.nonzero(touched)[0]))
            per_cell = (diffs[0] - diffs[1]) / (2.0 * step)
            acc = np.zeros(mesh.num_nodes)
            np.add.at(acc, owner[touched], per_cell)
            fd[nodes, i] = acc[nodes]
    scale = np.abs(g).max()
    err = np.abs(g - fd).max() / scale if scale > 0 else float(np.abs(fd).max())
    return float(err), g.reshape(-1), fd.reshape(-1)


def decomposition(spec: ProblemSpec, psi):
    """Read-only split of the residual into ``F[id]``, ``A psi`` and the remainder."""
    values = _as_values(spec, psi).reshape(-1)
    f_id = weak_residual(spec, np.zeros_like(values))
    g = weak_residual(spec, values)
    lin = spec.flat_operator @ values
    return {"F_id": f_id, "A_psi": lin, "remainder": g - f_id - lin}


# ---------------------------------------------------------------------------
# Outer iteration


@dataclass
class IterationReport:
    """Per-iterate history of the outer iteration (row ``n`` is iterate ``n``)."""

    residuals: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    doping: list = field(default_factory=list)
    damping: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self):
        return len(self.residuals)

    @property
    def contraction_ratios(self):
        """``increment[n] / increment[n-1]`` for ``n >= 2`` (NaN when undefined)."""
        inc = np.asarray(self.increments, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return list(np.where(inc[:-1] > 0, inc[1:] / inc[:-1], np.nan))

    @property
    def max_doping(self):
        return float(np.abs(self.doping[-1]).max()) if self.doping else 0.0

    @property
    def final_residual(self):
        return float(self.residuals[-1]) if self.residuals else float("nan")

    def rows(self):
        for n in range(self.iterations):
            yield [n + 1, self.residuals[n], self.increments[n], self.energies[n], *np.asarray(self.doping[n]).tolist()]

    def header(self):
        k = len(self.doping[0]) if self.doping else 0
        return ["n", "residual", "increment", "E_h"] + [f"c_{i + 1}" for i in range(k)]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows():
                writer.writerow([repr(float(v)) if not isinstance(v, int) else v for v in row])


def _step(spec: ProblemSpec, values):
    """One doped, frozen-Hessian update from ``values``; returns (new, c)."""
    A = spec.flat_operator
    flat = values.reshape(-1)
    rhs = A @ flat - weak_residual(spec, flat)
    doped, c, _ = dope(spec.basis, rhs, spec.mass)
    x, _ = projected_cg(A, doped, spec.basis.nodal, tol=spec.linear_tol)
    fixed, _ = gauge_fix(spec.basis, x)
    return fixed, c


def outer_iteration(spec: ProblemSpec, psi0=None):
    """Doped frozen-Hessian iteration from ``psi0`` (default zero).

    Converged when the H1 increment, the projected residual and the doping
    coefficients are all below ``spec.outer_tol``.

    Returns
    -------
    DisplacementField, IterationReport

    Raises
    ------
    DivergenceError
        ``max_outer`` iterations without convergence; carries the report.
    InvertedElementError
        An update still inverts a cell after ten halvings.
    """
    if not 0.0 <= spec.epsilon <= spec.epsilon_max:
        raise PreconditionError(f"epsilon={spec.epsilon} outside the admissible range [0, {spec.epsilon_max}]")
    mesh = spec.mesh
    values = np.zeros((mesh.num_nodes, spec.dim)) if psi0 is None else _as_values(spec, psi0).copy()
    report = IterationReport()
    for _ in range(spec.max_outer):
        new, c = _step(spec, values)
        delta = new - values
        halvings = 0
        while True:
            trial = values + delta
            try:
                g = weak_residual(spec, trial)
                energy = discrete_energy(spec, trial)
                break
            except InvertedElementError as exc:
                halvings += 1
                if halvings > 10:
                    raise InvertedElementError(exc.cell, f"update inverts cell {exc.cell} after 10 halvings", trial) from None
                delta = 0.5 * delta
        dflat = delta.reshape(-1)
        inc = math.sqrt(max(float(dflat @ (spec.h1_operator @ dflat)), 0.0))
        values = trial
        res = projected_norm(spec, g)
        report.residuals.append(res)
        report.increments.append(inc)
        report.energies.append(energy)
        report.doping.append(np.asarray(c))
        report.damping.append(halvings)
        tol = spec.outer_tol
        if inc < tol and res < tol and float(np.abs(c).max()) < tol:
            report.converged = True
            return DisplacementField(mesh, values, {"report": report}), report
    raise DivergenceError(
        f"no convergence within {spec.max_outer} outer iterations "
        f"(increment {report.increments[-1]:.3e}, residual {report.residuals[-1]:.3e})",
        report,
        DisplacementField(mesh, values),
    )


def solve_screw_3d(spec: ProblemSpec, psi0=None):
    """Outer iteration for the anisotropic problem in Heisenberg normal coordinates."""
    if spec.dim != 3 or spec.model.kind != "anisotropic":
        raise PreconditionError("solve_screw_3d needs a 3d mesh and the anisotropic energy")
    if isinstance(spec.metric, HeisenbergChart):
        r = float(np.linalg.norm(spec.mesh.nodes, axis=1).max())
        if r > spec.metric.radius * (1.0 + 1e-9):
            raise DomainError(f"mesh extends to |y| = {r:.6g}, beyond the chart radius {spec.metric.radius}")
    return outer_iteration(spec, psi0)


# ---------------------------------------------------------------------------
# Stresses per cell


@dataclass(frozen=True)
class CellFields:
    """Cell-centroid stresses ``S``, ``T`` and energy density per unit volume."""

    S: np.ndarray
    T: np.ndarray
    energy_density: np.ndarray
    centroids: np.ndarray


def cell_fields(spec: ProblemSpec, psi) -> CellFields:
    """Material stress ``S = E pi E^T``, spatial stress ``T = F S F^T`` and ``e`` at centroids."""
    mesh = spec.mesh
    values = _as_values(spec, psi)
    F = _deformation_gradients(spec, values)
    centroids = mesh.nodes[mesh.cells].mean(axis=1)
    _, E = spec.metric.frames(centroids)
    E = np.asarray(E).reshape(-1, spec.dim, spec.dim)
    m = np.einsum("cia,cib->cab", F, F)
    gamma = np.einsum("caA,cab,cbB->cAB", E, m, E)
    pi = thermodynamic_stress(spec.model, gamma)
    S = np.einsum("caA,cAB,cbB->cab", E, pi, E)
    T = np.einsum("cia,cab,cjb->cij", F, S, F)
    G = energy_gradient(spec.model, gamma)
    e = 0.5 * np.einsum("cab,cab->c", G, gamma - np.eye(spec.dim))
    return CellFields(S=S, T=T, energy_density=e, centroids=centroids)


# ---------------------------------------------------------------------------
# Scaling


@dataclass(frozen=True)
class RescaledSolution:
    """``phi_l(y) = l phi(y / l)`` on the mesh of ``l Omega``.

    ``epsilon`` is the curvature scale of the problem it solves (``-epsilon^2``
    is the curvature).
    """

    field: DisplacementField
    scale: float
    epsilon: float | None

    @property
    def mesh(self):
        return self.field.mesh

    def spec(self, template: ProblemSpec) -> ProblemSpec:
        """The rescaled problem, copying model and tolerances from ``template``."""
        metric = HyperbolicMetric(self.epsilon) if self.epsilon else EuclideanMetric(self.mesh.dim)
        eps_max = max(template.epsilon_max, self.epsilon or 0.0)
        return replace(template, mesh=self.mesh, metric=metric, epsilon=self.epsilon or 0.0, epsilon_max=eps_max)


def rescale_solution(psi: DisplacementField, l: float, epsilon: float | None = None) -> RescaledSolution:
    """Transport a solution on ``Omega`` to ``l Omega``: nodes and values scale by ``l``."""
    if not l > 0:
        raise PreconditionError("scale factor must be positive")
    mesh = psi.mesh.scaled(l) if l != 1 else psi.mesh
    values = psi.values * l if l != 1 else psi.values.copy()
    eps = None if epsilon is None else epsilon / l
    return RescaledSolution(DisplacementField(mesh, values), float(l), eps)
