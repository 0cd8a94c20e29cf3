"""Simplicial meshes of the material domain, quadrature and mesh file I/O."""

from __future__ import annotations

import itertools
import math
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import (
    DanglingNodeError,
    EmptyMeshError,
    MeshFormatError,
    NonPositiveCellError,
    PreconditionError,
)

__all__ = [
    "Mesh",
    "generate_disk_mesh",
    "generate_ball_mesh",
    "load_mesh",
    "save_mesh",
    "quadrature",
    "simplex_rule",
    "facet_rule",
]


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Mesh:
    """Simplicial mesh with positively oriented cells.

    Attributes
    ----------
    nodes : ndarray, shape (N, dim)
    cells : ndarray, shape (C, dim + 1)
    boundary_facets : ndarray, shape (B, dim)
    facet_cells : ndarray, shape (B,)
        Index of the cell owning each boundary facet.
    """

    def __init__(self, nodes, cells, boundary_facets=None, facet_cells=None):
        nodes = np.asarray(nodes, dtype=float)
        cells = np.asarray(cells)
        if nodes.ndim != 2 or nodes.shape[1] not in (2, 3):
            raise MeshFormatError("nodes must have shape (N, 2) or (N, 3)")
        dim = nodes.shape[1]
        if cells.size == 0:
            raise EmptyMeshError("mesh has no cells")
        if cells.ndim != 2 or cells.shape[1] != dim + 1:
            raise MeshFormatError(f"cells must have {dim + 1} node indices each")
        if cells.min() < 0 or cells.max() >= len(nodes):
            bad = int(np.argmax((cells < 0).any(axis=1) | (cells >= len(nodes)).any(axis=1)))
            raise DanglingNodeError(f"cell {bad} references a node index outside [0, {len(nodes)})")
        self.nodes = _frozen(nodes, float)
        self.cells = _frozen(cells, np.int64)
        vols = self.signed_volumes
        if (vols <= 0.0).any():
            bad = int(np.argmax(vols <= 0.0))
            raise NonPositiveCellError(bad, vols[bad])
        faces, owners = self._find_boundary()
        if boundary_facets is None:
            boundary_facets, facet_cells = faces, owners
        else:
            boundary_facets = np.asarray(boundary_facets, dtype=np.int64).reshape(-1, dim)
            facet_cells = np.asarray(facet_cells, dtype=np.int64).reshape(-1)
            if boundary_facets.size and (boundary_facets.min() < 0 or boundary_facets.max() >= len(nodes)):
                raise DanglingNodeError("boundary facet references a node index out of range")
            if facet_cells.size and (facet_cells.min() < 0 or facet_cells.max() >= len(cells)):
                raise DanglingNodeError("boundary facet references a cell index out of range")
            given = {(tuple(sorted(f)), int(c)) for f, c in zip(boundary_facets.tolist(), facet_cells.tolist())}
            found = {(tuple(f), int(c)) for f, c in zip(faces.tolist(), owners.tolist())}
            if given != found or len(given) != len(boundary_facets):
                raise MeshFormatError("boundary facets do not match the boundary of the cell complex")
        self.boundary_facets = _frozen(boundary_facets, np.int64)
        self.facet_cells = _frozen(facet_cells, np.int64)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def _find_boundary(self):
        d = self.dim
        local = list(itertools.combinations(range(d + 1), d))
        faces = np.sort(self.cells[:, local], axis=2).reshape(-1, d)
        owner = np.repeat(np.arange(self.num_cells), len(local))
        uniq, inverse, counts = np.unique(faces, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        if (counts > 2).any():
            raise MeshFormatError("non-manifold mesh: a facet is shared by more than two cells")
        once = counts[inverse] == 1
        order = np.lexsort(faces[once].T[::-1])
        return faces[once][order], owner[once][order]

    @property
    def facet_counts(self):
        """Number of cells sharing each distinct facet."""
        d = self.dim
        local = list(itertools.combinations(range(d + 1), d))
        faces = np.sort(self.cells[:, local], axis=2).reshape(-1, d)
        _, counts = np.unique(faces, axis=0, return_counts=True)
        return counts

    @cached_property
    def _jacobians(self):
        p = self.nodes[self.cells]
        return np.swapaxes(p[:, 1:, :] - p[:, :1, :], 1, 2)

    @cached_property
    def signed_volumes(self):
        return np.linalg.det(self._jacobians) / math.factorial(self.dim)

    @property
    def volumes(self):
        return self.signed_volumes

    @cached_property
    def gradients(self):
        """Gradients of the barycentric basis functions, shape (C, dim + 1, dim)."""
        inv = np.linalg.inv(self._jacobians)
        grads = np.empty((self.num_cells, self.dim + 1, self.dim))
        grads[:, 1:, :] = inv
        grads[:, 0, :] = -inv.sum(axis=1)
        grads.setflags(write=False)
        return grads

    @property
    def total_volume(self):
        return float(self.volumes.sum())

    @cached_property
    def facet_normals(self):
        """Unnormalized outward normals scaled by the facet measure."""
        p = self.nodes[self.boundary_facets]
        if self.dim == 2:
            t = p[:, 1] - p[:, 0]
            n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        else:
            n = 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        cell_centroid = self.nodes[self.cells[self.facet_cells]].mean(axis=1)
        facet_centroid = p.mean(axis=1)
        sign = np.sign(np.einsum("na,na->n", n, facet_centroid - cell_centroid))
        return n * sign[:, None]

    @property
    def facet_measures(self):
        return np.linalg.norm(self.facet_normals, axis=1)

    @property
    def conormals(self):
        """Outward Euclidean unit conormals ``M_a`` of the boundary facets."""
        n = self.facet_normals
        return n / np.linalg.norm(n, axis=1)[:, None]

    @property
    def boundary_measure(self):
        return float(self.facet_measures.sum())

    def edges(self):
        local = list(itertools.combinations(range(self.dim + 1), 2))
        e = np.sort(self.cells[:, local], axis=2).reshape(-1, 2)
        return np.unique(e, axis=0)

    def max_edge_length(self):
        e = self.edges()
        return float(np.linalg.norm(self.nodes[e[:, 1]] - self.nodes[e[:, 0]], axis=1).max())

    def origin_node(self, tol=1e-12):
        """Index of the node at the coordinate origin, or ``None``."""
        r = np.linalg.norm(self.nodes, axis=1)
        i = int(np.argmin(r))
        scale = max(1.0, float(r.max()))
        return i if r[i] <= tol * scale else None

    def scaled(self, factor):
        """The mesh of ``factor * Omega`` with identical connectivity."""
        return Mesh(self.nodes * factor, self.cells, self.boundary_facets, self.facet_cells)

    def locate(self, points, tol=1e-10):
        """Cell index and barycentric coordinates of each point (brute force)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inv = np.linalg.inv(self._jacobians)
        p0 = self.nodes[self.cells[:, 0]]
        cells = np.empty(len(pts), dtype=np.int64)
        bary = np.empty((len(pts), self.dim + 1))
        for n, y in enumerate(pts):
            lam = np.einsum("cab,cb->ca", inv, y - p0)
            full = np.concatenate([1.0 - lam.sum(axis=1, keepdims=True), lam], axis=1)
            score = full.min(axis=1)
            c = int(np.argmax(score))
            if score[c] < -tol:
                raise PreconditionError(f"point {y.tolist()} lies outside the mesh")
            cells[n] = c
            bary[n] = full[c]
        return cells, bary

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (
            np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.cells, other.cells)
            and np.array_equal(self.boundary_facets, other.boundary_facets)
            and np.array_equal(self.facet_cells, other.facet_cells)
        )

    def __repr__(self):
        return f"Mesh(dim={self.dim}, nodes={self.num_nodes}, cells={self.num_cells}, boundary={len(self.boundary_facets)})"


def _orient(nodes, cells):
    p = nodes[cells]
    jac = np.swapaxes(p[:, 1:, :] - p[:, :1, :], 1, 2)
    neg = np.linalg.det(jac) < 0
    cells = cells.copy()
    cells[neg, 0], cells[neg, 1] = cells[neg, 1], cells[neg, 0].copy()
    return cells


def generate_disk_mesh(radius: float, target_h: float) -> Mesh:
    """Polar-ring triangulation of the disk of ``radius`` centred at the origin.

    Ring ``k`` sits at radius ``k * radius / n`` with ``6 k`` equally spaced
    nodes; node 0 is the origin, rings follow outward in ascending angle.
    """
    if not (radius > 0 and target_h > 0 and target_h < radius):
        raise PreconditionError("need 0 < target_h < radius")
    n = math.ceil(radius / target_h - 1e-12)
    nodes = [(0.0, 0.0)]
    start = [0]
    for k in range(1, n + 1):
        start.append(len(nodes))
        r = radius * k / n
        for j in range(6 * k):
            t = 2.0 * math.pi * j / (6 * k)
            nodes.append((r * math.cos(t), r * math.sin(t)))
    nodes[-6 * n:] = [(radius * math.cos(2.0 * math.pi * j / (6 * n)), radius * math.sin(2.0 * math.pi * j / (6 * n))) for j in range(6 * n)]
    cells = []
    for j in range(6):
        cells.append((0, start[1] + j, start[1] + (j + 1) % 6))
    for k in range(2, n + 1):
        m_in, m_out = 6 * (k - 1), 6 * k
        i = j = 0
        while i < m_in or j < m_out:
            inner, outer = start[k - 1] + i % m_in, start[k] + j % m_out
            nxt_in, nxt_out = start[k - 1] + (i + 1) % m_in, start[k] + (j + 1) % m_out
            # advance along the ring whose new diagonal is shorter
            d_out = math.dist(nodes[inner], nodes[nxt_out])
            d_in = math.dist(nodes[nxt_in], nodes[outer])
            if j < m_out and (i >= m_in or d_out < d_in - 1e-12 * radius):
                cells.append((inner, outer, start[k] + (j + 1) % m_out))
                j += 1
            else:
                cells.append((inner, outer, start[k - 1] + (i + 1) % m_in))
                i += 1
    nodes = np.array(nodes)
    return Mesh(nodes, _orient(nodes, np.array(cells, dtype=np.int64)))


def generate_ball_mesh(radius: float, target_h: float) -> Mesh:
    """Layered tetrahedralization of the ball of ``radius`` centred at the origin.

    A cubic lattice on ``[-1, 1]^3`` is split into six tetrahedra per cube
    along the diagonal pointing away from the origin; the cube shell
    ``max|p| = s`` is then mapped radially onto the sphere of radius
    ``s * radius``.  The origin is a node.
    """
    if not (radius > 0 and target_h > 0 and target_h < radius):
        raise PreconditionError("need 0 < target_h < radius")
    n = math.ceil(radius / target_h - 1e-12)
    idx = np.arange(-n, n + 1)
    grid = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1).reshape(-1, 3)
    # order nodes shell by shell (origin first)
    shell = np.abs(grid).max(axis=1)
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0], shell))
    grid = grid[order]
    lookup = {tuple(p): i for i, p in enumerate(grid.tolist())}
    p = grid / n
    s = np.abs(p).max(axis=1)
    r = np.linalg.norm(p, axis=1)
    scale = np.divide(s, r, out=np.zeros_like(s), where=r > 0)
    nodes = radius * p * scale[:, None]
    cells = []
    for c in itertools.product(range(-n, n), repeat=3):
        near = np.array([ci if ci >= 0 else ci + 1 for ci in c])
        step = np.array([1 if ci >= 0 else -1 for ci in c])
        for perm in itertools.permutations(range(3)):
            v = near.copy()
            tet = [lookup[tuple(v)]]
            for axis in perm:
                v = v.copy()
                v[axis] += step[axis]
                tet.append(lookup[tuple(v)])
            cells.append(tet)
    return Mesh(nodes, _orient(nodes, np.array(cells, dtype=np.int64)))


# ---------------------------------------------------------------------------
# Quadrature


def _orbit(point):
    return sorted(set(itertools.permutations(point)))


def _tri_rules():
    a4, b4 = 0.445948490915965, 0.091576213509771
    return {
        1: [(1.0, (1 / 3, 1 / 3, 1 / 3))],
        2: [(1 / 3, (1 / 6, 1 / 6, 2 / 3))],
        4: [(0.223381589678011, (a4, a4, 1 - 2 * a4)), (0.109951743655322, (b4, b4, 1 - 2 * b4))],
    }


def _tet_rules():
    a2 = 0.1381966011250105
    a = 0.0455037041256496
    c1, c2 = 0.0927352503108912, 0.3108859192633006
    return {
        1: [(1.0, (0.25, 0.25, 0.25, 0.25))],
        2: [(0.25, (a2, a2, a2, 1 - 3 * a2))],
        4: [
            (6 * 0.007091003462846911, (a, a, 0.5 - a, 0.5 - a)),
            (6 * 0.01224884051939366, (c1, c1, c1, 1 - 3 * c1)),
            (6 * 0.01878132095300264, (c2, c2, c2, 1 - 3 * c2)),
        ],
    }


def simplex_rule(dim, order):
    """Barycentric points and weights (summing to one) on the reference simplex.

    Supported orders are 1, 2 and 4 in dimensions 1, 2 and 3.
    """
    if order not in (1, 2, 4):
        raise PreconditionError(f"unsupported quadrature order {order}; use 1, 2 or 4")
    if dim == 1:
        npts = {1: 1, 2: 2, 4: 3}[order]
        x, w = np.polynomial.legendre.leggauss(npts)
        t = 0.5 * (x + 1.0)
        return np.stack([1.0 - t, t], axis=1), 0.5 * w
    rules = {2: _tri_rules, 3: _tet_rules}.get(dim)
    if rules is None:
        raise PreconditionError(f"no simplex rule in dimension {dim}")
    bary, w = [], []
    for wt, pt in rules()[order]:
        for q in _orbit(pt):
            bary.append(q)
            w.append(wt)
    bary = np.array(bary)
    w = np.array(w)
    return bary, w / w.sum()


def quadrature(mesh: Mesh, order: int = 2):
    """Physical quadrature points and weights for every cell.

    Returns ``(points, weights, bary)`` with shapes (C, Q, dim), (C, Q) and
    (Q, dim + 1); the weights of each cell sum to its volume.
    """
    bary, w = simplex_rule(mesh.dim, order)
    pts = np.einsum("qk,ckd->cqd", bary, mesh.nodes[mesh.cells])
    return pts, mesh.volumes[:, None] * w[None, :], bary


def facet_rule(mesh: Mesh, order: int = 2):
    """Quadrature on boundary facets: ``(points, weights, bary)``."""
    bary, w = simplex_rule(mesh.dim - 1, order)
    pts = np.einsum("qk,fkd->fqd", bary, mesh.nodes[mesh.boundary_facets])
    return pts, mesh.facet_measures[:, None] * w[None, :], bary


# ---------------------------------------------------------------------------
# File I/O


def save_mesh(mesh: Mesh, path) -> None:
    lines = [f"dim {mesh.dim}", f"nodes {mesh.num_nodes}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in mesh.nodes]
    lines.append(f"cells {mesh.num_cells}")
    lines += [" ".join(str(int(v)) for v in row) for row in mesh.cells]
    lines.append(f"boundary {len(mesh.boundary_facets)}")
    lines += [
        " ".join(str(int(v)) for v in row) + f" {int(c)}"
        for row, c in zip(mesh.boundary_facets, mesh.facet_cells)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def _header(lines, pos, key):
    if pos >= len(lines):
        raise MeshFormatError(f"unexpected end of file, expected '{key} <count>'")
    parts = lines[pos].split()
    if len(parts) != 2 or parts[0] != key:
        raise MeshFormatError(f"line {pos + 1}: expected '{key} <count>', got {lines[pos]!r}")
    try:
        count = int(parts[1])
    except ValueError:
        raise MeshFormatError(f"line {pos + 1}: count {parts[1]!r} is not an integer") from None
    if count < 0:
        raise MeshFormatError(f"line {pos + 1}: negative count")
    return count


def _block(lines, pos, count, width, conv, what):
    if pos + count > len(lines):
        raise MeshFormatError(f"{what}: expected {count} lines, file ends early")
    rows = []
    for i in range(pos, pos + count):
        parts = lines[i].split()
        if len(parts) != width:
            raise MeshFormatError(f"line {i + 1}: {what} entry needs {width} values, got {len(parts)}")
        try:
            rows.append([conv(v) for v in parts])
        except ValueError:
            raise MeshFormatError(f"line {i + 1}: cannot parse {what} entry {lines[i]!r}") from None
    return rows


def load_mesh(path) -> Mesh:
    """Read a mesh file; see :func:`save_mesh` for the layout."""
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    dim = _header(lines, 0, "dim")
    if dim not in (2, 3):
        raise MeshFormatError(f"unsupported dimension {dim}")
    n_nodes = _header(lines, 1, "nodes")
    nodes = _block(lines, 2, n_nodes, dim, float, "node")
    pos = 2 + n_nodes
    n_cells = _header(lines, pos, "cells")
    cells = _block(lines, pos + 1, n_cells, dim + 1, int, "cell")
    pos += 1 + n_cells
    n_bdry = _header(lines, pos, "boundary")
    bdry = _block(lines, pos + 1, n_bdry, dim + 1, int, "boundary")
    if pos + 1 + n_bdry != len(lines):
        raise MeshFormatError("trailing content after boundary section")
    if n_cells == 0:
        raise EmptyMeshError("mesh has no cells")
    bdry = np.array(bdry, dtype=np.int64).reshape(-1, dim + 1)
    return Mesh(
        np.array(nodes, dtype=float).reshape(-1, dim),
        np.array(cells, dtype=np.int64),
        bdry[:, :dim],
        bdry[:, dim],
    )
