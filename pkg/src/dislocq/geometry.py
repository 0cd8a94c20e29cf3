"""Material manifold geometry.

Frames and coframes of the two Lie groups that model uniform dislocation
distributions (the affine group for edge dislocations, the Heisenberg group
for screw dislocations), their dislocation densities, Burgers circuit
integrals, the hyperbolic metric in normal coordinates and a numerically
constructed normal chart for the left-invariant Heisenberg metric.

Index conventions: ``frame[a, A]`` holds the coordinate component ``a`` of
the frame vector ``E_A`` (frame vectors are columns), ``coframe[A, a]`` holds
``omega^A_a`` and ``structure[C, A, B]`` holds ``C^C_{AB}``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, PreconditionError

__all__ = [
    "MaterialFrame",
    "affine_frame",
    "heisenberg_frame",
    "heisenberg_frames",
    "dislocation_density",
    "BurgersResult",
    "burgers_circuit",
    "dislocation_flux",
    "load_curve",
    "square_circuit",
    "square_triangulation",
    "hyperbolic_f",
    "MetricField",
    "EuclideanMetric",
    "HyperbolicMetric",
    "hyperbolic_metric",
    "gaussian_curvature",
    "orthonormal_frames",
    "HeisenbergChart",
    "heisenberg_normal_chart",
    "heisenberg_frame_in_chart",
]


@dataclass(frozen=True)
class MaterialFrame:
    """Frame, coframe and structure constants of a crystalline structure at a point."""

    frame: np.ndarray
    coframe: np.ndarray
    structure: np.ndarray

    @property
    def dim(self) -> int:
        return self.frame.shape[0]


def _affine_structure():
    c = np.zeros((2, 2, 2))
    c[1, 0, 1] = 1.0
    c[1, 1, 0] = -1.0
    return c


def _heisenberg_structure(beta):
    c = np.zeros((3, 3, 3))
    c[2, 0, 1] = math.exp(beta)
    c[2, 1, 0] = -math.exp(beta)
    return c


def affine_frame(y) -> MaterialFrame:
    """Left-invariant frame of the affine group, ``E_1 = d/dy1``, ``E_2 = exp(y1) d/dy2``."""
    y = np.asarray(y, dtype=float)
    s = math.exp(y[0])
    frame = np.array([[1.0, 0.0], [0.0, s]])
    coframe = np.array([[1.0, 0.0], [0.0, 1.0 / s]])
    return MaterialFrame(frame, coframe, _affine_structure())


def heisenberg_frames(points, beta=0.0):
    """Vectorized Heisenberg frames and coframes at ``points`` of shape (n, 3).

    Returns ``(frame, coframe)`` with shapes (n, 3, 3).
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    n = p.shape[0]
    k = math.exp(beta)
    frame = np.zeros((n, 3, 3))
    frame[:, 0, 0] = 1.0
    frame[:, 1, 1] = 1.0
    frame[:, 2, 1] = p[:, 0]
    frame[:, 2, 2] = 1.0 / k
    coframe = np.zeros((n, 3, 3))
    coframe[:, 0, 0] = 1.0
    coframe[:, 1, 1] = 1.0
    coframe[:, 2, 1] = -k * p[:, 0]
    coframe[:, 2, 2] = k
    return frame, coframe


def heisenberg_frame(y, beta=0.0) -> MaterialFrame:
    """Orthonormal left-invariant frame of the Heisenberg metric with anisotropy ``beta``.

    ``E_1 = d/dx``, ``E_2 = d/dy + x d/dz``, ``E_3 = exp(-beta) d/dz``, so that
    ``[E_1, E_2] = exp(beta) E_3``.
    """
    frame, coframe = heisenberg_frames(np.asarray(y, dtype=float)[None, :], beta)
    return MaterialFrame(frame[0], coframe[0], _heisenberg_structure(beta))


def dislocation_density(frame: MaterialFrame) -> np.ndarray:
    """Components ``lambda^C_{ab}`` of the dislocation density 2-form."""
    return np.einsum("cAB,Aa,Bb->cab", frame.structure, frame.coframe, frame.coframe)


# ---------------------------------------------------------------------------
# Burgers circuits

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class BurgersResult:
    """Closure defect ``-oint nu`` of a circuit, in frame components."""

    vector: np.ndarray
    segments: int
    points_per_segment: int = 4
    rule: str = "gauss-legendre"


def burgers_circuit(frame_field: Callable[[np.ndarray], MaterialFrame], curve) -> BurgersResult:
    """Integrate the canonical form around a closed polyline.

    Parameters
    ----------
    frame_field : callable
        Maps a coordinate point to a :class:`MaterialFrame`.
    curve : array_like, shape (k, d)
        Polyline vertices; the first and the last vertex must coincide.

    Returns
    -------
    BurgersResult
        ``vector[A] = -oint omega^A``, computed with 4-point Gauss-Legendre
        quadrature on every segment.
    """
    pts = np.asarray(curve, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise PreconditionError("curve must be a (k, d) array of points")
    if not np.array_equal(pts[0], pts[-1]):
        raise PreconditionError("curve is not closed: first point differs from last point")
    dim = pts.shape[1]
    total = np.zeros(dim)
    for p0, p1 in zip(pts[:-1], pts[1:]):
        d = p1 - p0
        if not d.any():
            continue
        for t, w in zip(_GL_NODES, _GL_WEIGHTS):
            y = p0 + 0.5 * (t + 1.0) * d
            total += 0.5 * w * (frame_field(y).coframe @ d)
    return BurgersResult(vector=-total, segments=pts.shape[0] - 1)


# degree-4 rule on the reference triangle (barycentric points, weights sum to 1)
_TRI4_A = (0.445948490915965, 0.091576213509771)
_TRI4_W = (0.223381589678011, 0.109951743655322)


def _tri4_rule():
    bary, w = [], []
    for a, wt in zip(_TRI4_A, _TRI4_W):
        b = 1.0 - 2.0 * a
        bary += [(a, a, b), (a, b, a), (b, a, a)]
        w += [wt] * 3
    return np.array(bary), np.array(w)


def dislocation_flux(frame_field, vertices, triangles) -> np.ndarray:
    """Integrate the dislocation density 2-form over a triangulated surface.

    ``vertices`` has shape (k, d); ``triangles`` indexes into it, oriented so
    that the boundary circuit is traversed positively.
    """
    verts = np.asarray(vertices, dtype=float)
    bary, w = _tri4_rule()
    out = None
    for tri in np.asarray(triangles, dtype=int):
        p0, p1, p2 = verts[tri]
        du, dv = p1 - p0, p2 - p0
        for lam, wt in zip(bary, w):
            y = lam[0] * p0 + lam[1] * p1 + lam[2] * p2
            dens = dislocation_density(frame_field(y))
            val = 0.5 * wt * np.einsum("cab,a,b->c", dens, du, dv)
            out = val if out is None else out + val
    return out


def load_curve(path) -> np.ndarray:
    """Read a closed polyline from CSV, one comma-separated point per line."""
    rows = []
    with open(Path(path), newline="") as fh:
        for row in csv.reader(fh):
            if not row or not "".join(row).strip():
                continue
            rows.append([float(v) for v in row])
    pts = np.array(rows, dtype=float)
    if pts.ndim != 2 or len(pts) == 0:
        raise PreconditionError(f"{path}: no points")
    if not np.array_equal(pts[0], pts[-1]):
        raise PreconditionError(f"{path}: curve is not closed (first line must equal last line)")
    return pts


def _embed(uv, dim):
    out = np.zeros((len(uv), dim))
    out[:, :2] = uv
    return out


def square_circuit(side, per_side=8, dim=2) -> np.ndarray:
    """Closed positively oriented polyline around ``[0, side]^2`` in the (y1, y2) plane."""
    t = np.linspace(0.0, side, per_side + 1)[:-1]
    z, s = np.zeros_like(t), np.full_like(t, side)
    edges = [np.stack(p, axis=1) for p in ((t, z), (s, t), (side - t, s), (z, side - t))]
    pts = np.concatenate(edges + [np.zeros((1, 2))])
    return _embed(pts, dim)


def square_triangulation(side, n=8, dim=2):
    """Vertices and positively oriented triangles of a uniform grid on ``[0, side]^2``."""
    t = np.linspace(0.0, side, n + 1)
    u, v = np.meshgrid(t, t, indexing="ij")
    verts = _embed(np.stack([u.ravel(), v.ravel()], axis=1), dim)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return verts, tris


# ---------------------------------------------------------------------------
# Metrics

X_SWITCH = 1e-2
# f(x) = sum_{k>=2} 2^(2k-1) x^(k-2) / (2k)!
_F_SERIES = [2.0 ** (2 * k - 1) / math.factorial(2 * k) for k in range(2, 10)]


def hyperbolic_f(x):
    """Analytic function ``f(x) = (sinh(sqrt x)^2 - x) / x^2`` with ``f(0) = 1/3``.

    The closed form loses all digits to cancellation near zero, so a Taylor
    series is used for ``x <= 1e-2``.
    """
    x = np.asarray(x, dtype=float)
    small = x <= X_SWITCH
    series = np.polynomial.polynomial.polyval(np.where(small, x, 0.0), _F_SERIES)
    xs = np.where(small, 1.0, x)
    closed = (np.sinh(np.sqrt(xs)) ** 2 - xs) / xs**2
    return np.where(small, series, closed)


def _hyperbolic_f_closed(x):
    x = np.asarray(x, dtype=float)
    return (np.sinh(np.sqrt(x)) ** 2 - x) / x**2


def _hyperbolic_f_series(x):
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), _F_SERIES)


class MetricField:
    """A Riemannian metric given by components in a fixed coordinate chart.

    Subclasses implement :meth:`__call__` for arrays of points of shape (n, dim)
    and return SPD matrices of shape (n, dim, dim).
    """

    dim: int

    def __call__(self, points) -> np.ndarray:
        raise NotImplementedError

    def frames(self, points):
        """Metric components and an orthonormal frame at ``points``."""
        h = self(points)
        return h, orthonormal_frames(h)


class EuclideanMetric(MetricField):
    def __init__(self, dim):
        self.dim = int(dim)

    def __call__(self, points):
        n = np.atleast_2d(points).shape[0]
        return np.broadcast_to(np.eye(self.dim), (n, self.dim, self.dim)).copy()

    def frames(self, points):
        h = self(points)
        return h, h.copy()


class HyperbolicMetric(MetricField):
    """Metric of curvature ``-epsilon**2`` in rectangular normal coordinates.

    ``h_ab = delta_ab + epsilon^2 f(epsilon^2 r^2) (r^2 delta_ab - y^a y^b)``.
    """

    dim = 2

    def __init__(self, epsilon: float):
        if not epsilon >= 0.0:
            raise PreconditionError(f"epsilon must be >= 0, got {epsilon!r}")
        self.epsilon = float(epsilon)

    def __call__(self, points):
        y = np.atleast_2d(np.asarray(points, dtype=float))
        eps2 = self.epsilon**2
        r2 = np.einsum("na,na->n", y, y)
        coef = eps2 * hyperbolic_f(eps2 * r2)
        lab = r2[:, None, None] * np.eye(2) - y[:, :, None] * y[:, None, :]
        return np.eye(2) + coef[:, None, None] * lab

    def __repr__(self):
        return f"HyperbolicMetric(epsilon={self.epsilon!r})"


def hyperbolic_metric(epsilon: float) -> HyperbolicMetric:
    return HyperbolicMetric(epsilon)


def orthonormal_frames(h):
    """Frames ``E`` (columns) with ``E^T h E = I`` from a Cholesky factor of ``h``."""
    h = np.asarray(h, dtype=float)
    chol = np.linalg.cholesky(h)
    eye = np.broadcast_to(np.eye(h.shape[-1]), h.shape)
    # h = L L^T, E = L^{-T}
    return np.swapaxes(np.linalg.solve(chol, eye), -1, -2)


def gaussian_curvature(metric: MetricField, y, step=1e-3) -> float:
    """Gauss curvature of a 2d metric by central differences (Brioschi formula)."""
    y = np.asarray(y, dtype=float)
    s = float(step)

    def comps(du, dv):
        h = metric(y + np.array([du, dv]))[0]
        return h[0, 0], h[0, 1], h[1, 1]

    c = {}
    for i in (-1, 0, 1):
        for j in (-1, 0, 1):
            c[i, j] = np.array(comps(i * s, j * s))
    val = c[0, 0]
    du = (c[1, 0] - c[-1, 0]) / (2 * s)
    dv = (c[0, 1] - c[0, -1]) / (2 * s)
    duu = (c[1, 0] - 2 * val + c[-1, 0]) / s**2
    dvv = (c[0, 1] - 2 * val + c[0, -1]) / s**2
    duv = (c[1, 1] - c[1, -1] - c[-1, 1] + c[-1, -1]) / (4 * s**2)
    E, F, G = val
    Eu, Fu, Gu = du
    Ev, Fv, Gv = dv
    Evv, Guu, Fuv = dvv[0], duu[2], duv[1]
    m1 = np.array([
        [-0.5 * Evv + Fuv - 0.5 * Guu, 0.5 * Eu, Fu - 0.5 * Ev],
        [Fv - 0.5 * Gu, E, F],
        [0.5 * Gv, F, G],
    ])
    m2 = np.array([
        [0.0, 0.5 * Ev, 0.5 * Gu],
        [0.5 * Ev, E, F],
        [0.5 * Gu, F, G],
    ])
    return float((np.linalg.det(m1) - np.linalg.det(m2)) / (E * G - F * F) ** 2)


# ---------------------------------------------------------------------------
# Heisenberg normal chart


def _heisenberg_metric_group(q, k2):
    n = q.shape[0]
    x = q[:, 0]
    g = np.zeros((n, 3, 3))
    g[:, 0, 0] = 1.0
    g[:, 1, 1] = 1.0 + k2 * x * x
    g[:, 1, 2] = g[:, 2, 1] = -k2 * x
    g[:, 2, 2] = k2
    return g


def _heisenberg_christoffel(q, k2):
    """Christoffel symbols ``Gamma[n, a, b, c]`` of the left-invariant metric."""
    n = q.shape[0]
    x = q[:, 0]
    # only d/dx of the metric is non-zero
    dg = np.zeros((n, 3, 3, 3))
    dg[:, 0, 1, 1] = 2.0 * k2 * x
    dg[:, 0, 1, 2] = dg[:, 0, 2, 1] = -k2
    low = 0.5 * (
        np.einsum("nbdc->ndbc", dg) + np.einsum("ncdb->ndbc", dg) - dg
    )
    ginv = np.linalg.inv(_heisenberg_metric_group(q, k2))
    return np.einsum("nad,ndbc->nabc", ginv, low)


def _geodesic_acceleration(q, v, k2):
    """``-Gamma^a_bc v^b v^c`` in closed form (only d/dx of the metric is non-zero)."""
    x = q[:, 0]
    v1, v2, v3 = v[:, 0], v[:, 1], v[:, 2]
    low1 = k2 * (v2 * v3 - x * v2 * v2)
    low2 = v1 * (2.0 * k2 * x * v2 - k2 * v3)
    low3 = -k2 * v1 * v2
    return -np.stack([low1, low2 + x * low3, x * low2 + (x * x + 1.0 / k2) * low3], axis=1)


@dataclass(frozen=True)
class HeisenbergChart:
    """Riemannian normal coordinates of the Heisenberg metric around ``origin``.

    Normal coordinates ``yt`` refer to the orthonormal frame ``E_A(origin)``:
    the chart inverse sends ``yt`` to the time-one point of the geodesic that
    leaves ``origin`` with velocity ``yt^A E_A(origin)``.  Geodesics are
    integrated with ``steps`` classical RK4 steps in the curve parameter, so
    the arc-length step never exceeds ``radius / steps`` inside the chart.
    """

    beta: float = 0.0
    origin: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    steps: int = 200
    fd_step: float | None = None
    _origin_frame: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise PreconditionError("chart radius must be positive")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        frame, _ = heisenberg_frames(np.array(self.origin)[None, :], self.beta)
        object.__setattr__(self, "_origin_frame", frame[0])

    dim = 3

    @property
    def k2(self):
        return math.exp(2.0 * self.beta)

    @property
    def jacobian_step(self):
        return self.fd_step if self.fd_step is not None else 1e-5 * self.radius

    def _check(self, yt, slack=0.0):
        r = np.linalg.norm(yt, axis=1)
        bad = r > self.radius * (1.0 + 1e-9) + slack
        if bad.any():
            i = int(np.argmax(bad))
            raise DomainError(
                f"point {yt[i].tolist()} (|y| = {r[i]:.6g}) outside chart radius {self.radius}"
            )

    def metric_group(self, q):
        """Left-invariant metric components in group coordinates."""
        return _heisenberg_metric_group(np.atleast_2d(q), self.k2)

    def _rhs(self, x, v):
        return v, _geodesic_acceleration(x, v, self.k2)

    def _shoot(self, v0, record=False):
        x = np.broadcast_to(np.array(self.origin), v0.shape).copy()
        v = v0.copy()
        dt = 1.0 / self.steps
        path = [x.copy()] if record else None
        for _ in range(self.steps):
            k1x, k1v = self._rhs(x, v)
            k2x, k2v = self._rhs(x + 0.5 * dt * k1x, v + 0.5 * dt * k1v)
            k3x, k3v = self._rhs(x + 0.5 * dt * k2x, v + 0.5 * dt * k2v)
            k4x, k4v = self._rhs(x + dt * k3x, v + dt * k3v)
            x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
            if record:
                path.append(x.copy())
        return (x, v, np.array(path)) if record else (x, v)

    def exp(self, yt):
        """Group coordinates of the points with normal coordinates ``yt`` (n, 3)."""
        yt = np.atleast_2d(np.asarray(yt, dtype=float))
        self._check(yt)
        return self._shoot(yt @ self._origin_frame.T)[0]

    inverse = exp

    def _exp_unchecked(self, yt):
        return self._shoot(yt @ self._origin_frame.T)[0]

    def jacobian(self, yt):
        """Differential of the chart inverse, ``J[n, a, b] = d q^a / d yt^b``."""
        yt = np.atleast_2d(np.asarray(yt, dtype=float))
        self._check(yt)
        return self._jacobian(yt, self.jacobian_step)

    def _jacobian(self, yt, step):
        n = yt.shape[0]
        stacked = []
        for b in range(3):
            d = np.zeros(3)
            d[b] = step
            stacked += [yt + d, yt - d]
        q = self._exp_unchecked(np.concatenate(stacked))
        jac = np.empty((n, 3, 3))
        for b in range(3):
            plus = q[(2 * b) * n:(2 * b + 1) * n]
            minus = q[(2 * b + 1) * n:(2 * b + 2) * n]
            jac[:, :, b] = (plus - minus) / (2.0 * step)
        return jac

    def forward(self, q, tol=1e-13, maxiter=30):
        """Normal coordinates of group points ``q`` (Newton inversion of :meth:`exp`)."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        _, coframe = heisenberg_frames(np.array(self.origin)[None, :], self.beta)
        yt = (q - np.array(self.origin)) @ coframe[0].T
        for _ in range(maxiter):
            self._check(yt, slack=0.1 * self.radius)
            res = self._exp_unchecked(yt) - q
            if np.max(np.abs(res)) < tol:
                break
            jac = self._jacobian(yt, self.jacobian_step)
            yt = yt - np.linalg.solve(jac, res[..., None])[..., 0]
        self._check(yt)
        return yt

    def pulled_back_metric(self, yt):
        """Metric components ``h~_ab(yt)`` in normal coordinates."""
        yt = np.atleast_2d(np.asarray(yt, dtype=float))
        jac = self.jacobian(yt)
        g = self.metric_group(self._exp_unchecked(yt))
        return np.einsum("nab,nac,ncd->nbd", jac, g, jac)

    __call__ = pulled_back_metric

    def frames(self, yt):
        """Metric components and the left-invariant frame in normal coordinates.

        Returns ``(h, E)`` with ``E[n, :, A] = J^{-1} E_A(exp(yt))``.
        """
        yt = np.atleast_2d(np.asarray(yt, dtype=float))
        jac = self.jacobian(yt)
        q = self._exp_unchecked(yt)
        g = self.metric_group(q)
        h = np.einsum("nab,nac,ncd->nbd", jac, g, jac)
        frame_q, _ = heisenberg_frames(q, self.beta)
        return h, np.linalg.solve(jac, frame_q)

    def geodesic(self, direction, length, samples):
        """Points of the geodesic ``s -> exp(s v)``, ``|v| = 1``, recorded at every step.

        Returns ``(params, points)`` where ``params`` are the arc-length values.
        """
        v = np.asarray(direction, dtype=float)
        v = v / np.linalg.norm(v)
        chart = HeisenbergChart(self.beta, self.origin, self.radius, samples, self.fd_step)
        yt = (length * v)[None, :]
        chart._check(yt)
        _, _, path = chart._shoot(yt @ self._origin_frame.T, record=True)
        return np.linspace(0.0, length, samples + 1), path[:, 0, :]


def heisenberg_normal_chart(beta=0.0, origin=(0.0, 0.0, 0.0), radius=0.5) -> HeisenbergChart:
    return HeisenbergChart(beta=beta, origin=tuple(origin), radius=radius)


def heisenberg_frame_in_chart(chart: HeisenbergChart, y) -> MaterialFrame:
    """Left-invariant Heisenberg frame expressed in the chart's normal coordinates."""
    y = np.asarray(y, dtype=float)[None, :]
    jac = chart.jacobian(y)[0]
    q = chart._exp_unchecked(y)
    frame_q, coframe_q = heisenberg_frames(q, chart.beta)
    frame = np.linalg.solve(jac, frame_q[0])
    coframe = coframe_q[0] @ jac
    return MaterialFrame(frame, coframe, _heisenberg_structure(chart.beta))
