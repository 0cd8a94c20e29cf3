"""Stored energies, stresses and ellipticity diagnostics.

Frame-index tensors are stored with all indices down; the reference inner
product is the identity, so raising and lowering frame indices is trivial.
Derivatives with respect to a symmetric matrix follow the convention
``d gamma_AB / d gamma_CD = (delta_AC delta_BD + delta_AD delta_BC) / 2``.

Both energies of the package have the form
``e(gamma) = 1/2 sum_AB w_AB (gamma_AB - delta_AB)^2`` for a symmetric weight
matrix ``w``.  For the isotropic toy energy ``w`` is all ones; for the
anisotropic screw energy the in-plane block is one, the mixed entries are
``alpha / 2`` and ``w_33 = beta_w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import PreconditionError
from .geometry import MaterialFrame

__all__ = [
    "Configuration",
    "EnergyModel",
    "StressTensors",
    "configuration",
    "energy",
    "energy_gradient",
    "thermodynamic_stress",
    "material_stress",
    "spatial_stress",
    "stresses",
    "legendre_hadamard_form",
    "legendre_hadamard",
    "SpeedResult",
    "characteristic_speeds",
]


def _require_spd(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise PreconditionError(f"{name} must be a square matrix")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise PreconditionError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise PreconditionError(f"{name} is not positive definite") from None
    return m


@dataclass(frozen=True)
class Configuration:
    """Inner product ``gamma_AB`` on the crystalline structure."""

    gamma: np.ndarray

    def __post_init__(self):
        g = _require_spd(self.gamma, "gamma")
        object.__setattr__(self, "gamma", 0.5 * (g + g.T))

    @property
    def dim(self):
        return self.gamma.shape[0]

    @property
    def eigenvalues(self):
        """Principal values relative to the identity reference."""
        return np.linalg.eigvalsh(self.gamma)

    @property
    def volume(self):
        return float(np.sqrt(np.linalg.det(self.gamma)))

    @property
    def density(self):
        return 1.0 / self.volume


@dataclass(frozen=True)
class EnergyModel:
    """Stored energy per unit mass.

    ``kind`` is ``"isotropic"`` (the toy energy, any dimension) or
    ``"anisotropic"`` (screw energy, dimension 3, coefficients ``alpha`` on the
    mixed components and ``beta_w`` on ``gamma_33``).
    """

    kind: str = "isotropic"
    alpha: float = 1.0
    beta_w: float = 1.0

    def __post_init__(self):
        if self.kind not in ("isotropic", "anisotropic"):
            raise PreconditionError(f"unknown energy kind {self.kind!r}")
        if self.alpha < 0 or self.beta_w < 0:
            raise PreconditionError("alpha and beta_w must be non-negative")

    @classmethod
    def isotropic(cls):
        return cls("isotropic")

    @classmethod
    def anisotropic(cls, alpha=1.0, beta_w=1.0):
        return cls("anisotropic", float(alpha), float(beta_w))

    def weights(self, dim):
        if self.kind == "isotropic":
            return np.ones((dim, dim))
        if dim != 3:
            raise PreconditionError("the anisotropic energy is defined in dimension 3 only")
        w = np.ones((3, 3))
        w[:2, 2] = w[2, :2] = 0.5 * self.alpha
        w[2, 2] = self.beta_w
        return w


def configuration(frame: MaterialFrame | np.ndarray, m) -> Configuration:
    """Pull an SPD coordinate metric ``m`` back to the frame: ``gamma = E^T m E``."""
    m = _require_spd(m, "m")
    e = frame.frame if isinstance(frame, MaterialFrame) else np.asarray(frame, dtype=float)
    return Configuration(e.T @ m @ e)


def _gamma(gamma):
    if isinstance(gamma, Configuration):
        return gamma.gamma
    return np.asarray(gamma, dtype=float)


def energy(model: EnergyModel, gamma) -> float:
    g = _gamma(gamma)
    w = model.weights(g.shape[-1])
    d = g - np.eye(g.shape[-1])
    return 0.5 * np.einsum("...ab,ab,...ab->...", d, w, d)


def energy_gradient(model: EnergyModel, gamma) -> np.ndarray:
    """``d e / d gamma_AB`` under the symmetric convention (works on stacks)."""
    g = _gamma(gamma)
    return model.weights(g.shape[-1]) * (g - np.eye(g.shape[-1]))


def energy_hessian(model: EnergyModel, dim) -> np.ndarray:
    """Constant second derivative ``H[A, B, C, D]`` of the quadratic energies."""
    w = model.weights(dim)
    eye = np.eye(dim)
    sym = 0.5 * (np.einsum("ac,bd->abcd", eye, eye) + np.einsum("ad,bc->abcd", eye, eye))
    return w[:, :, None, None] * sym


def thermodynamic_stress(model: EnergyModel, gamma) -> np.ndarray:
    """``pi^AB = -2 (det gamma)^(-1/2) d e / d gamma_AB``."""
    g = _gamma(gamma)
    vol = np.sqrt(np.linalg.det(g))
    return -2.0 * energy_gradient(model, g) / np.asarray(vol)[..., None, None]


def material_stress(h, m) -> np.ndarray:
    """Stress on the material manifold for the isotropic toy energy.

    ``S = 2 sqrt(det h / det m) h^-1 (h - m) h^-1``; positive where ``m < h``.
    """
    h = _require_spd(h, "h")
    m = _require_spd(m, "m")
    hinv = np.linalg.inv(h)
    return 2.0 * np.sqrt(np.linalg.det(h) / np.linalg.det(m)) * hinv @ (h - m) @ hinv


def spatial_stress(S, dphi) -> np.ndarray:
    """Push the material stress forward: ``T^ij = S^ab dphi^i_a dphi^j_b``."""
    S = np.asarray(S, dtype=float)
    dphi = np.asarray(dphi, dtype=float)
    if np.linalg.det(dphi) <= 0.0:
        raise PreconditionError("deformation gradient must have positive determinant")
    return dphi @ S @ dphi.T


@dataclass(frozen=True)
class StressTensors:
    pi: np.ndarray
    S: np.ndarray
    T: np.ndarray


def stresses(model: EnergyModel, frame, dphi) -> StressTensors:
    """All three stress tensors for deformation gradient ``dphi`` and frame ``frame``."""
    e = frame.frame if isinstance(frame, MaterialFrame) else np.asarray(frame, dtype=float)
    dphi = np.asarray(dphi, dtype=float)
    gamma = e.T @ dphi.T @ dphi @ e
    pi = thermodynamic_stress(model, gamma)
    S = e @ pi @ e.T
    return StressTensors(pi=pi, S=S, T=spatial_stress(S, dphi))


# ---------------------------------------------------------------------------
# Legendre-Hadamard


def _lh_matrix(hess, grad, ginv, eta):
    """Quadratic form in ``xi`` for fixed ``eta``."""
    k = np.einsum("abcd,c,a->bd", hess, eta, eta)
    return k + 0.5 * (eta @ ginv @ eta) * grad


def legendre_hadamard_form(model: EnergyModel, gamma, xi, eta) -> float:
    """Rank-one form ``d2e/dg dg eta_C eta_A xi_B xi_D + 1/2 de/dg_AB |eta|^2 xi_A xi_B``.

    ``xi`` and ``eta`` are frame components; ``|eta|^2`` is measured with the
    inverse of ``gamma``.
    """
    g = _gamma(gamma)
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    k = _lh_matrix(energy_hessian(model, g.shape[0]), energy_gradient(model, g), np.linalg.inv(g), eta)
    return float(xi @ k @ xi)


def _fibonacci_directions(dim, n):
    if dim == 2:
        t = 2.0 * np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    if dim == 3:
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        r = np.sqrt(1.0 - z * z)
        phi = np.pi * (3.0 - np.sqrt(5.0)) * i
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    raise PreconditionError("Legendre-Hadamard sampling supports dimensions 2 and 3")


def legendre_hadamard(model: EnergyModel, gamma, samples=2048, refine_steps=20) -> float:
    """Minimum of the Legendre-Hadamard form over unit ``xi`` and ``eta``.

    For fixed ``eta`` the form is quadratic in ``xi`` and its minimum over the
    unit sphere is the smallest eigenvalue of a ``dim x dim`` matrix; ``eta``
    is sampled on a Fibonacci lattice and the best sample is refined by
    projected gradient descent.  A positive value certifies the condition.
    """
    g = _gamma(gamma)
    dim = g.shape[0]
    hess = energy_hessian(model, dim)
    grad = energy_gradient(model, g)
    ginv = np.linalg.inv(g)

    def objective(eta):
        vals, vecs = np.linalg.eigh(_lh_matrix(hess, grad, ginv, eta))
        return vals[0], vecs[:, 0]

    etas = _fibonacci_directions(dim, samples)
    ks = np.einsum("abcd,nc,na->nbd", hess, etas, etas)
    ks += 0.5 * np.einsum("na,ab,nb->n", etas, ginv, etas)[:, None, None] * grad
    vals = np.linalg.eigvalsh(ks)[:, 0]
    best = int(np.argmin(vals))
    eta = etas[best]
    fbest, xi = objective(eta)
    step = 0.1
    for _ in range(refine_steps):
        d = (
            np.einsum("ebcd,c,b,d->e", hess, eta, xi, xi)
            + np.einsum("abed,a,b,d->e", hess, eta, xi, xi)
            + (xi @ grad @ xi) * (ginv @ eta)
        )
        d -= (d @ eta) * eta
        while step > 1e-12:
            trial = eta - step * d
            trial /= np.linalg.norm(trial)
            ftrial, xtrial = objective(trial)
            if ftrial < fbest:
                eta, fbest, xi = trial, ftrial, xtrial
                step *= 2.0
                break
            step *= 0.5
    return float(fbest)


# ---------------------------------------------------------------------------
# Characteristic speeds


@dataclass(frozen=True)
class SpeedResult:
    """Characteristic speeds; ``violations`` flags negative eigenvalues (speed is NaN)."""

    speeds: np.ndarray
    eigenvalues: np.ndarray
    violations: np.ndarray

    @property
    def hyperbolic(self):
        return not bool(self.violations.any())


def characteristic_speeds(G, M4, kappa, gamma=None) -> SpeedResult:
    """Speeds ``eta_i = sqrt(lambda_i) / |kappa|``.

    ``lambda_i`` are the eigenvalues of ``H_AB = M4[C, D, A, B] kappa_C kappa_D``
    relative to ``G``; ``|kappa|`` is measured with the inverse of ``gamma``
    (identity by default).
    """
    G = _require_spd(G, "G")
    kappa = np.asarray(kappa, dtype=float)
    if not np.any(kappa):
        raise PreconditionError("wave covector kappa must be non-zero")
    H = np.einsum("cdab,c,d->ab", np.asarray(M4, dtype=float), kappa, kappa)
    H = 0.5 * (H + H.T)
    ginv = np.eye(len(kappa)) if gamma is None else np.linalg.inv(_gamma(gamma))
    norm = np.sqrt(kappa @ ginv @ kappa)
    lam = np.sort(linalg.eigh(H, G, eigvals_only=True))
    bad = lam < 0.0
    speeds = np.where(bad, np.nan, np.sqrt(np.where(bad, 0.0, lam))) / norm
    return SpeedResult(speeds=speeds, eigenvalues=lam, violations=bad)
