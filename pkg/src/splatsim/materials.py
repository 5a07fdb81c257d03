"""Constitutive models: Kirchhoff stresses, plastic return maps and the 3x3 decompositions they use.

Every function accepts a single 3x3 matrix or a stack of shape (..., 3, 3).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import _kernels
from .errors import DegenerateDeformationError, ParameterError

I3 = np.eye(3)


class Elasticity(str, Enum):
    FIXED_COROTATED = "fixed_corotated"
    STVK = "stvk"
    NEO_HOOKEAN = "neo_hookean"
    HERSCHEL_BULKLEY = "herschel_bulkley"


class Plasticity(str, Enum):
    NONE = "none"
    DRUCKER_PRAGER = "drucker_prager"
    VON_MISES = "von_mises"
    HERSCHEL_BULKLEY = "herschel_bulkley"


# constitutive-model names as used in scene descriptions
PRESETS = {
    "fixed corotated": (Elasticity.FIXED_COROTATED, Plasticity.NONE),
    "stvk": (Elasticity.STVK, Plasticity.NONE),
    "neo-hookean": (Elasticity.NEO_HOOKEAN, Plasticity.NONE),
    "von mises": (Elasticity.STVK, Plasticity.VON_MISES),
    "drucker-prager": (Elasticity.STVK, Plasticity.DRUCKER_PRAGER),
    "herschel-bulkley": (Elasticity.HERSCHEL_BULKLEY, Plasticity.HERSCHEL_BULKLEY),
}


def derive_moduli(E: float, nu: float):
    """Return (mu, lambda, kappa) from Young's modulus and Poisson ratio."""
    if not E > 0:
        raise ParameterError(f"Young's modulus must be positive, got E={E}")
    if not 0 <= nu < 0.5:
        raise ParameterError(f"Poisson ratio must satisfy 0 <= nu < 0.5, got nu={nu}")
    mu = E / (2 * (1 + nu))
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    kappa = E / (3 * (1 - 2 * nu))
    return mu, lam, kappa


@dataclass(frozen=True)
class MaterialParams:
    E: float
    nu: float
    density: float = 1.0
    friction_angle: float = math.radians(30.0)  # radians
    yield_stress: float = 0.0
    viscosity: float = 0.0
    mu: float = field(init=False)
    lam: float = field(init=False)
    kappa: float = field(init=False)

    def __post_init__(self):
        mu, lam, kappa = derive_moduli(self.E, self.nu)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "kappa", kappa)
        if not self.density > 0:
            raise ParameterError(f"density must be positive, got {self.density}")
        for name in ("friction_angle", "yield_stress", "viscosity"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative, got {getattr(self, name)}")


@dataclass(frozen=True)
class MaterialModel:
    elasticity: Elasticity = Elasticity.FIXED_COROTATED
    plasticity: Plasticity = Plasticity.NONE
    params: MaterialParams = field(default_factory=lambda: MaterialParams(E=1e4, nu=0.3))
    neo_hookean_literal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "elasticity", Elasticity(self.elasticity))
        object.__setattr__(self, "plasticity", Plasticity(self.plasticity))
        hb_e = self.elasticity is Elasticity.HERSCHEL_BULKLEY
        hb_p = self.plasticity is Plasticity.HERSCHEL_BULKLEY
        if hb_e != hb_p:
            raise ParameterError("Herschel-Bulkley plasticity and stress must be used together")
        if self.plasticity is Plasticity.DRUCKER_PRAGER and self.elasticity is not Elasticity.STVK:
            raise ParameterError("Drucker-Prager plasticity requires the StVK (Hencky) stress")

    @classmethod
    def from_name(cls, name: str, params: MaterialParams, **kw) -> "MaterialModel":
        key = name.strip().lower().replace("_", " ")
        key = {"neo hookean": "neo-hookean", "drucker prager": "drucker-prager",
               "herschel bulkley": "herschel-bulkley", "von-mises": "von mises",
               "fixed-corotated": "fixed corotated"}.get(key, key)
        if key not in PRESETS:
            raise ParameterError(f"unknown material {name!r}; expected one of {sorted(PRESETS)}")
        e, p = PRESETS[key]
        return cls(e, p, params, **kw)

    @property
    def is_plastic(self) -> bool:
        return self.plasticity is not Plasticity.NONE

    def project(self, F_trial, dt):
        """Return map for one step; returns the admissible elastic F."""
        p = self.params
        if self.plasticity is Plasticity.NONE:
            return F_trial
        if self.plasticity is Plasticity.DRUCKER_PRAGER:
            return return_map_drucker_prager(F_trial, p)
        if self.plasticity is Plasticity.VON_MISES:
            return return_map_von_mises(F_trial, p)
        return herschel_bulkley_step(F_trial, p, dt)[0]

    def stress(self, F_E):
        p = self.params
        if self.elasticity is Elasticity.FIXED_COROTATED:
            return kirchhoff_fixed_corotated(F_E, p)
        if self.elasticity is Elasticity.STVK:
            return kirchhoff_stvk(F_E, p)
        if self.elasticity is Elasticity.NEO_HOOKEAN:
            return kirchhoff_neo_hookean(F_E, p, literal=self.neo_hookean_literal)
        return kirchhoff_herschel_bulkley(F_E, p)

    def energy_density(self, F_E):
        p = self.params
        if self.elasticity is Elasticity.FIXED_COROTATED:
            return energy_fixed_corotated(F_E, p)
        if self.elasticity is Elasticity.STVK:
            return energy_stvk(F_E, p)
        if self.elasticity is Elasticity.NEO_HOOKEAN:
            return energy_neo_hookean(F_E, p)
        return energy_herschel_bulkley(F_E, p)


# ---------------------------------------------------------------- decompositions

def _T(M):
    return np.swapaxes(M, -1, -2)


def _first_bad(mask):
    idx = np.argwhere(np.atleast_1d(mask))
    return tuple(int(i) for i in idx[0]) if len(idx) else None


def svd3(F):
    """F = U diag(sigma) V^T with det U = det V = +1.

    Singular values are sorted by descending magnitude; a reflection is
    carried by a negative last singular value.
    """
    F = np.asarray(F, dtype=np.float64)
    shape = F.shape
    Fb = np.ascontiguousarray(F.reshape(-1, 3, 3))
    U = np.empty_like(Fb)
    V = np.empty_like(Fb)
    s = np.empty((len(Fb), 3))
    _kernels.svd3_batch(Fb, U, s, V)
    return U.reshape(shape), s.reshape(shape[:-1]), V.reshape(shape)


def det3(F):
    """Determinant of one or many 3x3 matrices."""
    F = np.asarray(F, dtype=np.float64)
    Fb = np.ascontiguousarray(F.reshape(-1, 3, 3))
    out = np.empty(len(Fb))
    _kernels.det3_batch(Fb, out)
    return out.reshape(F.shape[:-2]) if F.ndim > 2 else out[0]


def _check_positive_det(J, what):
    bad = ~(np.asarray(J) > 0)
    if np.any(bad):
        idx = _first_bad(bad)
        raise DegenerateDeformationError(
            f"{what}: det(F) = {np.atleast_1d(J)[idx[0]] if idx else J} <= 0"
            + (f" at index {idx[0]}" if idx and np.ndim(J) else ""),
            index=idx[0] if idx and np.ndim(J) else None)


def polar_rotation(F):
    """Rotation factor R of F = R S (closest rotation in Frobenius norm)."""
    F = np.asarray(F, dtype=np.float64)
    _check_positive_det(det3(F), "polar_rotation")
    U, _, V = svd3(F)
    return U @ _T(V)


def dev(M):
    tr = np.trace(M, axis1=-2, axis2=-1)
    return M - (tr / 3.0)[..., None, None] * I3


# ---------------------------------------------------------------- elastic stresses

def kirchhoff_fixed_corotated(F_E, p: MaterialParams):
    """2 mu (F - R) F^T + lambda (J - 1) J I."""
    F = np.asarray(F_E, dtype=np.float64)
    J = det3(F)
    _check_positive_det(J, "fixed corotated stress")
    U, _, V = svd3(F)
    R = U @ _T(V)
    tau = 2 * p.mu * (F - R) @ _T(F) + (p.lam * (J - 1) * J)[..., None, None] * I3
    return 0.5 * (tau + _T(tau))


def _hencky(F, what):
    U, s, V = svd3(F)
    if np.any(~(s > 0)):
        idx = _first_bad(np.any(~(s > 0), axis=-1)) if s.ndim > 1 else None
        raise DegenerateDeformationError(f"{what}: non-positive singular value",
                                         index=idx[0] if idx else None)
    return U, s, V, np.log(s)


def kirchhoff_stvk(F_E, p: MaterialParams, literal: bool = False):
    """Hencky-strain StVK stress U (2 mu eps + lambda tr(eps)) U^T.

    ``literal=True`` right-multiplies by V^T instead of U^T; that form is
    neither symmetric nor objective for non-symmetric F.
    """
    F = np.asarray(F_E, dtype=np.float64)
    U, _, V, eps = _hencky(F, "StVK stress")
    d = 2 * p.mu * eps + p.lam * eps.sum(axis=-1, keepdims=True)
    right = V if literal else U
    return (U * d[..., None, :]) @ _T(right)


def kirchhoff_neo_hookean(F_E, p: MaterialParams, literal: bool = False):
    """mu (F F^T - I) + lambda log(J) I; ``literal`` drops the lambda factor."""
    F = np.asarray(F_E, dtype=np.float64)
    J = det3(F)
    _check_positive_det(J, "Neo-Hookean stress")
    k = 1.0 if literal else p.lam
    return p.mu * (F @ _T(F) - I3) + (k * np.log(J))[..., None, None] * I3


def kirchhoff_herschel_bulkley(F_E, p: MaterialParams):
    """kappa/2 (J^2 - 1) I + mu dev(det(b)^(-1/3) b), b = F F^T."""
    F = np.asarray(F_E, dtype=np.float64)
    J = det3(F)
    _check_positive_det(J, "Herschel-Bulkley stress")
    b = F @ _T(F)
    bbar = b * (J ** (-2.0 / 3.0))[..., None, None]
    return (0.5 * p.kappa * (J * J - 1))[..., None, None] * I3 + p.mu * dev(bbar)


def energy_fixed_corotated(F_E, p):
    _, s, _ = svd3(F_E)
    J = np.prod(s, axis=-1)
    return p.mu * np.sum((s - 1) ** 2, axis=-1) + 0.5 * p.lam * (J - 1) ** 2


def energy_stvk(F_E, p):
    _, _, _, eps = _hencky(np.asarray(F_E, dtype=np.float64), "StVK energy")
    return p.mu * np.sum(eps ** 2, axis=-1) + 0.5 * p.lam * eps.sum(axis=-1) ** 2


def energy_neo_hookean(F_E, p):
    F = np.asarray(F_E, dtype=np.float64)
    logJ = np.log(det3(F))
    tr = np.sum(F * F, axis=(-2, -1))
    return 0.5 * p.mu * (tr - 3) - p.mu * logJ + 0.5 * p.lam * logJ ** 2


def energy_herschel_bulkley(F_E, p):
    F = np.asarray(F_E, dtype=np.float64)
    J = det3(F)
    trbbar = np.sum(F * F, axis=(-2, -1)) * J ** (-2.0 / 3.0)
    return 0.5 * p.kappa * (0.5 * (J * J - 1) - np.log(J)) + 0.5 * p.mu * (trbbar - 3)


# ---------------------------------------------------------------- return maps

def drucker_prager_alpha(friction_angle):
    s = math.sin(friction_angle)
    return math.sqrt(2.0 / 3.0) * 2 * s / (3 - s)


def drucker_prager_delta_gamma(eps, p: MaterialParams):
    """Yield function value delta_gamma for Hencky strains eps (..., 3)."""
    tr = eps.sum(axis=-1)
    ehat = eps - tr[..., None] / 3.0
    alpha = drucker_prager_alpha(p.friction_angle)
    return np.linalg.norm(ehat, axis=-1) + alpha * (3 * p.lam + 2 * p.mu) * tr / (2 * p.mu)


def return_map_drucker_prager(F_trial, p: MaterialParams):
    F = np.asarray(F_trial, dtype=np.float64)
    U, s, V, eps = _hencky(F, "Drucker-Prager return map")
    tr = eps.sum(axis=-1)
    ehat = eps - tr[..., None] / 3.0
    nrm = np.linalg.norm(ehat, axis=-1)
    dg = drucker_prager_delta_gamma(eps, p)

    expand = tr > 0
    project = ~expand & (dg > 0) & (nrm > 0)
    safe = np.where(nrm > 0, nrm, 1.0)
    eps_proj = eps - (dg / safe)[..., None] * ehat
    new_s = np.where(expand[..., None], 1.0, np.where(project[..., None], np.exp(eps_proj), s))
    out = (U * new_s[..., None, :]) @ _T(V)
    # untouched states are returned bit-for-bit
    keep = ~(expand | project)
    return np.where(keep[..., None, None], F, out)


def von_mises_delta_gamma(eps, p: MaterialParams):
    ehat = eps - eps.sum(axis=-1, keepdims=True) / 3.0
    return np.linalg.norm(ehat, axis=-1) - p.yield_stress / (2 * p.mu)


def return_map_von_mises(F_trial, p: MaterialParams):
    F = np.asarray(F_trial, dtype=np.float64)
    U, _, V, eps = _hencky(F, "von Mises return map")
    ehat = eps - eps.sum(axis=-1, keepdims=True) / 3.0
    nrm = np.linalg.norm(ehat, axis=-1)
    dg = nrm - p.yield_stress / (2 * p.mu)
    project = (dg > 0) & (nrm > 0)
    safe = np.where(nrm > 0, nrm, 1.0)
    eps_proj = eps - (dg / safe)[..., None] * ehat
    out = (U * np.exp(eps_proj)[..., None, :]) @ _T(V)
    return np.where(project[..., None, None], out, F)


def _unimodular_shift(d):
    """Solve prod(d_i + c) = 1 for the root c with every d_i + c > 0.

    The product is increasing in c on that branch, so Newton from the
    right of the root converges monotonically.
    """
    lo = -d.min(axis=-1)
    c = lo + 1.0
    for _ in range(100):
        f = np.prod(d + c[..., None], axis=-1) - 1.0
        x = d + c[..., None]
        fp = x[..., 1] * x[..., 2] + x[..., 0] * x[..., 2] + x[..., 0] * x[..., 1]
        step = f / fp
        c = np.maximum(c - step, 0.5 * (c + lo))
        if np.all(np.abs(step) <= 1e-15 * np.maximum(1.0, np.abs(c))):
            break
    return c


def herschel_bulkley_step(F_trial, p: MaterialParams, dt: float):
    """Viscoplastic return for the h = 1 Herschel-Bulkley model.

    Returns (F_E, tau). J and the rotation of the trial state are kept; the
    isochoric left stretch is rebuilt so that its deviatoric part reproduces
    the relaxed deviatoric stress exactly.
    """
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    F = np.asarray(F_trial, dtype=np.float64)
    J = det3(F)
    _check_positive_det(J, "Herschel-Bulkley return map")
    b = F @ _T(F)
    bbar = b * (J ** (-2.0 / 3.0))[..., None, None]
    beta, Q = np.linalg.eigh(0.5 * (bbar + _T(bbar)))
    dbeta = beta - beta.mean(axis=-1, keepdims=True)
    s_trial = p.mu * np.linalg.norm(dbeta, axis=-1)
    limit = math.sqrt(2.0 / 3.0) * p.yield_stress
    yielded = (s_trial - limit > 0) & (s_trial > 0)

    s_new = s_trial - (s_trial - limit) / (1 + p.viscosity / (2 * p.mu * dt))
    ratio = np.where(s_trial > 0, s_new / np.where(s_trial > 0, s_trial, 1.0), 1.0)
    d = dbeta * ratio[..., None]
    c = _unimodular_shift(d)
    lam_new = d + c[..., None]
    root = (Q * np.sqrt(lam_new)[..., None, :]) @ _T(Q)
    R = polar_rotation(F)
    F_new = (J ** (1.0 / 3.0))[..., None, None] * root @ R
    F_E = np.where(yielded[..., None, None], F_new, F)
    return F_E, kirchhoff_herschel_bulkley(F_E, p)
