"""Evolution of kernel covariances and SH orientations from simulated deformation."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateDeformationError, TimestepError
from .materials import det3, polar_rotation

REORTHO_EVERY = 64
REORTHO_TOL = 1e-6


class KinematicsMode(str, Enum):
    TOTAL_F = "total"
    INCREMENTAL = "incremental"


def _T(M):
    return np.swapaxes(M, -1, -2)


def _sym(M):
    return 0.5 * (M + _T(M))


def deform_covariance_total(A0, F):
    """World covariance F A0 F^T."""
    F = np.asarray(F, dtype=np.float64)
    J = det3(F)
    bad = ~(np.atleast_1d(J) > 0)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise DegenerateDeformationError(f"det(F) <= 0 at kernel {idx}", index=idx)
    return _sym(F @ A0 @ _T(F))


def _is_spd(a):
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def deform_covariance_incremental(a, grad_v, dt):
    """Forward-Euler step of da/dt = L a + a L^T with L = grad v."""
    a = np.asarray(a, dtype=np.float64)
    La = np.asarray(grad_v) @ a
    out = _sym(a + dt * (La + _T(La)))
    if not _is_spd(out):
        raise TimestepError("covariance lost positive definiteness; reduce dt")
    return out


def update_sh_rotation(R_prev, grad_v, dt):
    """Rotation part of (I + dt grad_v) R_prev."""
    return polar_rotation((np.eye(3) + dt * np.asarray(grad_v)) @ R_prev)


def rotate_view_direction(d, R):
    """Map a world view direction into the material frame of the harmonics: R^T d."""
    return np.einsum("...ji,...j->...i", R, d)


def orthonormality_error(R):
    R = np.asarray(R)
    return np.linalg.norm(_T(R) @ R - np.eye(3), axis=(-2, -1))


@dataclass
class KernelKinematicState:
    """Per-kernel shape and SH orientation, arrays over N kernels."""

    A0: np.ndarray
    a: np.ndarray
    F_total: np.ndarray
    R_sh: np.ndarray
    incremental: np.ndarray  # bool (N,), True -> rate-form update
    steps: int = 0

    @classmethod
    def from_covariances(cls, A0, incremental=False):
        A0 = np.asarray(A0, dtype=np.float64)
        n = len(A0)
        eye = np.broadcast_to(np.eye(3), (n, 3, 3))
        inc = np.broadcast_to(np.asarray(incremental, dtype=bool), (n,)).copy()
        return cls(A0.copy(), A0.copy(), eye.copy(), eye.copy(), inc)

    def advance(self, grad_v, dF, dt):
        """Apply one simulation step given the per-kernel velocity gradient and F increment."""
        self.F_total = dF @ self.F_total
        tot = ~self.incremental
        if tot.any():
            self.a[tot] = deform_covariance_total(self.A0[tot], self.F_total[tot])
            self.R_sh[tot] = polar_rotation(self.F_total[tot])
        inc = self.incremental
        if inc.any():
            try:
                self.a[inc] = deform_covariance_incremental(self.a[inc], grad_v[inc], dt)
            except TimestepError as exc:
                raise TimestepError(f"{exc} (step {self.steps})") from exc
            self.R_sh[inc] = update_sh_rotation(self.R_sh[inc], grad_v[inc], dt)
        self.steps += 1
        if self.steps % REORTHO_EVERY == 0 or np.any(orthonormality_error(self.R_sh) > REORTHO_TOL):
            self.R_sh = polar_rotation(self.R_sh)
