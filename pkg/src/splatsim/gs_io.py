"""Gaussian-splat point clouds: PLY I/O, covariance factors and the anisotropy constraint.

Files follow the layout written by common splatting trainers::

    x y z  f_dc_0..2  f_rest_0..(3*(K-1)-1)  opacity  scale_0..2  rot_0..3

``f_rest`` is channel-major (all red coefficients first), ``opacity`` is a
logit, ``scale_*`` are natural logs and ``rot_*`` is a (w, x, y, z)
quaternion. Two optional properties are understood on top of that:
``shrot_0..8`` (row-major accumulated SH rotation written by the simulator)
and ``is_fill`` (1 for particles spawned by internal filling).
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from plyfile import PlyData, PlyElement

from .errors import PlyDataError, PlyFormatError

log = logging.getLogger(__name__)

OPACITY_EPS = 1e-6
_QUAT_TOL = 1e-6
_SH_COUNTS = {1: 0, 4: 1, 9: 2, 16: 3}


@dataclass(frozen=True)
class GaussianCloud:
    """Structure-of-arrays view of N Gaussian kernels (linear space).

    centers (N, 3), scales (N, 3) standard deviations, rotations (N, 4)
    unit quaternions (w, x, y, z), opacities (N,), sh (N, K, 3).
    """

    centers: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    sh: np.ndarray
    sh_rotation: Optional[np.ndarray] = None
    is_fill: Optional[np.ndarray] = None
    # raw (logit opacity, log scale) as read from a file; reused on save
    # wherever the linear values still map to them exactly
    stored: Optional[tuple] = dataclasses.field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.centers)
        for name in ("scales", "rotations", "opacities", "sh"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.sh.ndim != 3 or self.sh.shape[2] != 3 or self.sh.shape[1] not in _SH_COUNTS:
            raise ValueError(f"sh must have shape (N, K, 3) with K in {{1,4,9,16}}, got {self.sh.shape}")

    def __len__(self):
        return len(self.centers)

    @property
    def sh_degree(self) -> int:
        return _SH_COUNTS[self.sh.shape[1]]

    def replace(self, **changes) -> "GaussianCloud":
        return dataclasses.replace(self, **changes)

    def fill_mask(self) -> np.ndarray:
        if self.is_fill is None:
            return np.zeros(len(self), dtype=bool)
        return np.asarray(self.is_fill, dtype=bool)

    def covariances(self) -> np.ndarray:
        return covariance_from_factors(self.scales, self.rotations)

    @staticmethod
    def concatenate(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        if a.sh.shape[1] != b.sh.shape[1]:
            raise ValueError("cannot concatenate clouds with different SH degrees")

        def _rot(c):
            if c.sh_rotation is not None:
                return c.sh_rotation
            return np.broadcast_to(np.eye(3), (len(c), 3, 3))

        sh_rot = None
        if a.sh_rotation is not None or b.sh_rotation is not None:
            sh_rot = np.concatenate([_rot(a), _rot(b)])
        is_fill = None
        if a.is_fill is not None or b.is_fill is not None:
            is_fill = np.concatenate([a.fill_mask(), b.fill_mask()])
        stored = None
        if a.stored is not None or b.stored is not None:
            sa, sb = a.raw_fields(), b.raw_fields()
            stored = (np.concatenate([sa[0], sb[0]]), np.concatenate([sa[1], sb[1]]))
        return GaussianCloud(
            centers=np.concatenate([a.centers, b.centers]),
            scales=np.concatenate([a.scales, b.scales]),
            rotations=np.concatenate([a.rotations, b.rotations]),
            opacities=np.concatenate([a.opacities, b.opacities]),
            sh=np.concatenate([a.sh, b.sh]),
            sh_rotation=sh_rot,
            is_fill=is_fill,
            stored=stored,
        )

    def raw_fields(self):
        """(logit opacity, log scale) as they would be written to a file."""
        logit_op = _logit(np.asarray(self.opacities, dtype=np.float64))
        log_scale = np.log(np.asarray(self.scales, dtype=np.float64))
        if self.stored is not None and len(self.stored[0]) == len(self):
            raw_op, raw_scale = self.stored
            logit_op = np.where(_sigmoid(raw_op) == self.opacities, raw_op, logit_op)
            log_scale = np.where(np.exp(raw_scale) == self.scales, raw_scale, log_scale)
        return logit_op, log_scale


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """(w, x, y, z) quaternions (..., 4) to rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) to (w, x, y, z) quaternions with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    shape = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((len(R), 4))
    tr = np.trace(R, axis1=1, axis2=2)
    # pick the numerically largest component per matrix
    cand = np.stack([tr, R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]], axis=1)
    k = np.argmax(cand, axis=1)
    for case in range(4):
        m = k == case
        if not m.any():
            continue
        Rm = R[m]
        if case == 0:
            s = np.sqrt(1.0 + tr[m]) * 2
            q[m, 0] = 0.25 * s
            q[m, 1] = (Rm[:, 2, 1] - Rm[:, 1, 2]) / s
            q[m, 2] = (Rm[:, 0, 2] - Rm[:, 2, 0]) / s
            q[m, 3] = (Rm[:, 1, 0] - Rm[:, 0, 1]) / s
        else:
            i = case - 1
            j, l = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(1.0 + Rm[:, i, i] - Rm[:, j, j] - Rm[:, l, l]) * 2
            q[m, 0] = (Rm[:, l, j] - Rm[:, j, l]) / s
            q[m, 1 + i] = 0.25 * s
            q[m, 1 + j] = (Rm[:, j, i] + Rm[:, i, j]) / s
            q[m, 1 + l] = (Rm[:, l, i] + Rm[:, i, l]) / s
    q[q[:, 0] < 0] *= -1
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(shape + (4,))


def covariance_from_factors(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """A = R diag(s^2) R^T, vectorised over leading axes."""
    R = quat_to_matrix(rotations)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    A = (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def factors_from_covariance(A: np.ndarray):
    """Inverse of :func:`covariance_from_factors` via a symmetric eigendecomposition.

    Returns (scales, quaternions). Axis order follows ascending eigenvalues.
    """
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    lam, Q = np.linalg.eigh(A)
    neg = np.linalg.det(Q) < 0
    Q[neg, :, 0] *= -1
    return np.sqrt(np.clip(lam, 0.0, None)), matrix_to_quat(Q)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logit(p):
    p = np.where(p <= 0.0, OPACITY_EPS, np.where(p >= 1.0, 1.0 - OPACITY_EPS, p))
    return np.log(p) - np.log1p(-p)


def _field_names(n_rest):
    return (["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def load_gaussian_ply(path) -> GaussianCloud:
    """Read a splat PLY (ascii or binary little-endian) into linear-space arrays."""
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # plyfile raises a zoo of parse errors
        raise PlyFormatError(f"{path}: cannot parse PLY header/body: {exc}") from exc
    if "vertex" not in ply:
        raise PlyFormatError(f"{path}: missing 'vertex' element")
    vertex = ply["vertex"]
    names = [p.name for p in vertex.properties]
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest % 3 or (n_rest // 3 + 1) not in _SH_COUNTS:
        raise PlyFormatError(f"{path}: unsupported number of f_rest_* fields ({n_rest})")
    required = _field_names(n_rest)
    for name in required:
        if name not in names:
            raise PlyFormatError(f"{path}: missing required field '{name}'")
    optional = {f"shrot_{i}" for i in range(9)} | {"is_fill"}
    unknown = [n for n in names if n not in set(required) | optional]
    if unknown:
        log.warning("%s: ignoring PLY properties %s", path, unknown)

    data = vertex.data
    cols = np.stack([np.asarray(data[n], dtype=np.float64) for n in required], axis=1)
    bad = ~np.isfinite(cols)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise PlyDataError(f"{path}: non-finite value in field '{required[col]}' of element {row}", index=int(row))

    n = len(cols)
    k = n_rest // 3 + 1
    centers = cols[:, 0:3].copy()
    sh = np.empty((n, k, 3))
    sh[:, 0, :] = cols[:, 3:6]
    if k > 1:
        rest = cols[:, 6:6 + n_rest].reshape(n, 3, k - 1)
        sh[:, 1:, :] = np.transpose(rest, (0, 2, 1))
    o = 6 + n_rest
    opacities = _sigmoid(cols[:, o])
    scales = np.exp(cols[:, o + 1:o + 4])
    quats = cols[:, o + 4:o + 8].copy()
    qn = np.linalg.norm(quats, axis=1)
    if np.any(qn == 0.0):
        i = int(np.argmax(qn == 0.0))
        raise PlyDataError(f"{path}: zero quaternion at element {i}", index=i)
    # already-unit quaternions are kept as stored so save/load is bit-stable
    off = np.abs(qn - 1.0) > _QUAT_TOL
    quats[off] /= qn[off, None]

    sh_rotation = None
    if all(f"shrot_{i}" in names for i in range(9)):
        sh_rotation = np.stack([np.asarray(data[f"shrot_{i}"], dtype=np.float64) for i in range(9)],
                               axis=1).reshape(n, 3, 3)
    is_fill = np.asarray(data["is_fill"]).astype(bool) if "is_fill" in names else None
    stored = (cols[:, o].copy(), cols[:, o + 1:o + 4].copy())
    return GaussianCloud(centers, scales, quats, opacities, sh, sh_rotation, is_fill, stored)


def save_gaussian_ply(cloud: GaussianCloud, path, precision: str = "float", ascii: bool = False) -> None:
    """Write ``cloud`` in the splat convention.

    Opacities of exactly 0 or 1 are clamped to [1e-6, 1 - 1e-6] before the
    logit. ``precision`` is ``"float"`` (what viewers expect) or ``"double"``.
    """
    if precision not in ("float", "double"):
        raise ValueError(f"precision must be 'float' or 'double', got {precision!r}")
    dt = "f4" if precision == "float" else "f8"
    n, k = len(cloud), cloud.sh.shape[1]
    n_rest = 3 * (k - 1)
    names = _field_names(n_rest)
    cols = [cloud.centers, cloud.sh[:, 0, :]]
    if k > 1:
        cols.append(np.transpose(cloud.sh[:, 1:, :], (0, 2, 1)).reshape(n, n_rest))
    logit_op, log_scale = cloud.raw_fields()
    cols += [logit_op[:, None], log_scale, cloud.rotations]
    if cloud.sh_rotation is not None:
        names = names + [f"shrot_{i}" for i in range(9)]
        cols.append(np.asarray(cloud.sh_rotation).reshape(n, 9))
    table = np.concatenate([np.asarray(c, dtype=np.float64).reshape(n, -1) for c in cols], axis=1)

    dtype = [(name, dt) for name in names]
    if cloud.is_fill is not None:
        dtype.append(("is_fill", "u1"))
    arr = np.empty(n, dtype=dtype)
    for j, name in enumerate(names):
        arr[name] = table[:, j]
    if cloud.is_fill is not None:
        arr["is_fill"] = cloud.fill_mask().astype(np.uint8)
    PlyData([PlyElement.describe(arr, "vertex")], text=ascii, byte_order="<").write(str(path))


def axis_ratios(scales: np.ndarray) -> np.ndarray:
    s = np.asarray(scales, dtype=np.float64)
    return s.max(axis=-1) / s.min(axis=-1)


def anisotropy_metric(cloud_or_scales, r: float) -> float:
    """Mean over kernels of max(max(S)/min(S), r) - r."""
    if r < 1:
        raise ValueError(f"anisotropy ratio r must be >= 1, got {r}")
    scales = cloud_or_scales.scales if isinstance(cloud_or_scales, GaussianCloud) else cloud_or_scales
    ratios = axis_ratios(scales)
    if len(ratios) == 0:
        return 0.0
    return float(np.mean(np.maximum(ratios, r) - r))


def clamp_anisotropy(cloud: GaussianCloud, r: float) -> GaussianCloud:
    """Shrink every axis longer than r * min-axis down to r * min-axis."""
    if r < 1:
        raise ValueError(f"anisotropy ratio r must be >= 1, got {r}")
    s = cloud.scales
    smin = s.min(axis=1, keepdims=True)
    cap = r * smin
    # keep cap / smin <= r exactly in floating point
    for _ in range(4):
        over = cap / smin > r
        if not over.any():
            break
        cap = np.where(over, np.nextafter(cap, 0.0), cap)
    return cloud.replace(scales=np.minimum(s, cap))
