"""Small deterministic software splatting renderer used to check kinematics.

Conventions: OpenCV-style camera (x right, y down, looking along +z);
pixel (u, v) has its centre at integer coordinates; the projected 2D
covariance gets a 0.3 px^2 low-pass and per-splat alpha is capped at 0.99.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gs_io import GaussianCloud

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

LOW_PASS = 0.3
ALPHA_MAX = 0.99


def sh_basis(d, degree):
    """Real SH basis values (..., (degree+1)^2) at unit directions d (..., 3)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree > 0:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree > 1:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree > 2:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=-1)


def sh_eval(coeffs, d, R_sh=None):
    """RGB from SH coefficients (..., K, 3) seen along d, with the basis rotated by R_sh.

    The basis is evaluated at R^T d; 0.5 is added and the result clamped at 0.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if R_sh is not None:
        d = np.einsum("...ji,...j->...i", R_sh, d)
    degree = int(round(np.sqrt(coeffs.shape[-2]))) - 1
    basis = sh_basis(d, degree)
    return np.maximum(np.einsum("...k,...kc->...c", basis, coeffs) + 0.5, 0.0)


@dataclass
class Camera:
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(self.R.T @ self.R - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0, 0, 1), fov_deg=50.0, width=128, height=128, near=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(R, -R @ eye, f, f, (width - 1) / 2, (height - 1) / 2, width, height, near)

    @classmethod
    def from_dict(cls, d):
        if "eye" in d:
            return cls.look_at(d["eye"], d.get("target", (0, 0, 0)), d.get("up", (0, 0, 1)),
                               d.get("fov", 50.0), d.get("width", 128), d.get("height", 128),
                               d.get("near", 0.01))
        w, h = d.get("width", 128), d.get("height", 128)
        return cls(d["R"], d["t"], d["fx"], d["fy"], d.get("cx", (w - 1) / 2), d.get("cy", (h - 1) / 2),
                   w, h, d.get("near", 0.01))

    def rotated(self, Q):
        """The same camera after rotating the whole world by Q about the origin."""
        Q = np.asarray(Q, dtype=np.float64)
        return Camera(self.R @ Q.T, self.t.copy(), self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height, self.near)


def load_camera_path(path):
    """One camera per line of a JSON-lines file."""
    cams = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            cams.append(Camera.from_dict(json.loads(line)))
    return cams


@dataclass
class Splats2D:
    means: np.ndarray     # (M, 2) pixels
    covs: np.ndarray      # (M, 2, 2)
    depths: np.ndarray    # (M,)
    colors: np.ndarray    # (M, 3)
    opacities: np.ndarray  # (M,)
    index: np.ndarray     # (M,) source kernel index


def project_gaussians(centers, covariances, camera: Camera):
    """EWA projection. Returns (means, 2D covariances, depths, visible mask)."""
    xc = np.asarray(centers, dtype=np.float64) @ camera.R.T + camera.t
    z = xc[:, 2]
    visible = z > camera.near
    zs = np.where(visible, z, 1.0)
    means = np.stack([camera.fx * xc[:, 0] / zs + camera.cx, camera.fy * xc[:, 1] / zs + camera.cy], axis=1)
    Jm = np.zeros((len(xc), 2, 3))
    Jm[:, 0, 0] = camera.fx / zs
    Jm[:, 0, 2] = -camera.fx * xc[:, 0] / zs ** 2
    Jm[:, 1, 1] = camera.fy / zs
    Jm[:, 1, 2] = -camera.fy * xc[:, 1] / zs ** 2
    M = Jm @ camera.R
    cov2 = M @ np.asarray(covariances) @ np.swapaxes(M, 1, 2)
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, 1, 2)) + LOW_PASS * np.eye(2)
    radius = 3.0 * np.sqrt(np.linalg.eigvalsh(cov2)[:, 1])
    on_screen = ((means[:, 0] + radius >= 0) & (means[:, 0] - radius <= camera.width - 1)
                 & (means[:, 1] + radius >= 0) & (means[:, 1] - radius <= camera.height - 1))
    return means, cov2, z, visible & on_screen


def project_gaussian(center, covariance, camera: Camera):
    """Single-kernel projection; returns (mean, cov2d, depth) or None when culled."""
    m, c, z, vis = project_gaussians(np.asarray(center)[None], np.asarray(covariance)[None], camera)
    if not vis[0]:
        return None
    return m[0], c[0], float(z[0])


def splat(centers, covariances, opacities, sh, camera: Camera, sh_rotation=None) -> Splats2D:
    means, cov2, depth, vis = project_gaussians(centers, covariances, camera)
    idx = np.flatnonzero(vis)
    dirs = np.asarray(centers, dtype=np.float64)[idx] - camera.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    R = None if sh_rotation is None else np.asarray(sh_rotation)[idx]
    colors = sh_eval(np.asarray(sh)[idx], dirs, R)
    order = np.lexsort((idx, depth[idx]))
    idx = idx[order]
    return Splats2D(means[idx], cov2[idx], depth[idx], colors[order], np.asarray(opacities)[idx], idx)


def composite(splats: Splats2D, width, height, background=0.0):
    """Front-to-back alpha compositing of depth-sorted splats."""
    img = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    for mean, cov, color, op in zip(splats.means, splats.covs, splats.colors, splats.opacities):
        inv = np.linalg.inv(cov)
        r = 3.0 * np.sqrt(np.linalg.eigvalsh(cov)[1])
        u0, u1 = max(int(np.floor(mean[0] - r)), 0), min(int(np.ceil(mean[0] + r)), width - 1)
        v0, v1 = max(int(np.floor(mean[1] - r)), 0), min(int(np.ceil(mean[1] + r)), height - 1)
        if u0 > u1 or v0 > v1:
            continue
        du = np.arange(u0, u1 + 1) - mean[0]
        dv = np.arange(v0, v1 + 1) - mean[1]
        q = inv[0, 0] * du[None, :] ** 2 + 2 * inv[0, 1] * du[None, :] * dv[:, None] + inv[1, 1] * dv[:, None] ** 2
        alpha = np.minimum(op * np.exp(-0.5 * q), ALPHA_MAX)
        T = trans[v0:v1 + 1, u0:u1 + 1]
        img[v0:v1 + 1, u0:u1 + 1] += (T * alpha)[..., None] * color
        trans[v0:v1 + 1, u0:u1 + 1] = T * (1.0 - alpha)
    if background:
        img += trans[..., None] * background
    return img


def render(centers, covariances, opacities, sh, camera: Camera, sh_rotation=None, background=0.0):
    s = splat(centers, covariances, opacities, sh, camera, sh_rotation)
    return composite(s, camera.width, camera.height, background)


def render_cloud(cloud: GaussianCloud, camera: Camera, use_sh_rotation=True, background=0.0):
    R = cloud.sh_rotation if use_sh_rotation else None
    return render(cloud.centers, cloud.covariances(), cloud.opacities, cloud.sh, camera, R, background)


def to_bytes(img):
    """Float image to uint8: clip to [0, 1], scale by 255, round half to even."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img):
    b = to_bytes(img)
    h, w = b.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(b.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    # header: magic, dims, maxval, each followed by exactly one whitespace byte
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    body = data[pos + 1: pos + 1 + w * h * 3]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def write_png(path, img):
    from PIL import Image
    Image.fromarray(to_bytes(img)).save(path)
