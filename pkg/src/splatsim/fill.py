"""Filling hollow reconstructions with particles using the kernels' opacity field."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import FillOverflowError, ParameterError
from .gs_io import GaussianCloud

log = logging.getLogger(__name__)

TRUNCATION = 3.0  # Mahalanobis radius


@dataclass
class OpacityGrid:
    """Cell-centred scalar field; cell (i, j, k) is centred at origin + (i + 0.5, ...) * dx."""

    origin: np.ndarray
    dx: float
    values: np.ndarray  # (nx, ny, nz)

    @property
    def dims(self):
        return self.values.shape

    def cell_centers(self, cells=None):
        if cells is None:
            cells = np.indices(self.dims).reshape(3, -1).T
        return np.asarray(self.origin) + (np.asarray(cells) + 0.5) * self.dx


@dataclass
class FillConfig:
    sigma_th: float = 0.5
    particles_per_cell: int = 8
    max_fill: int = 200_000
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_th > 0:
            raise ParameterError(f"sigma_th must be positive, got {self.sigma_th}")
        if self.particles_per_cell < 1 or self.max_fill < 1:
            raise ParameterError("particles_per_cell and max_fill must be positive")


def rasterize_opacity(cloud: GaussianCloud, origin, dx, dims) -> OpacityGrid:
    """Sample sum_p opacity_p * exp(-m_p^2 / 2) at cell centres, truncated at m_p = 3."""
    origin = np.asarray(origin, dtype=np.float64)
    dims = tuple(int(d) for d in dims)
    values = np.zeros(dims)
    covs = cloud.covariances()
    for p in range(len(cloud)):
        A = covs[p]
        try:
            inv = np.linalg.inv(A)
            if not np.all(np.isfinite(inv)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            log.warning("kernel %d has a singular covariance; skipped", p)
            continue
        ext = TRUNCATION * np.sqrt(np.diag(A))
        c = cloud.centers[p]
        lo = np.maximum(np.ceil((c - ext - origin) / dx - 0.5).astype(int), 0)
        hi = np.minimum(np.floor((c + ext - origin) / dx - 0.5).astype(int), np.array(dims) - 1)
        if np.any(lo > hi):
            continue
        axes = [origin[a] + (np.arange(lo[a], hi[a] + 1) + 0.5) * dx - c[a] for a in range(3)]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        d = np.stack([X, Y, Z], axis=-1)
        m2 = np.einsum("...i,ij,...j->...", d, inv, d)
        contrib = np.where(m2 <= TRUNCATION ** 2, cloud.opacities[p] * np.exp(-0.5 * m2), 0.0)
        values[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] += contrib
    return OpacityGrid(origin, float(dx), values)


def detect_intersection(values, sigma_th):
    """Positions k where the traversal steps from values[k-1] < th to values[k] > th."""
    v = np.asarray(values, dtype=np.float64)
    hits = (v[:-1] < sigma_th) & (v[1:] > sigma_th)
    return (np.flatnonzero(hits) + 1).tolist()


def _ray_counts(values, sigma_th, axis):
    """Crossing counts for rays leaving every cell along +axis and -axis."""
    v = np.moveaxis(values, axis, -1)
    low, high = v < sigma_th, v > sigma_th
    # crossing entering index k from k-1 (forward) / from k+1 (backward)
    fwd = np.zeros(v.shape, dtype=np.int64)
    fwd[..., 1:] = low[..., :-1] & high[..., 1:]
    bwd = np.zeros(v.shape, dtype=np.int64)
    bwd[..., :-1] = low[..., 1:] & high[..., :-1]
    # ray from cell i along +axis sees forward crossings at k > i
    cf = np.cumsum(fwd[..., ::-1], axis=-1)[..., ::-1]
    plus = np.zeros(v.shape, dtype=np.int64)
    plus[..., :-1] = cf[..., 1:]
    cb = np.cumsum(bwd, axis=-1)
    minus = np.zeros(v.shape, dtype=np.int64)
    minus[..., 1:] = cb[..., :-1]
    return np.moveaxis(plus, -1, axis), np.moveaxis(minus, -1, axis)


def select_fill_cells(og: OpacityGrid, cfg: FillConfig, parity_axis: int = 0):
    """Interior cells: every axis ray hits the surface, and the +parity_axis ray crosses it an odd number of times."""
    vals = og.values
    cond1 = np.ones(vals.shape, dtype=bool)
    parity = None
    for axis in range(3):
        plus, minus = _ray_counts(vals, cfg.sigma_th, axis)
        cond1 &= (plus > 0) & (minus > 0)
        if axis == parity_axis:
            parity = plus % 2 == 1
    selected = cond1 & parity & (vals < cfg.sigma_th)
    cells = np.argwhere(selected)
    n_new = len(cells) * cfg.particles_per_cell
    if n_new > cfg.max_fill:
        raise FillOverflowError(
            f"internal fill would spawn {n_new} particles (> max_fill={cfg.max_fill}); "
            "raise the opacity threshold or the cap", n_new)
    return cells


def fill_radius(volume):
    return (3.0 * volume / (4.0 * math.pi)) ** (1.0 / 3.0)


def jitter_offsets(n_cells, per_cell, seed):
    """Stratified offsets in [0, 1)^3: one scrambled Halton pattern, toroidally shifted per cell."""
    base = qmc.Halton(d=3, scramble=True, seed=seed).random(per_cell)
    shift = np.random.default_rng(seed).random((n_cells, 1, 3))
    return np.mod(base[None] + shift, 1.0)


def spawn_fill_particles(cells, og: OpacityGrid, cloud: GaussianCloud, cfg: FillConfig) -> GaussianCloud:
    """New isotropic kernels inside ``cells``; appearance copied from the nearest source kernel."""
    if len(cloud) == 0:
        raise ParameterError("cannot inherit appearance from an empty cloud")
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    ppc = cfg.particles_per_cell
    offs = jitter_offsets(len(cells), ppc, cfg.seed)
    pos = (np.asarray(og.origin) + (cells[:, None, :] + offs) * og.dx).reshape(-1, 3)
    n = len(pos)
    _, nearest = cKDTree(cloud.centers).query(pos, k=1)
    nearest = np.asarray(nearest, dtype=np.int64)
    r = fill_radius(og.dx ** 3 / ppc)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    sh_rot = None
    if cloud.sh_rotation is not None:
        sh_rot = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    return GaussianCloud(
        centers=pos,
        scales=np.full((n, 3), r),
        rotations=quats,
        opacities=cloud.opacities[nearest].copy(),
        sh=cloud.sh[nearest].copy(),
        sh_rotation=sh_rot,
        is_fill=np.ones(n, dtype=bool),
    )


def fill_cloud(cloud: GaussianCloud, origin, dx, dims, cfg: FillConfig):
    """Rasterize, select and spawn; returns (cloud with fill appended, number of new kernels)."""
    og = rasterize_opacity(cloud, origin, dx, dims)
    cells = select_fill_cells(og, cfg)
    if len(cells) == 0:
        return cloud, 0
    extra = spawn_fill_particles(cells, og, cloud, cfg)
    base = cloud if cloud.is_fill is not None else cloud.replace(is_fill=np.zeros(len(cloud), dtype=bool))
    return GaussianCloud.concatenate(base, extra), len(extra)
