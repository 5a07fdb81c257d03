"""Explicit APIC material point method on a dense grid with quadratic B-splines."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import NumericalBlowupError, OutOfDomainError, ParameterError, DegenerateDeformationError
from . import _kernels
from .materials import MaterialModel, det3

log = logging.getLogger(__name__)

FACES = ("x-", "x+", "y-", "y+", "z-", "z+")
BOUNDARY_KINDS = ("sticky", "slip", "none")
_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SPLATSIM_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass
class EulerianGrid:
    """Node-centred lattice: node (i, j, k) sits at origin + (i, j, k) * dx."""

    origin: np.ndarray
    dx: float
    dims: tuple
    mass: np.ndarray = field(init=False, repr=False)
    velocity: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.dims = tuple(int(d) for d in self.dims)
        if not self.dx > 0:
            raise ParameterError(f"grid spacing must be positive, got {self.dx}")
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ParameterError(f"grid needs at least 4 nodes per axis, got {self.dims}")
        self.mass = np.zeros(self.n_nodes)
        self.velocity = np.zeros((self.n_nodes, 3))

    @classmethod
    def covering(cls, lo, hi, dx, pad=2):
        """Grid whose nodes span [lo - pad*dx, hi + pad*dx]."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        n = np.ceil((hi - lo) / dx - 1e-9).astype(int) + 2 * pad + 1
        return cls(lo - pad * dx, dx, tuple(n))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.dx

    def zero(self):
        self.mass[:] = 0.0
        self.velocity[:] = 0.0

    def node_index(self, ijk):
        ijk = np.asarray(ijk)
        ny, nz = self.dims[1], self.dims[2]
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def node_coords(self, flat):
        flat = np.asarray(flat)
        ny, nz = self.dims[1], self.dims[2]
        return np.stack([flat // (ny * nz), (flat // nz) % ny, flat % nz], axis=-1)

    def node_positions(self, flat=None):
        if flat is None:
            flat = np.arange(self.n_nodes)
        return self.origin + self.node_coords(flat) * self.dx


@dataclass
class SimConfig:
    dt: float = 1e-4
    gravity: Sequence[float] = (0.0, 0.0, -9.8)
    bspline_degree: int = 2
    cfl_limit: float = 0.5
    boundary: dict = field(default_factory=lambda: {f: "sticky" for f in FACES})
    margin: int = 2
    substeps_per_frame: int = 1
    rpic_damping: bool = False
    workers: Optional[int] = None

    def __post_init__(self):
        self.gravity = np.asarray(self.gravity, dtype=np.float64)
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if not 0 < self.cfl_limit <= 1:
            raise ParameterError(f"cfl_limit must be in (0, 1], got {self.cfl_limit}")
        if self.bspline_degree != 2:
            raise ParameterError("only quadratic B-splines (degree 2) are supported")
        bc = {f: "sticky" for f in FACES}
        bc.update(self.boundary or {})
        for face, kind in bc.items():
            if face not in FACES:
                raise ParameterError(f"unknown boundary face {face!r}")
            if kind not in BOUNDARY_KINDS:
                raise ParameterError(f"boundary {face}: unknown condition {kind!r}")
        self.boundary = bc

    @property
    def n_workers(self) -> int:
        return self.workers if self.workers else default_workers()


@dataclass
class ParticleState:
    """Per-particle arrays (structure of arrays)."""

    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    vol0: np.ndarray
    F_E: np.ndarray
    C: np.ndarray
    material_id: np.ndarray
    grad_v: np.ndarray = None
    dF: np.ndarray = None

    def __post_init__(self):
        n = len(self.x)
        if self.grad_v is None:
            self.grad_v = np.zeros((n, 3, 3))
        if self.dF is None:
            self.dF = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()

    def __len__(self):
        return len(self.x)

    def copy(self) -> "ParticleState":
        return ParticleState(*(np.array(getattr(self, f)) for f in
                               ("x", "v", "mass", "vol0", "F_E", "C", "material_id", "grad_v", "dF")))


@dataclass
class Stencil:
    nodes: np.ndarray    # (N, 27) flat node indices
    w: np.ndarray        # (N, 27)
    dw: np.ndarray       # (N, 27, 3)
    offsets: np.ndarray  # (N, 27, 3) x_i - x_p


def bspline_weights(xp, grid: EulerianGrid) -> Stencil:
    """Quadratic B-spline weights and gradients over the 3x3x3 stencil of each particle."""
    xp = np.atleast_2d(np.asarray(xp, dtype=np.float64))
    fx = (xp - grid.origin) / grid.dx
    base = np.floor(fx - 0.5).astype(np.int64)
    bad = np.any((base < 0) | (base + 2 > np.array(grid.dims) - 1) | ~np.isfinite(fx), axis=1)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise OutOfDomainError(
            f"{len(idx)} particle(s) too close to or outside the grid boundary, first indices {idx[:10].tolist()}",
            idx)
    f = fx - base
    w1d = np.stack([0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2], axis=1)  # (N,3 nodes,3 axes)
    dw1d = np.stack([f - 1.5, -2.0 * (f - 1.0), f - 0.5], axis=1) / grid.dx
    ox, oy, oz = _OFFSETS[:, 0], _OFFSETS[:, 1], _OFFSETS[:, 2]
    wx, wy, wz = w1d[:, ox, 0], w1d[:, oy, 1], w1d[:, oz, 2]
    w = wx * wy * wz
    dw = np.stack([dw1d[:, ox, 0] * wy * wz, wx * dw1d[:, oy, 1] * wz, wx * wy * dw1d[:, oz, 2]], axis=-1)
    ijk = base[:, None, :] + _OFFSETS[None]
    offsets = (ijk - fx[:, None, :]) * grid.dx
    return Stencil(grid.node_index(ijk), w, dw, offsets)


def scatter_add(nodes, values, n_nodes, workers=1):
    """Sum ``values`` (N, 27[, k]) into ``n_nodes`` bins.

    Each worker owns a contiguous particle range and a private accumulator;
    partial grids are reduced in worker order, so the result depends only on
    the worker count.
    """
    values = np.asarray(values)
    k = values.shape[2] if values.ndim == 3 else None
    n = len(nodes)

    def partial(lo, hi):
        idx = nodes[lo:hi].ravel()
        if k is None:
            return np.bincount(idx, weights=values[lo:hi].ravel(), minlength=n_nodes)
        vals = values[lo:hi].reshape(-1, k)
        return np.stack([np.bincount(idx, weights=vals[:, c], minlength=n_nodes) for c in range(k)], axis=1)

    return _reduce_chunks(partial, n, workers)


def _chunks(n, workers):
    workers = max(1, min(int(workers), n)) if n else 1
    return [(n * i // workers, n * (i + 1) // workers) for i in range(workers)]


def _reduce_chunks(partial, n, workers):
    """Run ``partial(lo, hi)`` per worker chunk and sum the results in chunk order."""
    bounds = _chunks(n, workers)
    if len(bounds) == 1:
        return partial(*bounds[0])
    with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
        parts = list(pool.map(lambda b: partial(*b), bounds))
    out = parts[0]
    for part in parts[1:]:
        out += part
    return out


def check_domain(xp, grid: EulerianGrid):
    """Raise OutOfDomainError if any particle's stencil leaves the grid."""
    fx = (np.asarray(xp, dtype=np.float64) - grid.origin) / grid.dx
    with np.errstate(invalid="ignore"):
        base = np.floor(fx - 0.5)
        bad = ~np.all((base >= 0) & (base + 2 <= np.array(grid.dims) - 1), axis=1)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise OutOfDomainError(
            f"{len(idx)} particle(s) too close to or outside the grid boundary, first indices {idx[:10].tolist()}",
            idx)


def p2g(particles: ParticleState, grid: EulerianGrid, workers: int = 1):
    """APIC scatter of mass and momentum; leaves grid.velocity = momentum / mass."""
    check_domain(particles.x, grid)
    p = particles
    _, ny, nz = grid.dims
    n_nodes = grid.n_nodes

    def partial(lo, hi):
        acc = np.zeros((n_nodes, 4))
        mass, mom = acc[:, 0], acc[:, 1:]
        _kernels.p2g_range(p.x, p.v, p.C, p.mass, grid.origin, grid.dx, ny, nz, lo, hi, mass, mom)
        return acc

    acc = _reduce_chunks(partial, len(p), workers)
    grid.mass[:] = acc[:, 0]
    active = grid.mass > 0
    grid.velocity[:] = 0.0
    grid.velocity[active] = acc[active, 1:] / grid.mass[active, None]


def particle_stress(particles: ParticleState, materials: Sequence[MaterialModel]) -> np.ndarray:
    tau = np.zeros((len(particles), 3, 3))
    for mid, model in enumerate(materials):
        sel = particles.material_id == mid
        if sel.any():
            try:
                tau[sel] = model.stress(particles.F_E[sel])
            except DegenerateDeformationError as exc:
                idx = np.flatnonzero(sel)[exc.index] if exc.index is not None else None
                raise DegenerateDeformationError(f"particle {idx}: {exc}", index=idx) from exc
    return tau


def grid_forces(particles: ParticleState, grid: EulerianGrid, tau, workers: int = 1) -> np.ndarray:
    """Nodal internal forces -sum_p V_p0 tau_p grad w_ip."""
    _, ny, nz = grid.dims
    tau_vol = np.ascontiguousarray(tau * particles.vol0[:, None, None])

    def partial(lo, hi):
        f = np.zeros((grid.n_nodes, 3))
        _kernels.force_range(particles.x, tau_vol, grid.origin, grid.dx, ny, nz, lo, hi, f)
        return f

    return _reduce_chunks(partial, len(particles), workers)


def apply_boundary(grid: EulerianGrid, cfg: SimConfig):
    v = grid.velocity.reshape(grid.dims + (3,))
    m = cfg.margin
    for axis in range(3):
        for face, sl in ((f"{'xyz'[axis]}-", slice(0, m)), (f"{'xyz'[axis]}+", slice(grid.dims[axis] - m, None))):
            kind = cfg.boundary[face]
            idx = [slice(None)] * 3
            idx[axis] = sl
            if kind == "sticky":
                v[tuple(idx)] = 0.0
            elif kind == "slip":
                v[tuple(idx) + (axis,)] = 0.0


def grid_update(grid: EulerianGrid, particles: ParticleState, materials, cfg: SimConfig,
                workers: int = 1, step: int = None):
    """Forward-Euler grid momentum update with internal stress and gravity, then boundary conditions."""
    tau = particle_stress(particles, materials)
    f_grid = grid_forces(particles, grid, tau, workers)
    active = grid.mass > 0
    grid.velocity[active] += cfg.dt * f_grid[active] / grid.mass[active, None] + cfg.dt * cfg.gravity
    if not np.all(np.isfinite(grid.velocity[active])):
        tau_norm = np.linalg.norm(tau.reshape(len(tau), -1), axis=1)
        worst = int(np.argmax(np.where(np.isfinite(tau_norm), tau_norm, np.inf)))
        raise NumericalBlowupError(
            f"non-finite grid velocity (worst particle {worst}); try a smaller dt",
            step=step, particle=worst)
    apply_boundary(grid, cfg)
    return f_grid


def g2p(particles: ParticleState, grid: EulerianGrid, materials, cfg: SimConfig, workers: int = 1):
    """Gather velocities, update C, positions and the elastic deformation gradient."""
    n = len(particles)
    _, ny, nz = grid.dims
    v = np.empty((n, 3))
    C = np.empty((n, 3, 3))
    grad_v = np.empty((n, 3, 3))

    def gather(lo, hi):
        _kernels.g2p_range(particles.x, grid.velocity, grid.origin, grid.dx, ny, nz, lo, hi, v, C, grad_v)

    bounds = _chunks(n, workers)
    if len(bounds) == 1:
        gather(*bounds[0])
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as pool:
            list(pool.map(lambda b: gather(*b), bounds))
    if cfg.rpic_damping:
        C = 0.5 * (C - np.swapaxes(C, 1, 2))
    dF = np.eye(3) + cfg.dt * grad_v
    F_trial = dF @ particles.F_E
    F_new = np.empty_like(F_trial)
    for mid, model in enumerate(materials):
        sel = particles.material_id == mid
        if sel.any():
            F_new[sel] = model.project(F_trial[sel], cfg.dt)
    J = det3(F_new)
    if np.any(~(J > 0)):
        idx = int(np.flatnonzero(~(J > 0))[0])
        raise DegenerateDeformationError(f"particle {idx}: det(F_E) = {J[idx]} <= 0 after update", index=idx)
    particles.v = v
    particles.x = particles.x + cfg.dt * v
    particles.C = C
    particles.grad_v = grad_v
    particles.dF = dF
    particles.F_E = F_new


def initialize_particles(positions, material_ids, materials: Sequence[MaterialModel], grid: EulerianGrid,
                         velocities=None) -> ParticleState:
    """Volumes from background-cell occupancy (cell volume / particles in cell), masses from density."""
    x = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(x)
    if n == 0:
        raise ParameterError("cannot simulate an empty particle set")
    mid = np.broadcast_to(np.asarray(material_ids, dtype=np.int64), (n,)).copy()
    if mid.min() < 0 or mid.max() >= len(materials):
        raise ParameterError("material id out of range")
    fx = (x - grid.origin) / grid.dx
    outside = np.any((fx < 0.5) | (fx > np.array(grid.dims) - 1.5) | ~np.isfinite(fx), axis=1)
    if outside.any():
        idx = np.flatnonzero(outside)
        raise OutOfDomainError(f"{len(idx)} center(s) outside the simulation domain: {idx[:20].tolist()}", idx)
    cell = np.floor(fx).astype(np.int64)
    _, inverse, counts = np.unique(cell, axis=0, return_inverse=True, return_counts=True)
    vol0 = grid.dx ** 3 / counts[inverse.ravel()]
    density = np.array([m.params.density for m in materials])[mid]
    v = np.zeros((n, 3)) if velocities is None else np.array(velocities, dtype=np.float64).reshape(n, 3)
    return ParticleState(
        x=x.copy(), v=v, mass=density * vol0, vol0=vol0,
        F_E=np.broadcast_to(np.eye(3), (n, 3, 3)).copy(),
        C=np.zeros((n, 3, 3)), material_id=mid,
    )


class Simulator:
    """Owns particles, grid and materials and advances them one explicit step at a time."""

    def __init__(self, particles: ParticleState, grid: EulerianGrid, materials: List[MaterialModel],
                 cfg: SimConfig):
        self.particles = particles
        self.grid = grid
        self.materials = list(materials)
        self.cfg = cfg
        self.step_count = 0
        self.hooks: List[Callable[["Simulator"], None]] = []
        self.last_cfl_ratio = 0.0

    @property
    def time(self) -> float:
        return self.step_count * self.cfg.dt

    def cfl_ratio(self) -> float:
        vmax = float(np.max(np.linalg.norm(self.particles.v, axis=1), initial=0.0))
        return self.cfg.dt * vmax / self.grid.dx

    def advance_step(self):
        cfg = self.cfg
        self.last_cfl_ratio = ratio = self.cfl_ratio()
        if ratio > cfg.cfl_limit:
            vmax = ratio * self.grid.dx / cfg.dt
            log.warning("step %d: CFL ratio %.3g exceeds %.3g; suggest dt <= %.3g",
                        self.step_count, ratio, cfg.cfl_limit, cfg.cfl_limit * self.grid.dx / vmax)
        workers = cfg.n_workers
        self.grid.zero()
        p2g(self.particles, self.grid, workers)
        grid_update(self.grid, self.particles, self.materials, cfg, workers, step=self.step_count)
        g2p(self.particles, self.grid, self.materials, cfg, workers)
        for hook in self.hooks:
            hook(self)
        self.step_count += 1

    def run(self, steps: int):
        for _ in range(steps):
            self.advance_step()

    # diagnostics -------------------------------------------------------------
    def total_mass(self) -> float:
        return float(self.particles.mass.sum())

    def momentum(self) -> np.ndarray:
        return (self.particles.mass[:, None] * self.particles.v).sum(axis=0)

    def center_of_mass(self) -> np.ndarray:
        m = self.particles.mass
        return (m[:, None] * self.particles.x).sum(axis=0) / m.sum()

    def kinetic_energy(self) -> float:
        p = self.particles
        return float(0.5 * np.sum(p.mass * np.sum(p.v * p.v, axis=1)))

    def elastic_energy(self) -> float:
        p = self.particles
        total = 0.0
        for mid, model in enumerate(self.materials):
            sel = p.material_id == mid
            if sel.any():
                total += float(np.sum(p.vol0[sel] * model.energy_density(p.F_E[sel])))
        return total

    def potential_energy(self) -> float:
        p = self.particles
        return float(-np.sum(p.mass * (p.x @ self.cfg.gravity)))
