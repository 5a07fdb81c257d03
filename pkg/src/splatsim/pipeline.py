"""load -> clamp -> fill -> simulate -> export/render."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .config import Report, Scene, parse_scene
from .errors import StructuralDiffError
from .fill import fill_cloud
from .gs_io import (GaussianCloud, anisotropy_metric, clamp_anisotropy, covariance_from_factors,
                    factors_from_covariance, load_gaussian_ply, save_gaussian_ply)
from .kinematics import KernelKinematicState
from .mpm import EulerianGrid, SimConfig, Simulator, initialize_particles
from .render import render_cloud, write_png, write_ppm

log = logging.getLogger(__name__)


@dataclass
class Normalization:
    """world -> sim: (x - center) * scale + offset."""

    center: np.ndarray
    scale: float
    offset: np.ndarray

    def to_sim(self, x):
        return (np.asarray(x) - self.center) * self.scale + self.offset

    def to_world(self, x):
        return (np.asarray(x) - self.offset) / self.scale + self.center


def normalization_for(scene: Scene, cloud: GaussianCloud) -> Normalization:
    if scene.region is not None:
        lo, hi = scene.region.lo, scene.region.hi
    else:
        lo, hi = cloud.centers.min(axis=0), cloud.centers.max(axis=0)
    center = 0.5 * (lo + hi)
    if scene.normalize:
        edge = float(np.max(hi - lo))
        scale = 2.0 / edge if edge > 0 else 1.0
        return Normalization(center, scale, np.ones(3))
    return Normalization(center, 1.0, center.copy())


def sim_box(scene: Scene, norm: Normalization, cloud: GaussianCloud):
    """Axis-aligned simulation box in sim coordinates and the grid spacing."""
    if scene.normalize:
        lo, hi = np.zeros(3), np.full(3, 2.0)
    elif scene.region is not None:
        lo, hi = scene.region.lo.copy(), scene.region.hi.copy()
    else:
        lo, hi = cloud.centers.min(axis=0), cloud.centers.max(axis=0)
    dx = float(np.max(hi - lo)) / scene.resolution
    return lo, hi, dx


class Pipeline:
    """Everything the simulate/fill/render commands share."""

    def __init__(self, scene: Scene):
        self.scene = scene
        self.fill_count = 0

    # -- preparation -----------------------------------------------------------
    def prepare(self):
        sc = self.scene
        cloud = load_gaussian_ply(sc.input)
        if sc.anisotropy_r is not None:
            cloud = clamp_anisotropy(cloud, sc.anisotropy_r)
        if cloud.is_fill is None:
            cloud = cloud.replace(is_fill=np.zeros(len(cloud), dtype=bool))
        norm = normalization_for(sc, cloud)
        lo, hi, dx = sim_box(sc, norm, cloud)
        in_region = np.ones(len(cloud), dtype=bool) if sc.region is None else sc.region.contains(cloud.centers)

        if sc.fill_enabled and in_region.any():
            sub = _subset(cloud, in_region)
            sim_sub = sub.replace(centers=norm.to_sim(sub.centers), scales=sub.scales * norm.scale)
            dims = np.ceil((hi - lo) / dx - 1e-9).astype(int)
            filled, n_new = fill_cloud(sim_sub, lo, dx, dims, sc.fill)
            if n_new:
                extra = _subset(filled, np.arange(len(filled)) >= len(sub))
                extra = extra.replace(centers=norm.to_world(extra.centers), scales=extra.scales / norm.scale)
                cloud = GaussianCloud.concatenate(cloud, extra)
                in_region = np.concatenate([in_region, np.ones(n_new, dtype=bool)])
            self.fill_count = n_new

        self.cloud0 = cloud
        self.norm = norm
        self.sim_index = np.flatnonzero(in_region)
        self.grid = EulerianGrid.covering(lo, hi, dx, pad=sc.margin)
        return cloud

    def build_simulator(self) -> Simulator:
        sc = self.scene
        cloud, idx, norm = self.cloud0, self.sim_index, self.norm
        x_world = cloud.centers[idx]
        models = [a.model for a in sc.materials]
        mid = np.zeros(len(idx), dtype=np.int64)
        for k, a in enumerate(sc.materials):
            if a.region is None:
                mid[:] = k
            else:
                mid[a.region.contains(x_world)] = k
        v = np.zeros((len(idx), 3))
        for e in sc.velocity_edits:
            sel = np.ones(len(idx), dtype=bool) if e.region is None else e.region.contains(x_world)
            v[sel] = e.evaluate(x_world[sel]) * norm.scale
        particles = initialize_particles(norm.to_sim(x_world), mid, models, self.grid, v)
        self.x_sim0 = particles.x.copy()
        cfg = SimConfig(dt=sc.dt, gravity=sc.gravity, cfl_limit=sc.cfl_limit, boundary=sc.boundary,
                        margin=sc.margin, substeps_per_frame=sc.substeps_per_frame,
                        rpic_damping=sc.rpic_damping, workers=sc.workers)
        sim = Simulator(particles, self.grid, models, cfg)

        A0 = covariance_from_factors(cloud.scales[idx], cloud.rotations[idx]) * norm.scale ** 2
        if sc.kinematics == "auto":
            incremental = np.array([m.is_plastic for m in models])[mid]
        else:
            incremental = np.full(len(idx), sc.kinematics == "incremental")
        self.kin = KernelKinematicState.from_covariances(A0, incremental)
        sim.hooks.append(lambda s: self.kin.advance(s.particles.grad_v, s.particles.dF, s.cfg.dt))
        self.sim = sim
        return sim

    # -- export ----------------------------------------------------------------
    def current_cloud(self) -> GaussianCloud:
        """World-space cloud for the current simulation state, input kernel order preserved."""
        c0, idx, norm = self.cloud0, self.sim_index, self.norm
        centers = c0.centers.copy()
        scales = c0.scales.copy()
        rots = c0.rotations.copy()
        sh_rot = np.broadcast_to(np.eye(3), (len(c0), 3, 3)).copy()
        if hasattr(self, "sim"):
            x = self.sim.particles.x
            moved = np.any(x != self.x_sim0, axis=1)
            centers[idx[moved]] = norm.to_world(x[moved])
            changed = np.any(self.kin.a != self.kin.A0, axis=(1, 2))
            if changed.any():
                s, q = factors_from_covariance(self.kin.a[changed] / norm.scale ** 2)
                sub = idx[changed]
                scales[sub] = np.maximum(s, np.finfo(float).tiny)
                rots[sub] = q
            sh_rot[idx] = self.kin.R_sh
        return c0.replace(centers=centers, scales=scales, rotations=rots, sh_rotation=sh_rot)

    def diagnostics(self, frame: int) -> dict:
        sim = self.sim
        cloud = self.current_cloud()
        return {
            "frame": frame,
            "step": sim.step_count,
            "time": sim.time,
            "kernel_count": len(cloud),
            "total_mass": sim.total_mass(),
            "momentum": sim.momentum().tolist(),
            "center_of_mass": sim.center_of_mass().tolist(),
            "center_of_mass_world": self.norm.to_world(sim.center_of_mass()).tolist(),
            "kinetic_energy": sim.kinetic_energy(),
            "elastic_energy": sim.elastic_energy(),
            "potential_energy": sim.potential_energy(),
            "max_speed": float(np.max(np.linalg.norm(sim.particles.v, axis=1))),
            "cfl_ratio": sim.cfl_ratio(),
            "fill_count": self.fill_count,
            "anisotropy": anisotropy_metric(cloud, self.scene.anisotropy_r or 1.0),
        }

    def run(self, render: Optional[bool] = None):
        sc = self.scene
        out = Path(sc.output_dir)
        (out / "frames").mkdir(parents=True, exist_ok=True)
        self.prepare()
        self.build_simulator()
        render = sc.render if render is None else render
        with open(out / "diagnostics.jsonl", "w") as diag:
            for frame in range(sc.frames + 1):
                if frame > 0:
                    self.sim.run(sc.substeps_per_frame)
                cloud = self.current_cloud()
                save_gaussian_ply(cloud, out / "frames" / f"frame_{frame:04d}.ply", precision=sc.precision)
                diag.write(json.dumps(self.diagnostics(frame)) + "\n")
                diag.flush()
                if render:
                    self.render_frame(cloud, frame)
        return out

    def render_frame(self, cloud: GaussianCloud, frame: int):
        out = Path(self.scene.output_dir) / "renders"
        out.mkdir(parents=True, exist_ok=True)
        for ci, cam in enumerate(self.scene.cameras):
            img = render_cloud(cloud, cam)
            stem = out / f"frame_{frame:04d}_cam{ci}"
            write_ppm(stem.with_suffix(".ppm"), img)
            if self.scene.png:
                write_png(stem.with_suffix(".png"), img)


def _subset(cloud: GaussianCloud, mask) -> GaussianCloud:
    return GaussianCloud(
        cloud.centers[mask], cloud.scales[mask], cloud.rotations[mask], cloud.opacities[mask], cloud.sh[mask],
        None if cloud.sh_rotation is None else cloud.sh_rotation[mask],
        None if cloud.is_fill is None else cloud.is_fill[mask],
        None if cloud.stored is None else (cloud.stored[0][mask], cloud.stored[1][mask]),
    )


def validate(path) -> Report:
    """Static checks of a scene file without running it."""
    report = Report()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        report.error("<file>", str(exc))
        return report
    scene = parse_scene(raw, path.parent, report)
    if scene is None or not report.ok:
        return report
    cloud = None
    try:
        cloud = load_gaussian_ply(scene.input)
    except Exception as exc:  # report rather than raise
        report.error("input", f"cannot load: {exc}")
        return report
    norm = normalization_for(scene, cloud)
    _, _, dx = sim_box(scene, norm, cloud)
    if scene.region is not None and not scene.region.contains(cloud.centers).any():
        report.error("domain.region", "region contains no kernels")
    for i, a in enumerate(scene.materials):
        if a.region is not None and not a.region.contains(cloud.centers).any():
            report.warn(f"materials[{i}].region", "region contains no kernels")
    x_world = cloud.centers if scene.region is None else cloud.centers[scene.region.contains(cloud.centers)]
    for i, e in enumerate(scene.velocity_edits):
        if e.region is not None and not e.region.contains(cloud.centers).any():
            report.warn(f"velocity_edits[{i}].region", "region contains no kernels")
        sel = x_world if e.region is None else x_world[e.region.contains(x_world)]
        vmax = e.max_speed(sel) * norm.scale
        if vmax > 0 and scene.dt * vmax / dx > scene.cfl_limit:
            suggested = scene.cfl_limit * dx / vmax
            report.warn("time.dt", f"initial speed {vmax:.4g} violates CFL (dt*v/dx = {scene.dt * vmax / dx:.3g} "
                        f"> {scene.cfl_limit}); suggest dt <= {suggested:.4g}", suggested_dt=suggested)
    for i, a in enumerate(scene.materials):
        p = a.model.params
        c = float(np.sqrt((p.lam + 2 * p.mu) / p.density))
        if scene.dt * c / dx > 1.0:
            report.warn(f"materials[{i}]", f"elastic wave speed {c:.4g} exceeds dx/dt; the explicit "
                        f"step is likely unstable, suggest dt <= {dx / c:.4g}", suggested_dt=dx / c)
    return report


def diff_frames(a, b) -> dict:
    """Per-field max / mean absolute differences between two frames with identical kernel order."""
    ca = a if isinstance(a, GaussianCloud) else load_gaussian_ply(a)
    cb = b if isinstance(b, GaussianCloud) else load_gaussian_ply(b)
    if len(ca) != len(cb):
        raise StructuralDiffError(f"kernel count mismatch: {len(ca)} vs {len(cb)}")
    if ca.sh.shape != cb.sh.shape:
        raise StructuralDiffError(f"SH layout mismatch: {ca.sh.shape} vs {cb.sh.shape}")
    fields = {
        "position": (ca.centers, cb.centers),
        "covariance": (ca.covariances(), cb.covariances()),
        "opacity": (ca.opacities, cb.opacities),
        "sh": (ca.sh, cb.sh),
    }
    if ca.sh_rotation is not None and cb.sh_rotation is not None:
        fields["sh_rotation"] = (ca.sh_rotation, cb.sh_rotation)
    stats = {}
    for name, (x, y) in fields.items():
        d = np.abs(np.asarray(x) - np.asarray(y))
        stats[name] = {"max": float(d.max(initial=0.0)), "mean": float(d.mean()) if d.size else 0.0}
    return stats
