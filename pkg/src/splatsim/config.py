"""Scene description files (YAML) and their static validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import yaml

from .errors import ConfigError, ParameterError
from .fill import FillConfig
from .materials import MaterialModel, MaterialParams
from .mpm import FACES, BOUNDARY_KINDS


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, x):
        x = np.asarray(x)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    @property
    def center(self):
        return 0.5 * (self.lo + self.hi)


@dataclass
class MaterialAssignment:
    model: MaterialModel
    region: Optional[Box] = None  # None -> every particle


@dataclass
class VelocityEdit:
    region: Optional[Box]
    velocity: Optional[np.ndarray] = None
    angular_velocity: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None

    def evaluate(self, x_world):
        v = np.zeros_like(x_world)
        if self.velocity is not None:
            v += self.velocity
        if self.angular_velocity is not None:
            c = self.center if self.center is not None else (
                self.region.center if self.region is not None else x_world.mean(axis=0))
            v += np.cross(self.angular_velocity, x_world - c)
        return v

    def max_speed(self, x_world=None):
        s = 0.0 if self.velocity is None else float(np.linalg.norm(self.velocity))
        if self.angular_velocity is not None:
            if x_world is not None and len(x_world):
                c = self.center if self.center is not None else x_world.mean(axis=0)
                arm = float(np.max(np.linalg.norm(x_world - c, axis=1)))
            elif self.region is not None:
                c = self.center if self.center is not None else self.region.center
                corners = np.array([[a, b, d] for a in (self.region.lo[0], self.region.hi[0])
                                    for b in (self.region.lo[1], self.region.hi[1])
                                    for d in (self.region.lo[2], self.region.hi[2])])
                arm = float(np.max(np.linalg.norm(corners - c, axis=1)))
            else:
                arm = 0.0
            s += float(np.linalg.norm(self.angular_velocity)) * arm
        return s


@dataclass
class Scene:
    input: Path
    output_dir: Path
    region: Optional[Box] = None
    normalize: bool = True
    resolution: int = 32
    margin: int = 2
    dt: float = 1e-4
    fps: float = 25.0
    frames: int = 10
    gravity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.8]))
    boundary: dict = field(default_factory=lambda: {f: "sticky" for f in FACES})
    cfl_limit: float = 0.5
    rpic_damping: bool = False
    materials: List[MaterialAssignment] = field(default_factory=list)
    velocity_edits: List[VelocityEdit] = field(default_factory=list)
    fill_enabled: bool = False
    fill: FillConfig = field(default_factory=FillConfig)
    kinematics: str = "auto"
    anisotropy_r: Optional[float] = None
    render: bool = False
    png: bool = True
    precision: str = "float"
    cameras: list = field(default_factory=list)
    seed: int = 0
    workers: Optional[int] = None

    @property
    def substeps_per_frame(self) -> int:
        return max(1, int(round(1.0 / (self.fps * self.dt))))


@dataclass
class Report:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.errors

    def error(self, path, message):
        self.errors.append({"path": path, "message": message})

    def warn(self, path, message, **extra):
        self.warnings.append({"path": path, "message": message, **extra})

    def as_dict(self):
        return {"ok": self.ok, "errors": self.errors, "warnings": self.warnings}


class _Reader:
    """Typed accessors over the raw mapping that log errors under a dotted key path."""

    def __init__(self, report: Report):
        self.report = report

    def get(self, d, key, path, kind, default=None, required=False):
        full = f"{path}.{key}" if path else key
        if not isinstance(d, dict) or key not in d or d[key] is None:
            if required:
                self.report.error(full, "missing required key")
            return default
        val = d[key]
        try:
            if kind == "float":
                return float(val)
            if kind == "int":
                if isinstance(val, bool) or float(val) != int(val):
                    raise ValueError
                return int(val)
            if kind == "bool":
                if not isinstance(val, bool):
                    raise ValueError
                return val
            if kind == "vec3":
                arr = np.asarray(val, dtype=np.float64)
                if arr.shape != (3,):
                    raise ValueError
                return arr
            if kind == "str":
                if not isinstance(val, str):
                    raise ValueError
                return val
            return val
        except (TypeError, ValueError):
            self.report.error(full, f"expected {kind}, got {val!r}")
            return default

    def box(self, raw, path):
        if raw is None or raw == "all":
            return None
        if not isinstance(raw, dict):
            self.report.error(path, "expected 'all' or a mapping with min/max")
            return None
        lo = self.get(raw, "min", path, "vec3", required=True)
        hi = self.get(raw, "max", path, "vec3", required=True)
        if lo is None or hi is None:
            return None
        if np.any(hi <= lo):
            self.report.error(path, "max must exceed min on every axis")
            return None
        return Box(lo, hi)


def parse_scene(raw, base_dir: Path, report: Report) -> Optional[Scene]:
    r = _Reader(report)
    if not isinstance(raw, dict):
        report.error("", "top level must be a mapping")
        return None
    inp = r.get(raw, "input", "", "str", required=True)
    input_path = None
    if inp is not None:
        input_path = (base_dir / inp).resolve()
        if not input_path.exists():
            report.error("input", f"file not found: {input_path}")

    out = raw.get("output") or {}
    scene = Scene(input=input_path, output_dir=(base_dir / r.get(out, "dir", "output", "str", "output")).resolve())
    scene.render = r.get(out, "render", "output", "bool", False)
    scene.png = r.get(out, "png", "output", "bool", True)
    scene.precision = r.get(out, "precision", "output", "str", "float")
    if scene.precision not in ("float", "double"):
        report.error("output.precision", "must be 'float' or 'double'")

    dom = raw.get("domain") or {}
    scene.region = r.box(dom.get("region"), "domain.region") if isinstance(dom, dict) else None
    scene.normalize = r.get(dom, "normalize", "domain", "bool", True)

    grid = raw.get("grid") or {}
    scene.resolution = r.get(grid, "resolution", "grid", "int", 32)
    scene.margin = r.get(grid, "margin", "grid", "int", 2)
    if scene.resolution is not None and scene.resolution < 4:
        report.error("grid.resolution", "must be at least 4")
    if scene.margin is not None and scene.margin < 1:
        report.error("grid.margin", "must be at least 1")

    tm = raw.get("time") or {}
    scene.dt = r.get(tm, "dt", "time", "float", 1e-4)
    scene.fps = r.get(tm, "fps", "time", "float", 25.0)
    scene.frames = r.get(tm, "frames", "time", "int", 10)
    scene.cfl_limit = r.get(tm, "cfl_limit", "time", "float", 0.5)
    if scene.dt is not None and not scene.dt > 0:
        report.error("time.dt", "must be positive")
    if scene.fps is not None and not scene.fps > 0:
        report.error("time.fps", "must be positive")
    if scene.frames is not None and scene.frames < 1:
        report.error("time.frames", "must be >= 1")
    if scene.cfl_limit is not None and not 0 < scene.cfl_limit <= 1:
        report.error("time.cfl_limit", "must be in (0, 1]")

    g = r.get(raw, "gravity", "", "vec3", np.array([0.0, 0.0, -9.8]))
    scene.gravity = g
    scene.rpic_damping = r.get(raw, "rpic_damping", "", "bool", False)

    bc = raw.get("boundary") or {}
    if not isinstance(bc, dict):
        report.error("boundary", "expected a mapping of face -> condition")
        bc = {}
    default_bc = bc.get("default", "sticky")
    boundary = {f: default_bc for f in FACES}
    for face, kind in bc.items():
        if face == "default":
            continue
        if face not in FACES:
            report.error(f"boundary.{face}", f"unknown face; expected one of {FACES}")
            continue
        boundary[face] = kind
    for face, kind in boundary.items():
        if kind not in BOUNDARY_KINDS:
            report.error(f"boundary.{face}", f"unknown condition {kind!r}; expected one of {BOUNDARY_KINDS}")
    scene.boundary = boundary

    mats = raw.get("materials")
    if not mats:
        report.error("materials", "at least one material assignment is required")
        mats = []
    for i, m in enumerate(mats):
        path = f"materials[{i}]"
        if not isinstance(m, dict):
            report.error(path, "expected a mapping")
            continue
        name = r.get(m, "model", path, "str", required=True)
        E = r.get(m, "E", path, "float", required=True)
        nu = r.get(m, "nu", path, "float", required=True)
        dens = r.get(m, "density", path, "float", 1.0)
        phi = r.get(m, "friction_angle_deg", path, "float", 30.0)
        ys = r.get(m, "yield_stress", path, "float", 0.0)
        visc = r.get(m, "viscosity", path, "float", 0.0)
        literal = r.get(m, "neo_hookean_literal", path, "bool", False)
        if None in (name, E, nu):
            continue
        try:
            params = MaterialParams(E=E, nu=nu, density=dens, friction_angle=math.radians(phi),
                                    yield_stress=ys, viscosity=visc)
            model = MaterialModel.from_name(name, params, neo_hookean_literal=literal)
        except ParameterError as exc:
            report.error(path, str(exc))
            continue
        scene.materials.append(MaterialAssignment(model, r.box(m.get("region"), f"{path}.region")))

    for i, e in enumerate(raw.get("velocity_edits") or []):
        path = f"velocity_edits[{i}]"
        if not isinstance(e, dict):
            report.error(path, "expected a mapping")
            continue
        vel = r.get(e, "velocity", path, "vec3")
        omega = r.get(e, "angular_velocity", path, "vec3")
        if vel is None and omega is None:
            report.error(path, "needs 'velocity' and/or 'angular_velocity'")
        scene.velocity_edits.append(VelocityEdit(r.box(e.get("region"), f"{path}.region"), vel, omega,
                                                 r.get(e, "center", path, "vec3")))

    fill = raw.get("fill") or {}
    scene.fill_enabled = r.get(fill, "enabled", "fill", "bool", False)
    try:
        scene.fill = FillConfig(
            sigma_th=r.get(fill, "threshold", "fill", "float", 0.5),
            particles_per_cell=r.get(fill, "particles_per_cell", "fill", "int", 8),
            max_fill=r.get(fill, "max_fill", "fill", "int", 200_000),
            seed=r.get(fill, "seed", "fill", "int", r.get(raw, "seed", "", "int", 0)),
        )
    except (ParameterError, TypeError) as exc:
        report.error("fill", str(exc))

    scene.kinematics = r.get(raw, "kinematics", "", "str", "auto")
    if scene.kinematics not in ("auto", "total", "incremental"):
        report.error("kinematics", "must be one of auto, total, incremental")
    scene.anisotropy_r = r.get(raw, "anisotropy_r", "", "float")
    if scene.anisotropy_r is not None and scene.anisotropy_r < 1:
        report.error("anisotropy_r", "must be >= 1")
    scene.seed = r.get(raw, "seed", "", "int", 0)
    scene.workers = r.get(raw, "workers", "", "int")

    cams = raw.get("cameras") or []
    if not isinstance(cams, list):
        report.error("cameras", "expected a list")
        cams = []
    from .render import Camera, load_camera_path
    for i, c in enumerate(cams):
        try:
            if isinstance(c, str):
                scene.cameras.extend(load_camera_path(base_dir / c))
            else:
                scene.cameras.append(Camera.from_dict(c))
        except (KeyError, ValueError, TypeError, OSError) as exc:
            report.error(f"cameras[{i}]", f"invalid camera: {exc}")
    if scene.render and not scene.cameras:
        report.error("cameras", "output.render is enabled but no camera is defined")
    return scene


def load_scene(path, report: Report = None) -> Scene:
    """Parse and validate a scene file; raises ConfigError on the first error."""
    report = report if report is not None else Report()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(str(exc), "<file>") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML syntax error: {exc}", "<file>") from exc
    scene = parse_scene(raw, path.parent, report)
    if not report.ok:
        first = report.errors[0]
        raise ConfigError(first["message"], first["path"])
    return scene
