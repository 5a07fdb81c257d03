"""Gaussian-splat clouds simulated with the material point method and rendered by splatting."""

from .gs_io import GaussianCloud, load_gaussian_ply, save_gaussian_ply
from .materials import MaterialModel, MaterialParams
from .mpm import EulerianGrid, ParticleState, SimConfig, Simulator

__all__ = [
    "GaussianCloud", "load_gaussian_ply", "save_gaussian_ply",
    "MaterialModel", "MaterialParams",
    "EulerianGrid", "ParticleState", "SimConfig", "Simulator",
]
__version__ = "0.1.0"
