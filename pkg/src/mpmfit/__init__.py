"""Differentiable MPM toolkit: recover initial velocity, material parameters and
rest geometry of a deforming object from multi-view silhouette videos."""
from .core import Boundary, Camera, MaterialModel, MaterialParams, ParticleSet, Scene, ring_cameras, sample_shape
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "Boundary", "Camera", "MaterialModel", "MaterialParams", "ParticleSet", "Scene",
           "ring_cameras", "sample_shape", "__version__"]
