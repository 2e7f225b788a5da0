"""Differentiable 2D Gaussian surfel splatting on the CPU."""

from .geometry import CameraModel, Degenerate, SplatGeometry
from .model import SplatModel
from .rasterizer import EmptyModelError, RenderOutput, render

__version__ = "0.1.0"

__all__ = ["CameraModel", "Degenerate", "SplatGeometry", "SplatModel", "EmptyModelError",
           "RenderOutput", "render", "__version__"]
