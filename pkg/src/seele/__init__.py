"""Tile-based Gaussian splatting with clustered scene streaming and
leader-gated group-skip rasterization."""

from .model import (
    ALPHA_THRESHOLD,
    GAMMA_THRESHOLD,
    TILE_SIZE,
    CameraPose,
    Gaussian3D,
    PixelGroup,
    ProjectedGaussian,
    SceneArrays,
    covariance3d,
    sh_to_color,
)
from .render import EngineConfig, RenderResult, render_frame

__version__ = "0.1.0"

__all__ = [
    "ALPHA_THRESHOLD",
    "GAMMA_THRESHOLD",
    "TILE_SIZE",
    "CameraPose",
    "EngineConfig",
    "Gaussian3D",
    "PixelGroup",
    "ProjectedGaussian",
    "RenderResult",
    "SceneArrays",
    "covariance3d",
    "render_frame",
    "sh_to_color",
    "__version__",
]
