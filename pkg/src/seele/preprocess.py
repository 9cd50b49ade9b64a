"""Per-frame preprocessing: frustum culling, screen-space projection, color
evaluation and opacity-aware tile binning."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    ALPHA_THRESHOLD,
    TILE_SIZE,
    CameraPose,
    Gaussian3D,
    ProjectedGaussian,
    covariance3d,
    sh_to_color,
)

# Screen-space low-pass added to every projected covariance. Trained models
# assume this dilation; without it sub-pixel splats alias and vanish.
COV2D_LOWPASS = 0.3
# Projected covariances with a determinant at or below this are dropped.
MIN_COV2D_DET = 1e-12
# Fallback squared extent when opacity-aware filtering is off: the classic
# three-sigma envelope.
MAX_RADIUS_SQ = 9.0


@dataclass(frozen=True)
class TileGrid:
    """Fixed tiling of an image plane."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    width: int
    height: int

    @classmethod
    def for_image(cls, width: int, height: int, tile_size: int = TILE_SIZE) -> "TileGrid":
        return cls(
            tile_size=tile_size,
            tiles_x=-(-width // tile_size),
            tiles_y=-(-height // tile_size),
            width=width,
            height=height,
        )

    @property
    def tile_count(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_origin(self, tile_id: int) -> tuple[int, int]:
        ty, tx = divmod(tile_id, self.tiles_x)
        return tx * self.tile_size, ty * self.tile_size


@dataclass(frozen=True)
class TileIntersection:
    """One (tile, splat) pair surviving the binning test."""

    tile_id: int
    gaussian_ref: int
    depth: float


def effective_radius_sq(o: float, alpha_theta: float = ALPHA_THRESHOLD) -> float:
    """Squared Mahalanobis extent beyond which a splat of opacity ``o``
    cannot reach ``alpha_theta``, capped at the three-sigma envelope."""
    return max(0.0, min(2.0 * math.log(o / alpha_theta), MAX_RADIUS_SQ))


def project(
    g: Gaussian3D,
    cam: CameraPose,
    *,
    sh_degree: int = 3,
    alpha_theta: float = ALPHA_THRESHOLD,
    opacity_aware: bool = True,
) -> ProjectedGaussian | None:
    """Project one splat into screen space, or None when culled."""
    pg, _ = project_detailed(
        g, cam, sh_degree=sh_degree, alpha_theta=alpha_theta, opacity_aware=opacity_aware
    )
    return pg


def project_detailed(
    g: Gaussian3D,
    cam: CameraPose,
    *,
    sh_degree: int = 3,
    alpha_theta: float = ALPHA_THRESHOLD,
    opacity_aware: bool = True,
) -> tuple[ProjectedGaussian | None, str]:
    """Like :func:`project` but also reports why a splat was rejected
    ("near" or "degenerate")."""
    world_to_view = cam.rotation_matrix().T
    t = world_to_view @ (g.position - cam.position)
    z = float(t[2])
    if z <= cam.near_clip:
        return None, "near"

    fx, fy = cam.focal()
    cx, cy = cam.principal_point()
    mean2d = np.array([fx * t[0] / z + cx, fy * t[1] / z + cy])

    # First-order expansion of the perspective map at the splat center.
    jac = np.array(
        [
            [fx / z, 0.0, -fx * t[0] / (z * z)],
            [0.0, fy / z, -fy * t[1] / (z * z)],
        ]
    )
    jw = jac @ world_to_view
    # Overflowing covariances (absurdly large trained scales) are dropped
    # the same way near-singular ones are.
    with np.errstate(over="ignore"):
        cov2d = jw @ covariance3d(g) @ jw.T + COV2D_LOWPASS * np.eye(2)
        cov2d = 0.5 * (cov2d + cov2d.T)
        det = float(cov2d[0, 0] * cov2d[1, 1] - cov2d[0, 1] * cov2d[1, 0])
    if not math.isfinite(det) or det <= MIN_COV2D_DET:
        return None, "degenerate"
    inv_cov2d = (
        np.array([[cov2d[1, 1], -cov2d[0, 1]], [-cov2d[1, 0], cov2d[0, 0]]]) / det
    )

    view_dir = g.position - cam.position
    view_dir = view_dir / np.linalg.norm(view_dir)
    color = sh_to_color(g.sh_coeffs, view_dir, sh_degree)

    cutoff = (
        effective_radius_sq(g.opacity, alpha_theta) if opacity_aware else MAX_RADIUS_SQ
    )
    return (
        ProjectedGaussian(
            mean2d=mean2d,
            inv_cov2d=inv_cov2d,
            depth=z,
            color=color,
            opacity=g.opacity,
            radius_sq_cutoff=cutoff,
        ),
        "ok",
    )


def _axis_range(lo: float, hi: float, tile_size: int, n_tiles: int) -> range:
    """Tile indices whose [i*ts, (i+1)*ts] span overlaps [lo, hi], boundaries
    inclusive."""
    first = math.floor(lo / tile_size)
    if first * tile_size == lo:
        first -= 1
    last = math.floor(hi / tile_size)
    return range(max(first, 0), min(last, n_tiles - 1) + 1)


def bin_tiles(
    pg: ProjectedGaussian, grid: TileGrid, gaussian_ref: int = 0
) -> list[TileIntersection]:
    """Tiles whose pixel rectangle overlaps the splat's extent box.

    The box is the axis-aligned bound of the ellipse at the splat's
    opacity-derived cutoff; half-extents follow from the covariance
    diagonal.
    """
    r2 = pg.radius_sq_cutoff
    if r2 <= 0.0:
        return []
    ic = pg.inv_cov2d
    det = ic[0, 0] * ic[1, 1] - ic[0, 1] * ic[1, 0]
    cov_xx = ic[1, 1] / det
    cov_yy = ic[0, 0] / det
    hx = math.sqrt(r2 * cov_xx)
    hy = math.sqrt(r2 * cov_yy)
    mx, my = float(pg.mean2d[0]), float(pg.mean2d[1])

    out = []
    for ty in _axis_range(my - hy, my + hy, grid.tile_size, grid.tiles_y):
        for tx in _axis_range(mx - hx, mx + hx, grid.tile_size, grid.tiles_x):
            out.append(
                TileIntersection(
                    tile_id=ty * grid.tiles_x + tx,
                    gaussian_ref=gaussian_ref,
                    depth=pg.depth,
                )
            )
    return out
