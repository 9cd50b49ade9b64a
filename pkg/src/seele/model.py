"""Immutable domain types and the math shared by every pipeline stage.

No I/O and no rendering logic lives here. All types validate their
invariants on construction and freeze their array fields, so instances are
safe to share across threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError

# Rasterizer tile edge in pixels; images must be at least one tile per side.
TILE_SIZE = 16
# Blending skip threshold: contributions with alpha below this are dropped.
ALPHA_THRESHOLD = 1.0 / 255.0
# Transmittance floor: a pixel stops accumulating once it falls below this.
GAMMA_THRESHOLD = 1e-4

# Real spherical-harmonic basis constants up to degree 3, DC term first.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sigmoid(x):
    """Numerically stable logistic function; accepts scalars or arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    """Inverse of :func:`sigmoid` for p in (0, 1)."""
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    if out.ndim == 0:
        return float(out)
    return out


def _frozen_array(value, shape, name: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.shape != shape:
        raise DataError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def normalize_quaternion(q: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(q))
    if norm < 1e-8:
        raise DataError("quaternion norm too small to normalize")
    return q / norm


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a unit quaternion in (w, x, y, z) order."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class Gaussian3D:
    """One splat: geometry as scale/rotation factors, texture as opacity + SH.

    ``scale`` is stored in log space (world units after exp) and ``opacity``
    is the decoded value in (0, 1); both match the de-facto trained-model
    layout once run through :mod:`seele.io`.
    """

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh_coeffs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, (3,), "position"))
        scale = _frozen_array(self.scale, (3,), "scale")
        if not np.all(np.isfinite(np.exp(scale))):
            raise DataError("exp(scale) overflows")
        object.__setattr__(self, "scale", scale)
        rot = np.array(self.rotation, dtype=np.float64)
        if rot.shape != (4,):
            raise DataError(f"rotation must have shape (4,), got {rot.shape}")
        if not np.all(np.isfinite(rot)):
            raise DataError("rotation contains non-finite values")
        rot = normalize_quaternion(rot)
        rot.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        opacity = float(self.opacity)
        if not (0.0 < opacity < 1.0):
            raise DataError(f"opacity must lie in (0, 1), got {opacity}")
        object.__setattr__(self, "opacity", opacity)
        object.__setattr__(self, "sh_coeffs", _frozen_array(self.sh_coeffs, (3, 16), "sh_coeffs"))


@dataclass(frozen=True)
class CameraPose:
    """Extrinsics, intrinsics and image size; the unit of clustering.

    ``orientation`` is the camera-to-world rotation in (w, x, y, z) order;
    the camera looks along its local +z axis.
    """

    position: np.ndarray
    orientation: np.ndarray
    fov_x: float
    fov_y: float
    width: int
    height: int
    near_clip: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, (3,), "position"))
        q = np.array(self.orientation, dtype=np.float64)
        if q.shape != (4,):
            raise DataError(f"orientation must have shape (4,), got {q.shape}")
        if not np.all(np.isfinite(q)):
            raise DataError("orientation contains non-finite values")
        q = normalize_quaternion(q)
        q.flags.writeable = False
        object.__setattr__(self, "orientation", q)
        for name in ("fov_x", "fov_y"):
            fov = float(getattr(self, name))
            if not (0.0 < fov < np.pi):
                raise DataError(f"{name} must lie in (0, pi), got {fov}")
            object.__setattr__(self, name, fov)
        for name in ("width", "height"):
            size = int(getattr(self, name))
            if size < TILE_SIZE:
                raise DataError(f"{name} must be >= {TILE_SIZE}, got {size}")
            object.__setattr__(self, name, size)
        object.__setattr__(self, "near_clip", float(self.near_clip))

    def rotation_matrix(self) -> np.ndarray:
        """Camera-to-world rotation matrix."""
        return quaternion_to_matrix(self.orientation)

    def forward(self) -> np.ndarray:
        """Unit view direction in world coordinates."""
        return self.rotation_matrix()[:, 2]

    def focal(self) -> tuple[float, float]:
        fx = self.width / (2.0 * np.tan(self.fov_x / 2.0))
        fy = self.height / (2.0 * np.tan(self.fov_y / 2.0))
        return fx, fy

    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0


@dataclass(frozen=True)
class ProjectedGaussian:
    """Screen-space splat produced by the preprocessing stage."""

    mean2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    radius_sq_cutoff: float

    def __post_init__(self):
        object.__setattr__(self, "mean2d", _frozen_array(self.mean2d, (2,), "mean2d"))
        inv_cov = _frozen_array(self.inv_cov2d, (2, 2), "inv_cov2d")
        scale = max(abs(inv_cov).max(), 1.0)
        if abs(inv_cov[0, 1] - inv_cov[1, 0]) > 1e-9 * scale:
            raise DataError("inv_cov2d must be symmetric")
        det = inv_cov[0, 0] * inv_cov[1, 1] - inv_cov[0, 1] * inv_cov[1, 0]
        if det <= 0.0 or inv_cov[0, 0] + inv_cov[1, 1] <= 0.0:
            raise DataError("inv_cov2d must be positive definite")
        object.__setattr__(self, "inv_cov2d", inv_cov)
        depth = float(self.depth)
        if not (depth > 0.0 and np.isfinite(depth)):
            raise DataError(f"depth must be positive and finite, got {depth}")
        object.__setattr__(self, "depth", depth)
        color = _frozen_array(self.color, (3,), "color")
        if np.any(color < 0.0):
            raise DataError("color channels must be non-negative")
        object.__setattr__(self, "color", color)
        opacity = float(self.opacity)
        if not (0.0 < opacity < 1.0):
            raise DataError(f"opacity must lie in (0, 1), got {opacity}")
        object.__setattr__(self, "opacity", opacity)
        r2 = float(self.radius_sq_cutoff)
        if not (-1e-12 <= r2 <= 9.0 + 1e-12):
            raise DataError(f"radius_sq_cutoff must lie in [0, 9], got {r2}")
        object.__setattr__(self, "radius_sq_cutoff", min(max(r2, 0.0), 9.0))


@dataclass(frozen=True)
class PixelGroup:
    """A w-by-w block of pixels sharing one gating leader.

    ``origin`` is the tile-local pixel coordinate of the top-left member;
    the leader index addresses members in row-major order.
    """

    origin: tuple[int, int]
    width: int = 2
    leader_index: int = 0

    def __post_init__(self):
        ox, oy = (int(v) for v in self.origin)
        w = int(self.width)
        if w < 1:
            raise InvalidArgumentError(f"group width must be >= 1, got {w}")
        if ox % w or oy % w:
            raise InvalidArgumentError("group origin must be aligned to the group width")
        if ox < 0 or oy < 0 or ox + w > TILE_SIZE or oy + w > TILE_SIZE:
            raise InvalidArgumentError("group must lie fully inside its tile")
        if not (0 <= int(self.leader_index) < w * w):
            raise InvalidArgumentError(
                f"leader_index must lie in [0, {w * w}), got {self.leader_index}"
            )
        object.__setattr__(self, "origin", (ox, oy))
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "leader_index", int(self.leader_index))


def covariance3d(g: Gaussian3D) -> np.ndarray:
    """World-space covariance R S S^T R^T of a splat; symmetric PSD."""
    r = quaternion_to_matrix(g.rotation)
    m = r * np.exp(g.scale)[np.newaxis, :]  # R @ diag(exp(scale))
    cov = m @ m.T
    return 0.5 * (cov + cov.T)


def sh_to_color(sh_coeffs: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate view-dependent RGB from spherical harmonics.

    Args:
        sh_coeffs: (3, 16) coefficients, channels-major, DC term first.
        view_dir: unit direction from the camera center to the splat center.
        degree: highest SH band to evaluate, 0 to 3.

    Returns:
        RGB array; each channel is the basis-weighted sum plus 0.5,
        clamped below at zero.
    """
    if not (0 <= int(degree) <= 3):
        raise InvalidArgumentError(f"SH degree must lie in [0, 3], got {degree}")
    sh = np.asarray(sh_coeffs, dtype=np.float64)
    c = SH_C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = np.asarray(view_dir, dtype=np.float64)
        c = c - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        c = (
            c
            + SH_C2[0] * xy * sh[:, 4]
            + SH_C2[1] * yz * sh[:, 5]
            + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
            + SH_C2[3] * xz * sh[:, 7]
            + SH_C2[4] * (xx - yy) * sh[:, 8]
        )
    if degree >= 3:
        c = (
            c
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[:, 9]
            + SH_C3[1] * xy * z * sh[:, 10]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[:, 11]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[:, 12]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[:, 13]
            + SH_C3[5] * z * (xx - yy) * sh[:, 14]
            + SH_C3[6] * x * (xx - 3.0 * yy) * sh[:, 15]
        )
    return np.maximum(c + 0.5, 0.0)


@dataclass
class SceneArrays:
    """Struct-of-arrays view of a gaussian population for the hot paths.

    ``ids`` keeps each splat's index in the originally loaded scene so
    compiled containers can be validated against their source.
    """

    positions: np.ndarray  # (n, 3)
    log_scales: np.ndarray  # (n, 3)
    rotations: np.ndarray  # (n, 4) unit, (w, x, y, z)
    opacities: np.ndarray  # (n,) decoded, in (0, 1)
    sh: np.ndarray  # (n, 3, 16)
    ids: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D], ids=None) -> "SceneArrays":
        n = len(gaussians)
        out = cls(
            positions=np.zeros((n, 3)),
            log_scales=np.zeros((n, 3)),
            rotations=np.zeros((n, 4)),
            opacities=np.zeros(n),
            sh=np.zeros((n, 3, 16)),
            ids=np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64),
        )
        for i, g in enumerate(gaussians):
            out.positions[i] = g.position
            out.log_scales[i] = g.scale
            out.rotations[i] = g.rotation
            out.opacities[i] = g.opacity
            out.sh[i] = g.sh_coeffs
        return out

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i],
            scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity=float(self.opacities[i]),
            sh_coeffs=self.sh[i],
        )

    def take(self, indices) -> "SceneArrays":
        idx = np.asarray(indices, dtype=np.int64)
        return SceneArrays(
            positions=self.positions[idx],
            log_scales=self.log_scales[idx],
            rotations=self.rotations[idx],
            opacities=self.opacities[idx],
            sh=self.sh[idx],
            ids=self.ids[idx],
        )

    @staticmethod
    def concatenate(parts: Sequence["SceneArrays"]) -> "SceneArrays":
        return SceneArrays(
            positions=np.concatenate([p.positions for p in parts], axis=0),
            log_scales=np.concatenate([p.log_scales for p in parts], axis=0),
            rotations=np.concatenate([p.rotations for p in parts], axis=0),
            opacities=np.concatenate([p.opacities for p in parts], axis=0),
            sh=np.concatenate([p.sh for p in parts], axis=0),
            ids=np.concatenate([p.ids for p in parts], axis=0),
        )
