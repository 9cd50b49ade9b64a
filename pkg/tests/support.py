"""Shared builders for test scenes, cameras and on-disk fixtures."""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from seele.model import CameraPose, SceneArrays

DEFAULT_FOV = 0.8


def make_camera(
    width: int = 64,
    height: int = 64,
    position=(0.0, 0.0, 0.0),
    orientation=(1.0, 0.0, 0.0, 0.0),
    fov: float = DEFAULT_FOV,
) -> CameraPose:
    return CameraPose(
        position=np.asarray(position, dtype=np.float64),
        orientation=np.asarray(orientation, dtype=np.float64),
        fov_x=fov,
        fov_y=fov,
        width=width,
        height=height,
    )


def quat_about_y(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2), 0.0, math.sin(angle / 2), 0.0])


def quat_about_z(angle: float) -> np.ndarray:
    return np.array([math.cos(angle / 2), 0.0, 0.0, math.sin(angle / 2)])


def random_unit_quaternion(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_scene(
    rng: np.random.Generator,
    n: int,
    *,
    depth_range=(2.0, 6.0),
    scale_range=(0.03, 0.2),
    opacity_range=(0.05, 0.95),
    sh_degree: int = 1,
    camera: CameraPose | None = None,
) -> SceneArrays:
    """Splats scattered in the frustum of ``camera`` (default canonical
    64x64 camera at the origin looking down +z)."""
    cam = camera or make_camera()
    z = rng.uniform(*depth_range, size=n)
    lateral = 0.8 * np.tan(cam.fov_x / 2.0)
    x = rng.uniform(-lateral, lateral, size=n) * z
    y = rng.uniform(-lateral, lateral, size=n) * z
    view = np.stack([x, y, z], axis=1)
    r = cam.rotation_matrix()
    positions = (r @ view.T).T + cam.position

    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    rotations = np.stack([random_unit_quaternion(rng) for _ in range(n)])
    opacities = rng.uniform(*opacity_range, size=n)

    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.normal(0.0, 0.3, size=(n, 3))
    if sh_degree > 0:
        bands = (sh_degree + 1) ** 2 - 1
        sh[:, :, 1 : 1 + bands] = rng.normal(0.0, 0.05, size=(n, 3, bands))

    return SceneArrays(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        opacities=opacities,
        sh=sh,
        ids=np.arange(n, dtype=np.int64),
    )


def scene_to_ply_bytes(arrays: SceneArrays, sh_degree: int = 3) -> bytes:
    """Encode a scene in the trained-model PLY layout, independent of the
    package reader so load tests have a second opinion."""
    rest = ((sh_degree + 1) ** 2 - 1) * 3
    props = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(rest)]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {len(arrays)}\n"
    header += "".join(f"property float {p}\n" for p in props)
    header += "end_header\n"

    per_channel = rest // 3
    body = bytearray()
    for i in range(len(arrays)):
        opacity = float(arrays.opacities[i])
        values = list(arrays.positions[i]) + list(arrays.sh[i, :, 0])
        for ch in range(3):
            values += list(arrays.sh[i, ch, 1 : 1 + per_channel])
        values.append(math.log(opacity / (1.0 - opacity)))
        values += list(arrays.log_scales[i])
        values += list(arrays.rotations[i])
        body += struct.pack(f"<{len(values)}f", *values)
    return header.encode("ascii") + bytes(body)


def write_scene_ply(arrays: SceneArrays, path, sh_degree: int = 3) -> None:
    Path(path).write_bytes(scene_to_ply_bytes(arrays, sh_degree))


def line_poses(start, step, count, width=64, height=64, orientation=(1, 0, 0, 0)):
    """Constant-velocity camera trajectory."""
    start = np.asarray(start, dtype=np.float64)
    step = np.asarray(step, dtype=np.float64)
    return [
        make_camera(width, height, position=start + i * step, orientation=orientation)
        for i in range(count)
    ]


def _population(rng, n, x_range, z_range=(2.8, 3.2), sigma=0.04, opacity=(0.5, 0.9)):
    x = rng.uniform(*x_range, size=n)
    y = rng.uniform(-0.8, 0.8, size=n)
    z = rng.uniform(*z_range, size=n)
    sh = np.zeros((n, 3, 16))
    sh[:, :, 0] = rng.normal(0.0, 0.25, size=(n, 3))
    return SceneArrays(
        positions=np.stack([x, y, z], axis=1),
        log_scales=np.full((n, 3), math.log(sigma)),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        opacities=rng.uniform(*opacity, size=n),
        sh=sh,
        ids=np.zeros(n, dtype=np.int64),
    )


def two_sided_scene(seed=0, n_side=24, n_core=16, n_stray=6):
    """A split scene with two disjoint splat populations, a common core, and
    strays outside every view; two camera arcs each see one side plus the
    core.

    Returns (scene, poses, labels) where labels maps each splat id to
    "left" / "right" / "core" / "stray" and poses holds the left arc
    followed by the right arc.
    """
    rng = np.random.default_rng(seed)
    left = _population(rng, n_side, (-1.75, -1.15))
    right = _population(rng, n_side, (1.15, 1.75))
    core = _population(rng, n_core, (-0.5, 0.5))
    stray = _population(rng, n_stray, (2.9, 3.4))
    stray.positions[: n_stray // 2, 0] *= -1.0
    scene = SceneArrays.concatenate([left, right, core, stray])
    scene.ids = np.arange(len(scene), dtype=np.int64)
    labels = (
        ["left"] * n_side + ["right"] * n_side + ["core"] * n_core + ["stray"] * n_stray
    )

    yaw = 0.3
    poses = []
    for i in range(4):
        cx = -1.5 + 0.04 * (i - 1.5) / 1.5
        poses.append(make_camera(position=(cx, 0.0, 0.0), orientation=quat_about_y(yaw)))
    for i in range(4):
        cx = 1.5 + 0.04 * (i - 1.5) / 1.5
        poses.append(make_camera(position=(cx, 0.0, 0.0), orientation=quat_about_y(-yaw)))
    return scene, poses, labels
