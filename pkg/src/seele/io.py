"""Disk formats: trained-scene PLY, camera JSON, the compiled cluster
container, and image output.

The cluster container is a JSON manifest next to raw fixed-stride binary
chunks (little-endian float32, 59 floats per gaussian, followed by a
uint32 id array), so individual clusters can be loaded lazily and evicted.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import CorruptionError, DataError, SchemaError
from .model import CameraPose, Gaussian3D, SceneArrays, logit, sigmoid

# Chunk record layout: x y z | f_dc*3 | f_rest*45 | opacity | scale*3 | rot*4.
FLOATS_PER_GAUSSIAN = 59
# Payload floats plus the 4-byte id per record.
BYTES_PER_GAUSSIAN = FLOATS_PER_GAUSSIAN * 4 + 4

_REST_COUNT_TO_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}

# Extreme stored logits would otherwise decode to exactly 0.0 or 1.0.
_OPACITY_EPS = 1e-12


def _decode_opacity(logits) -> np.ndarray:
    return np.clip(sigmoid(logits), _OPACITY_EPS, 1.0 - _OPACITY_EPS)

_PLY_TYPE_SIZES = {
    "float": 4, "float32": 4, "double": 8, "float64": 8,
    "uchar": 1, "uint8": 1, "char": 1, "int8": 1,
    "ushort": 2, "uint16": 2, "short": 2, "int16": 2,
    "uint": 4, "uint32": 4, "int": 4, "int32": 4,
}
_PLY_NUMPY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "ushort": "<u2", "uint16": "<u2", "short": "<i2", "int16": "<i2",
    "uint": "<u4", "uint32": "<u4", "int": "<i4", "int32": "<i4",
}


@dataclass
class SceneFile:
    """A parsed trained scene."""

    gaussians: list[Gaussian3D]
    source_path: str
    sh_degree: int

    def arrays(self) -> SceneArrays:
        return SceneArrays.from_gaussians(self.gaussians)


def _parse_ply_header(raw: bytes, path: Path) -> tuple[int, list[tuple[str, str]], int]:
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise SchemaError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body_offset = end + len(b"end_header\n")
    vertex_count = None
    properties: list[tuple[str, str]] = []
    in_vertex = False
    fmt_ok = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                vertex_count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise SchemaError(f"{path}: list properties are not supported")
            properties.append((parts[1], parts[2]))
    if not fmt_ok:
        raise SchemaError(f"{path}: only binary little-endian PLY is supported")
    if vertex_count is None:
        raise SchemaError(f"{path}: no vertex element")
    return vertex_count, properties, body_offset


def load_ply(path) -> SceneFile:
    """Parse a trained scene in the de-facto splat PLY layout.

    The SH degree is inferred from the number of ``f_rest_*`` properties
    (0, 9, 24 or 45 of them). Extra properties such as normals are ignored.
    """
    path = Path(path)
    raw = path.read_bytes()
    count, properties, offset = _parse_ply_header(raw, path)
    if count <= 0:
        raise DataError(f"{path}: scene has no gaussians")

    names = [name for _, name in properties]
    rest_count = sum(1 for n in names if n.startswith("f_rest_"))
    if rest_count not in _REST_COUNT_TO_DEGREE:
        raise SchemaError(f"{path}: unsupported f_rest count {rest_count}")
    sh_degree = _REST_COUNT_TO_DEGREE[rest_count]

    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    required += [f"f_rest_{i}" for i in range(rest_count)]
    for name in required:
        if name not in names:
            raise SchemaError(f"{path}: missing vertex property '{name}'")

    dtype = np.dtype([(name, _PLY_NUMPY_TYPES[kind]) for kind, name in properties])
    body = raw[offset:]
    if len(body) < count * dtype.itemsize:
        raise DataError(f"{path}: truncated vertex data")
    records = np.frombuffer(body, dtype=dtype, count=count)

    sh = np.zeros((count, 3, 16), dtype=np.float64)
    for ch in range(3):
        sh[:, ch, 0] = records[f"f_dc_{ch}"]
    per_channel = rest_count // 3
    for ch in range(3):
        for j in range(per_channel):
            sh[:, ch, 1 + j] = records[f"f_rest_{ch * per_channel + j}"]

    gaussians: list[Gaussian3D] = []
    for i in range(count):
        rec = records[i]
        fields = np.array(
            [rec["x"], rec["y"], rec["z"], rec["opacity"],
             rec["scale_0"], rec["scale_1"], rec["scale_2"],
             rec["rot_0"], rec["rot_1"], rec["rot_2"], rec["rot_3"]],
            dtype=np.float64,
        )
        if not np.all(np.isfinite(fields)) or not np.all(np.isfinite(sh[i])):
            raise DataError(f"{path}: non-finite value at record {i}")
        gaussians.append(
            Gaussian3D(
                position=fields[0:3],
                scale=fields[4:7],
                rotation=fields[7:11],
                opacity=float(_decode_opacity(fields[3])),
                sh_coeffs=sh[i],
            )
        )
    return SceneFile(gaussians=gaussians, source_path=str(path), sh_degree=sh_degree)


def load_cameras(path) -> list[CameraPose]:
    """Read camera poses from the JSON pose-list format."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, list):
        raise SchemaError(f"{path}: expected a JSON array of poses")
    poses = []
    for i, entry in enumerate(doc):
        try:
            pose = CameraPose(
                position=np.asarray(entry["position"], dtype=np.float64),
                orientation=np.asarray(entry["orientation_wxyz"], dtype=np.float64),
                fov_x=float(entry["fov_x"]),
                fov_y=float(entry["fov_y"]),
                width=int(entry["width"]),
                height=int(entry["height"]),
            )
        except KeyError as exc:
            raise SchemaError(f"{path}: pose {i} is missing {exc}") from exc
        except DataError as exc:
            raise DataError(f"{path}: pose {i}: {exc}") from exc
        poses.append(pose)
    return poses


def write_cameras(poses: Sequence[CameraPose], path) -> None:
    doc = [
        {
            "position": [float(v) for v in p.position],
            "orientation_wxyz": [float(v) for v in p.orientation],
            "fov_x": p.fov_x,
            "fov_y": p.fov_y,
            "width": p.width,
            "height": p.height,
        }
        for p in poses
    ]
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _encode_chunk(arrays: SceneArrays) -> bytes:
    n = len(arrays)
    payload = np.empty((n, FLOATS_PER_GAUSSIAN), dtype="<f4")
    payload[:, 0:3] = arrays.positions
    payload[:, 3:6] = arrays.sh[:, :, 0]
    payload[:, 6:51] = arrays.sh[:, :, 1:].reshape(n, 45)
    payload[:, 51] = logit(arrays.opacities)
    payload[:, 52:55] = arrays.log_scales
    payload[:, 55:59] = arrays.rotations
    ids = arrays.ids.astype("<u4")
    return payload.tobytes() + ids.tobytes()


def _decode_chunk(raw: bytes, count: int, label: str) -> SceneArrays:
    expected = count * BYTES_PER_GAUSSIAN
    if len(raw) != expected:
        raise CorruptionError(
            f"chunk {label}: expected {expected} bytes, found {len(raw)}"
        )
    payload = np.frombuffer(raw[: count * FLOATS_PER_GAUSSIAN * 4], dtype="<f4")
    payload = payload.reshape(count, FLOATS_PER_GAUSSIAN).astype(np.float64)
    ids = np.frombuffer(raw[count * FLOATS_PER_GAUSSIAN * 4:], dtype="<u4").astype(np.int64)
    sh = np.zeros((count, 3, 16), dtype=np.float64)
    sh[:, :, 0] = payload[:, 3:6]
    sh[:, :, 1:] = payload[:, 6:51].reshape(count, 3, 15)
    rot = payload[:, 55:59]
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    if np.any(norms < 1e-8):
        raise CorruptionError(f"chunk {label}: degenerate rotation record")
    return SceneArrays(
        positions=payload[:, 0:3],
        log_scales=payload[:, 52:55],
        rotations=rot / norms,
        opacities=_decode_opacity(payload[:, 51]),
        sh=sh,
        ids=ids,
    )


@dataclass
class ClusteredSceneFile:
    """Manifest-level description of a compiled scene container."""

    directory: Path
    manifest: dict

    @property
    def num_clusters(self) -> int:
        return int(self.manifest["num_clusters"])

    @property
    def centroids(self) -> np.ndarray:
        return np.asarray([c["centroid"] for c in self.manifest["clusters"]], dtype=np.float64)

    def cluster_bytes(self, index: int) -> int:
        return int(self.manifest["clusters"][index]["count"]) * BYTES_PER_GAUSSIAN

    @property
    def shared_bytes(self) -> int:
        return int(self.manifest["shared"]["count"]) * BYTES_PER_GAUSSIAN

    @property
    def total_bytes(self) -> int:
        return self.shared_bytes + sum(
            self.cluster_bytes(i) for i in range(self.num_clusters)
        )


def write_clustered_scene(partition, source: SceneArrays, directory) -> ClusteredSceneFile:
    """Write a compiled partition (see :mod:`seele.compiler`) plus chunks.

    ``source`` must be the scene the partition was computed from; ids in the
    partition index into it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    def chunk_for(ids: np.ndarray) -> SceneArrays:
        return source.take(np.sort(np.asarray(ids, dtype=np.int64)))

    shared = chunk_for(partition.shared_ids)
    (directory / "shared.bin").write_bytes(_encode_chunk(shared))

    clusters = []
    for i, ids in enumerate(partition.exclusive_ids):
        chunk = chunk_for(ids)
        name = f"cluster_{i:03d}.bin"
        (directory / name).write_bytes(_encode_chunk(chunk))
        clusters.append(
            {
                "centroid": [float(v) for v in partition.centroids[i]],
                "count": len(chunk),
                "file": name,
            }
        )

    hp = partition.params
    manifest = {
        "version": 1,
        "num_clusters": len(partition.exclusive_ids),
        "k": hp.top_k,
        "beta": hp.beta,
        "group_w": hp.group_w,
        "M": hp.neighbors,
        "alpha_theta": hp.alpha_theta,
        "shared": {"count": len(shared), "file": "shared.bin"},
        "clusters": clusters,
        "discarded_count": int(len(partition.discarded_ids)),
        "share_threshold": hp.share_threshold,
        "position_mean": [float(v) for v in hp.position_mean],
        "position_scale": float(hp.position_scale),
        "sh_degree": hp.sh_degree,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True)
    )
    return ClusteredSceneFile(directory=directory, manifest=manifest)


class ClusteredSceneHandle:
    """Lazy view of a compiled scene: manifest up front, chunks on demand.

    Materialization is memoized and idempotent; concurrent requests for the
    same chunk observe a single load. ``evict`` drops a cached cluster so
    the residency layer can bound live bytes.
    """

    SHARED = -1

    def __init__(self, directory: Path, manifest: dict):
        self.directory = Path(directory)
        self.manifest = manifest
        self.file = ClusteredSceneFile(directory=self.directory, manifest=manifest)
        self._lock = threading.Lock()
        self._chunks: dict[int, SceneArrays] = {}

    @property
    def num_clusters(self) -> int:
        return self.file.num_clusters

    @property
    def centroids(self) -> np.ndarray:
        return self.file.centroids

    def _descriptor(self, index: int) -> tuple[str, int, str]:
        if index == self.SHARED:
            entry = self.manifest["shared"]
            return entry["file"], int(entry["count"]), "shared"
        entry = self.manifest["clusters"][index]
        return entry["file"], int(entry["count"]), str(index)

    def materialize(self, index: int) -> SceneArrays:
        with self._lock:
            cached = self._chunks.get(index)
            if cached is not None:
                return cached
            name, count, label = self._descriptor(index)
            chunk_path = self.directory / name
            if not chunk_path.exists():
                raise CorruptionError(f"chunk {label}: missing file {chunk_path}")
            chunk = _decode_chunk(chunk_path.read_bytes(), count, label)
            self._chunks[index] = chunk
            return chunk

    def shared(self) -> SceneArrays:
        return self.materialize(self.SHARED)

    def cluster(self, index: int) -> SceneArrays:
        return self.materialize(index)

    def evict(self, index: int) -> None:
        with self._lock:
            self._chunks.pop(index, None)

    def is_materialized(self, index: int) -> bool:
        with self._lock:
            return index in self._chunks

    def resident_bytes(self) -> int:
        """Bytes of currently materialized chunks, from manifest counts."""
        with self._lock:
            keys = list(self._chunks)
        total = 0
        for key in keys:
            _, count, _ = self._descriptor(key)
            total += count * BYTES_PER_GAUSSIAN
        return total


def load_clustered_scene(directory) -> ClusteredSceneHandle:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise SchemaError(f"{directory}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != 1:
        raise SchemaError(f"{manifest_path}: unsupported version {manifest.get('version')}")
    clusters = manifest.get("clusters", [])
    if len(clusters) != int(manifest.get("num_clusters", -1)):
        raise CorruptionError(
            f"{manifest_path}: cluster descriptor count {len(clusters)} does not "
            f"match num_clusters {manifest.get('num_clusters')}"
        )
    for i, entry in enumerate(clusters):
        if len(entry.get("centroid", [])) != 6:
            raise CorruptionError(f"{manifest_path}: cluster {i} centroid is not a 6-vector")
    return ClusteredSceneHandle(directory, manifest)


def validate_clustered_scene(handle: ClusteredSceneHandle) -> None:
    """Check the id partition of a container: every id in exactly one chunk,
    chunk counts matching the manifest, discarded count consistent."""
    seen: dict[int, str] = {}
    labels = [ClusteredSceneHandle.SHARED] + list(range(handle.num_clusters))
    total = 0
    for index in labels:
        chunk = handle.materialize(index)
        _, count, label = handle._descriptor(index)
        if len(chunk) != count:
            raise CorruptionError(f"chunk {label}: count mismatch with manifest")
        total += count
        for gid in chunk.ids.tolist():
            if gid in seen:
                raise CorruptionError(
                    f"gaussian id {gid} appears in chunks {seen[gid]} and {label}"
                )
            seen[gid] = label
    original = total + int(handle.manifest["discarded_count"])
    if seen and max(seen) >= original:
        raise CorruptionError("gaussian ids exceed the reconstructed scene size")


def quantize_image(pixels: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and quantize to uint8, rounding half up."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise DataError("image buffer contains non-finite values")
    clipped = np.clip(pixels, 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_image(pixels: np.ndarray, path) -> None:
    """Encode an RGB float buffer as 8-bit PNG (or PPM for ``.ppm`` paths)."""
    path = Path(path)
    data = quantize_image(pixels)
    if data.ndim != 3 or data.shape[2] != 3:
        raise DataError(f"image buffer must be HxWx3, got {data.shape}")
    if path.suffix.lower() == ".ppm":
        header = f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
    else:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Read an 8-bit RGB image back as floats in [0, 1]."""
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data / 255.0
