"""Runtime cluster residency: nearest-cluster selection, pose-prediction
prefetch, and eviction, with exact byte accounting.

One render agent and one loader agent cooperate through a condition
variable. Prefetch requests are fire-and-forget; the loader materializes
chunks and publishes them atomically to the residency table. The render
agent blocks only on a chunk it needs that nobody has loaded yet, so
loader timing can never change a rendered image.
"""
from __future__ import annotations

import math
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .io import BYTES_PER_GAUSSIAN, ClusteredSceneHandle
from .model import CameraPose, SceneArrays
from .render import EngineConfig, RenderResult, render_frame
from .compiler import pose_feature


@dataclass
class ResidencyState:
    """Mutable accounting of which exclusive chunks are in memory."""

    resident_clusters: set[int] = field(default_factory=set)
    shared_resident: bool = False
    resident_bytes: int = 0
    peak_resident_bytes: int = 0
    stall_count: int = 0
    prefetch_hit_count: int = 0


def select_clusters(
    cam: CameraPose,
    centroids: np.ndarray,
    m: int,
    beta: float,
    normalization: tuple[np.ndarray, float],
) -> list[int]:
    """The nearest cluster plus its ``m`` next-nearest, by centroid distance
    in feature space; ties break toward the smaller cluster id."""
    centroids = np.asarray(centroids, dtype=np.float64)
    n = centroids.shape[0]
    if m >= n:
        raise InvalidArgumentError(f"m must be < {n}, got {m}")
    feature = pose_feature(cam, beta, normalization)
    d2 = np.sum((centroids - feature[None, :]) ** 2, axis=1)
    order = np.lexsort((np.arange(n), d2))
    return [int(i) for i in order[: 1 + m]]


def _slerp_extrapolate(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Spherical extrapolation slerp(q0, q1, t=2), renormalized."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot < 1e-6:
        # Nearly antipodal rotations: extrapolation is undefined, stay put.
        return q1 / np.linalg.norm(q1)
    if dot > 1.0 - 1e-12:
        return q1 / np.linalg.norm(q1)
    theta = math.acos(min(dot, 1.0))
    # sin(2*theta)/sin(theta) = 2*cos(theta); sin(-theta)/sin(theta) = -1.
    out = -q0 + 2.0 * dot * q1
    return out / np.linalg.norm(out)


def predict_pose(prev: CameraPose, curr: CameraPose) -> CameraPose:
    """Constant-velocity extrapolation of position and orientation."""
    position = curr.position + (curr.position - prev.position)
    dot = float(prev.orientation @ curr.orientation)
    if abs(dot) < 1e-6:
        orientation = curr.orientation
    else:
        orientation = _slerp_extrapolate(prev.orientation, curr.orientation)
    return CameraPose(
        position=position,
        orientation=orientation,
        fov_x=curr.fov_x,
        fov_y=curr.fov_y,
        width=curr.width,
        height=curr.height,
        near_clip=curr.near_clip,
    )


class ResidentRenderer:
    """Streams a compiled scene, keeping only relevant clusters in memory.

    The shared chunk is loaded at construction and never evicted. Per
    frame: select clusters, synchronously load anything the predictor
    missed (counted as a stall), render, then prefetch the prediction for
    the next frame and evict clusters outside the current and predicted
    selections. ``prefetch`` and ``evict`` can be disabled to compare
    against plain on-demand loading; images are identical either way.

    ``evict_policy`` "immediate" drops everything outside the wanted set
    each frame; "lru" keeps up to ``lru_capacity`` clusters and drops the
    least recently used ones beyond it (wanted clusters are never dropped).
    """

    def __init__(
        self,
        handle: ClusteredSceneHandle,
        m: int | None = None,
        *,
        prefetch: bool = True,
        evict: bool = True,
        evict_policy: str = "immediate",
        lru_capacity: int | None = None,
        loader_delay=None,
    ):
        self.handle = handle
        manifest = handle.manifest
        self.m = int(manifest["M"]) if m is None else int(m)
        self.beta = float(manifest["beta"])
        self.normalization = (
            np.asarray(manifest["position_mean"], dtype=np.float64),
            float(manifest["position_scale"]),
        )
        self.prefetch_enabled = prefetch
        self.evict_enabled = evict
        if evict_policy not in ("immediate", "lru"):
            raise InvalidArgumentError(f"unknown evict policy '{evict_policy}'")
        self.evict_policy = evict_policy
        self.lru_capacity = (
            2 * (1 + self.m) if lru_capacity is None else int(lru_capacity)
        )
        self._loader_delay = loader_delay

        self.state = ResidencyState()
        self._cond = threading.Condition()
        self._inflight: set[int] = set()
        self._last_used: dict[int, int] = {}
        self._clock = 0
        self._prev_pose: CameraPose | None = None

        self._queue: queue.Queue = queue.Queue()
        self._loader = threading.Thread(target=self._loader_loop, daemon=True)
        self._loader.start()

        handle.shared()
        self.state.shared_resident = True
        self._recount_bytes()

    # -- loader agent ------------------------------------------------------

    def _loader_loop(self):
        while True:
            cid = self._queue.get()
            if cid is None:
                return
            if self._loader_delay is not None:
                self._loader_delay(cid)
            self.handle.cluster(cid)
            with self._cond:
                if cid in self._inflight:
                    self._inflight.discard(cid)
                    self.state.resident_clusters.add(cid)
                    self._recount_bytes_locked()
                self._cond.notify_all()

    def close(self):
        self._queue.put(None)
        self._loader.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- byte accounting ---------------------------------------------------

    def _recount_bytes_locked(self):
        total = self.handle.file.shared_bytes
        for cid in self.state.resident_clusters:
            total += self.handle.file.cluster_bytes(cid)
        self.state.resident_bytes = total
        self.state.peak_resident_bytes = max(self.state.peak_resident_bytes, total)

    def _recount_bytes(self):
        with self._cond:
            self._recount_bytes_locked()

    # -- render agent ------------------------------------------------------

    def _ensure_resident(self, needed: list[int]):
        for cid in needed:
            with self._cond:
                if cid in self.state.resident_clusters:
                    self.state.prefetch_hit_count += 1
                    continue
                if cid in self._inflight:
                    # Correctly predicted, still loading: wait, not a stall.
                    self.state.prefetch_hit_count += 1
                    self._cond.wait_for(lambda: cid in self.state.resident_clusters)
                    continue
                self.state.stall_count += 1
            # Synchronous load outside the lock; publication is idempotent.
            self.handle.cluster(cid)
            with self._cond:
                self.state.resident_clusters.add(cid)
                self._recount_bytes_locked()

    def select(self, cam: CameraPose) -> list[int]:
        return select_clusters(cam, self.handle.centroids, self.m, self.beta, self.normalization)

    def assemble(self, selection: list[int]) -> SceneArrays:
        parts = [self.handle.shared()]
        parts.extend(self.handle.cluster(cid) for cid in selection)
        return SceneArrays.concatenate(parts)

    def render_frame(self, cam: CameraPose, cfg: EngineConfig) -> RenderResult:
        needed = self.select(cam)
        self._ensure_resident(needed)
        result = render_frame(self.assemble(needed), cam, cfg)

        prev = self._prev_pose if self._prev_pose is not None else cam
        predicted_sel = self.select(predict_pose(prev, cam))
        self._prev_pose = cam

        if self.prefetch_enabled:
            with self._cond:
                for cid in predicted_sel:
                    if cid not in self.state.resident_clusters and cid not in self._inflight:
                        self._inflight.add(cid)
                        self._queue.put(cid)

        if self.evict_enabled:
            keep = set(needed) | set(predicted_sel)
            with self._cond:
                self._clock += 1
                for cid in needed:
                    self._last_used[cid] = self._clock
                if self.evict_policy == "immediate":
                    victims = [
                        cid for cid in self.state.resident_clusters if cid not in keep
                    ]
                else:
                    overflow = len(self.state.resident_clusters) - self.lru_capacity
                    candidates = sorted(
                        (cid for cid in self.state.resident_clusters if cid not in keep),
                        key=lambda cid: (self._last_used.get(cid, 0), cid),
                    )
                    victims = candidates[: max(overflow, 0)]
                for cid in victims:
                    self.state.resident_clusters.discard(cid)
                    self._last_used.pop(cid, None)
                    self.handle.evict(cid)
                self._recount_bytes_locked()

        result.stats.resident_bytes = self.state.resident_bytes
        result.stats.stalls = self.state.stall_count
        result.stats.prefetch_hits = self.state.prefetch_hit_count
        return result
