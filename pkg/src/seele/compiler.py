"""Offline scene compilation: cluster camera poses, harvest each cluster's
strongest splats, and split the scene into shared / exclusive / discarded
populations.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError
from .model import ALPHA_THRESHOLD, CameraPose, SceneArrays
from .render import EngineConfig, render_frame

KMEANS_MAX_ITER = 100
KMEANS_REL_TOL = 1e-6


@dataclass(frozen=True)
class CompileParams:
    """Hyperparameters persisted into the container manifest."""

    num_clusters: int = 24
    top_k: int = 32
    beta: float = 1.0
    share_threshold: int = 2
    neighbors: int = 4
    group_w: int = 2
    alpha_theta: float = ALPHA_THRESHOLD
    sh_degree: int = 3
    position_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    position_scale: float = 1.0


@dataclass
class ClusterSpec:
    """One pose cluster before harvesting."""

    centroid: np.ndarray  # (6,) feature-space centroid
    member_indices: list[int]
    member_poses: list[CameraPose]
    top_set: np.ndarray | None = None  # (m,) sorted gaussian ids


@dataclass
class ClusteredScene:
    """The compiled partition, ready to be written to disk."""

    shared_ids: np.ndarray
    exclusive_ids: list[np.ndarray]
    discarded_ids: np.ndarray
    centroids: np.ndarray  # (n, 6)
    params: CompileParams
    pose_assignments: np.ndarray  # (n_poses,) cluster index per input pose

    def validate(self, all_ids: np.ndarray) -> None:
        parts = [self.shared_ids, self.discarded_ids, *self.exclusive_ids]
        merged = np.concatenate(parts) if parts else np.array([], dtype=np.int64)
        if len(np.unique(merged)) != len(merged):
            raise InvalidArgumentError("partition sets overlap")
        if not np.array_equal(np.sort(merged), np.sort(np.asarray(all_ids))):
            raise InvalidArgumentError("partition does not cover the scene")


def sample_interpolated_poses(
    poses: list[CameraPose], count: int, jitter: float = 0.02, seed: int = 0
) -> list[CameraPose]:
    """Extra harvest viewpoints: jittered interpolation between random pairs
    of training poses. Off by default in compilation; useful when the
    training trajectory is sparse."""
    if count <= 0:
        return []
    if len(poses) < 2:
        raise InvalidArgumentError("pose sampling needs at least two training poses")
    rng = np.random.default_rng(seed)
    _, radius = compute_pose_normalization(poses)
    out = []
    for _ in range(count):
        i, j = rng.choice(len(poses), size=2, replace=False)
        t = float(rng.random())
        a, b = poses[int(i)], poses[int(j)]
        position = (1 - t) * a.position + t * b.position + rng.normal(
            0.0, jitter * radius, size=3
        )
        qa, qb = a.orientation, b.orientation
        if float(qa @ qb) < 0.0:
            qb = -qb
        orientation = (1 - t) * qa + t * qb  # nlerp is enough for jittered samples
        if np.linalg.norm(orientation) < 1e-6:  # antipodal pair, midpoint undefined
            orientation = qa
        out.append(
            CameraPose(
                position=position,
                orientation=orientation,
                fov_x=a.fov_x,
                fov_y=a.fov_y,
                width=a.width,
                height=a.height,
                near_clip=a.near_clip,
            )
        )
    return out


def compute_pose_normalization(poses) -> tuple[np.ndarray, float]:
    """Center positions at their mean and scale by the pose-cloud radius."""
    positions = np.asarray([p.position for p in poses], dtype=np.float64)
    mean = positions.mean(axis=0)
    radius = float(np.max(np.linalg.norm(positions - mean, axis=1))) if len(poses) else 0.0
    return mean, radius if radius > 0.0 else 1.0


def pose_feature(
    cam: CameraPose, beta: float, normalization: tuple[np.ndarray, float]
) -> np.ndarray:
    """6-vector (normalized position, beta-weighted view direction)."""
    mean, scale = normalization
    if scale <= 0.0:
        raise InvalidArgumentError("normalization scale must be positive")
    pos = (cam.position - np.asarray(mean, dtype=np.float64)) / scale
    return np.concatenate([pos, beta * cam.forward()])


def _kmeans_pp_init(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centroids = np.empty((k, features.shape[1]))
    centroids[0] = features[int(rng.integers(n))]
    d2 = np.sum((features - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # Degenerate cloud: every remaining centroid lands on a point.
            centroids[i:] = features[0]
            return centroids
        probs = np.cumsum(d2 / total)
        centroids[i] = features[int(np.searchsorted(probs, rng.random()))]
        d2 = np.minimum(d2, np.sum((features - centroids[i]) ** 2, axis=1))
    return centroids


def _kmeans(features: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations with k-means++ seeding; deterministic given seed."""
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(features, k, rng)
    scale = max(float(np.abs(features).max()), 1.0)
    labels = np.zeros(len(features), dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = np.sum((features[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = features[members].mean(axis=0)
            else:
                # Re-seed an empty cluster with the worst-fit point.
                worst = int(np.argmax(d2[np.arange(len(features)), labels]))
                new_centroids[c] = features[worst]
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if movement < KMEANS_REL_TOL * scale:
            break
    d2 = np.sum((features[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    return centroids, labels


def cluster_poses(
    poses: list[CameraPose],
    n_clusters: int,
    beta: float = 1.0,
    seed: int = 0,
    normalization: tuple[np.ndarray, float] | None = None,
) -> list[ClusterSpec]:
    if len(poses) < n_clusters:
        raise InvalidArgumentError(
            f"need at least {n_clusters} poses to build {n_clusters} clusters, got {len(poses)}"
        )
    if normalization is None:
        normalization = compute_pose_normalization(poses)
    features = np.stack([pose_feature(p, beta, normalization) for p in poses])
    centroids, labels = _kmeans(features, n_clusters, seed)
    specs = []
    for c in range(n_clusters):
        idx = np.flatnonzero(labels == c).tolist()
        specs.append(
            ClusterSpec(
                centroid=centroids[c],
                member_indices=idx,
                member_poses=[poses[i] for i in idx],
            )
        )
    return specs


def top_contributors_per_pixel(
    contributions: np.ndarray, ids: np.ndarray, k: int
) -> np.ndarray:
    """Union over pixels of each pixel's k strongest blended splats.

    Ties at the k-th rank break toward the smaller gaussian id.
    """
    if contributions.size == 0:
        return np.array([], dtype=np.int64)
    order = np.argsort(ids, kind="stable")
    ids_sorted = ids[order]
    matrix = contributions[order]
    # Rows are id-ascending, so a stable descending-value sort breaks ties
    # toward smaller ids.
    rank = np.argsort(-matrix, axis=0, kind="stable")[:k]
    picked = matrix[rank, np.arange(matrix.shape[1])[None, :]] > 0.0
    chosen = ids_sorted[rank[picked]]
    return np.unique(chosen).astype(np.int64)


def harvest_top_contributors(
    cluster: ClusterSpec, scene: SceneArrays, k: int, cfg: EngineConfig | None = None
) -> np.ndarray:
    """Ids of every splat that makes some pixel's top-k for some member pose."""
    if k < 1:
        raise InvalidArgumentError(f"k must be >= 1, got {k}")
    if not cluster.member_poses:
        raise InvalidArgumentError("cannot harvest a cluster with no member poses")
    cfg = cfg or EngineConfig()
    collected = []
    for pose in cluster.member_poses:
        result = render_frame(scene, pose, cfg, record_contributions=True)
        collected.append(
            top_contributors_per_pixel(result.contributions, result.contribution_ids, k)
        )
    return np.unique(np.concatenate(collected)) if collected else np.array([], dtype=np.int64)


def partition(
    top_sets: list[np.ndarray], all_ids: np.ndarray, share_threshold: int = 2
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """Split ids into (shared, per-cluster exclusive, discarded).

    A splat harvested by at least ``share_threshold`` clusters becomes
    shared; below the threshold it stays exclusive to the lowest-numbered
    cluster that harvested it; splats harvested nowhere are discarded.
    A threshold of 1 makes every harvested splat shared.
    """
    all_ids = np.asarray(all_ids, dtype=np.int64)
    n_total = int(all_ids.max()) + 1 if len(all_ids) else 0
    counts = np.zeros(n_total, dtype=np.int64)
    owner = np.full(n_total, -1, dtype=np.int64)
    for c in reversed(range(len(top_sets))):
        ids = np.asarray(top_sets[c], dtype=np.int64)
        counts[ids] += 1
        owner[ids] = c  # reversed loop leaves the smallest cluster id

    shared = all_ids[counts[all_ids] >= share_threshold]
    discarded = all_ids[counts[all_ids] == 0]
    exclusive = []
    for c in range(len(top_sets)):
        mask = (counts[all_ids] >= 1) & (counts[all_ids] < share_threshold) & (
            owner[all_ids] == c
        )
        exclusive.append(all_ids[mask])
    return shared, exclusive, discarded


def compile_scene(
    scene: SceneArrays,
    poses: list[CameraPose],
    params: CompileParams = CompileParams(),
    seed: int = 0,
    cfg: EngineConfig | None = None,
    extra_pose_samples: int = 0,
    pose_jitter: float = 0.02,
) -> ClusteredScene:
    """Cluster poses, harvest per-cluster contributors, and partition.

    ``extra_pose_samples`` adds jittered interpolated viewpoints to the
    clustering and harvesting passes; pose assignments are still reported
    for the training poses only.
    """
    sampled = sample_interpolated_poses(poses, extra_pose_samples, pose_jitter, seed)
    all_poses = list(poses) + sampled
    normalization = compute_pose_normalization(all_poses)
    params = replace(
        params,
        position_mean=tuple(float(v) for v in normalization[0]),
        position_scale=float(normalization[1]),
    )
    cfg = cfg or EngineConfig(sh_degree=params.sh_degree, alpha_theta=params.alpha_theta)
    specs = cluster_poses(
        all_poses, params.num_clusters, params.beta, seed, normalization=normalization
    )
    top_sets = []
    for spec in specs:
        spec.top_set = harvest_top_contributors(spec, scene, params.top_k, cfg)
        top_sets.append(spec.top_set)

    shared, exclusive, discarded = partition(top_sets, scene.ids, params.share_threshold)
    assignments = np.zeros(len(all_poses), dtype=np.int64)
    for c, spec in enumerate(specs):
        assignments[spec.member_indices] = c
    assignments = assignments[: len(poses)]

    out = ClusteredScene(
        shared_ids=shared,
        exclusive_ids=exclusive,
        discarded_ids=discarded,
        centroids=np.stack([s.centroid for s in specs]),
        params=params,
        pose_assignments=assignments,
    )
    out.validate(scene.ids)
    return out
