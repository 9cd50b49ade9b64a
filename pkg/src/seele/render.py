"""Frame orchestration: project, bin, sort, then rasterize tile by tile.

Tiles are independent work units; with more than one worker they are
dispatched to a thread pool and written into disjoint image regions, so the
result is identical for any worker count.
"""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .model import ALPHA_THRESHOLD, GAMMA_THRESHOLD, TILE_SIZE, CameraPose, SceneArrays
from .preprocess import TileGrid, bin_tiles, project_detailed
from .rasterize import (
    FrameStats,
    TileGaussians,
    make_tile_context,
    rasterize_contribution_aware,
    rasterize_reference,
    skipped_contribution_bound,
)
from .sorting import sort_intersections

ENGINES = ("ref", "cr")


@dataclass(frozen=True)
class EngineConfig:
    """Everything the pipeline needs besides scene and camera."""

    engine: str = "ref"
    group_w: int = 2
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_theta: float = ALPHA_THRESHOLD
    gamma_threshold: float = GAMMA_THRESHOLD
    sh_degree: int = 3
    tile_size: int = TILE_SIZE
    opacity_aware_filter: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise InvalidArgumentError(f"unknown engine '{self.engine}'")
        if self.group_w not in (1, 2, 4):
            raise InvalidArgumentError(f"group width must be 1, 2 or 4, got {self.group_w}")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be >= 1")


@dataclass
class FramePlan:
    """Projected, binned and sorted inputs for the rasterization stage."""

    grid: TileGrid
    ids: np.ndarray  # (p,) global ids of projected splats
    means: np.ndarray  # (p, 2)
    conics: np.ndarray  # (p, 3)
    colors: np.ndarray  # (p, 3)
    opacities: np.ndarray  # (p,)
    depths: np.ndarray  # (p,)
    sorted_pairs: np.ndarray  # intersection records, sorted
    ranges: list
    culled_near: int
    dropped_degenerate: int

    def tile_gaussians(self, start: int, end: int) -> TileGaussians:
        refs = self.sorted_pairs["gaussian_ref"][start:end]
        return TileGaussians(
            ids=self.ids[refs],
            means=self.means[refs],
            conics=self.conics[refs],
            colors=self.colors[refs],
            opacities=self.opacities[refs],
            depths=self.depths[refs],
        )


@dataclass
class RenderResult:
    image: np.ndarray  # (h, w, 3) float64, background composited
    stats: FrameStats
    contributions: np.ndarray | None = None  # (p, h*w) blended weights
    contribution_ids: np.ndarray | None = None  # (p,) global ids


def plan_frame(scene: SceneArrays, cam: CameraPose, cfg: EngineConfig) -> FramePlan:
    grid = TileGrid.for_image(cam.width, cam.height, cfg.tile_size)
    projected = []
    culled = dropped = 0
    for i in range(len(scene)):
        pg, reason = project_detailed(
            scene.gaussian(i),
            cam,
            sh_degree=cfg.sh_degree,
            alpha_theta=cfg.alpha_theta,
            opacity_aware=cfg.opacity_aware_filter,
        )
        if pg is None:
            if reason == "near":
                culled += 1
            else:
                dropped += 1
            continue
        projected.append((int(scene.ids[i]), pg))

    p = len(projected)
    ids = np.zeros(p, dtype=np.int64)
    means = np.zeros((p, 2))
    conics = np.zeros((p, 3))
    colors = np.zeros((p, 3))
    opacities = np.zeros(p)
    depths = np.zeros(p)
    pairs = []
    for ref, (gid, pg) in enumerate(projected):
        ids[ref] = gid
        means[ref] = pg.mean2d
        ic = pg.inv_cov2d
        conics[ref] = (ic[0, 0], ic[0, 1], ic[1, 1])
        colors[ref] = pg.color
        opacities[ref] = pg.opacity
        depths[ref] = pg.depth
        pairs.extend(bin_tiles(pg, grid, gaussian_ref=ref))

    flat, ranges = sort_intersections(pairs)
    return FramePlan(
        grid=grid,
        ids=ids,
        means=means,
        conics=conics,
        colors=colors,
        opacities=opacities,
        depths=depths,
        sorted_pairs=flat,
        ranges=ranges,
        culled_near=culled,
        dropped_degenerate=dropped,
    )


def _run_tile(plan: FramePlan, cfg: EngineConfig, tile_id: int, start: int, end: int,
              contrib: np.ndarray | None):
    ctx = make_tile_context(plan.grid, tile_id)
    tg = plan.tile_gaussians(start, end)
    contrib_rows = None
    if contrib is not None and end > start:
        # Scattered into the frame-wide matrix after the tile finishes.
        contrib_rows = np.zeros((end - start, ctx.centers.shape[0]))
    bg = np.asarray(cfg.background, dtype=np.float64)
    if cfg.engine == "ref":
        state, cost = rasterize_reference(
            ctx, tg,
            alpha_theta=cfg.alpha_theta,
            gamma_threshold=cfg.gamma_threshold,
            background=bg,
            contrib_out=contrib_rows,
        )
    else:
        state, cost = rasterize_contribution_aware(
            ctx, tg, cfg.group_w,
            alpha_theta=cfg.alpha_theta,
            gamma_threshold=cfg.gamma_threshold,
            background=bg,
            contrib_out=contrib_rows,
        )
    return ctx, state, cost, contrib_rows


def render_frame(
    scene: SceneArrays,
    cam: CameraPose,
    cfg: EngineConfig,
    *,
    record_contributions: bool = False,
    plan: FramePlan | None = None,
) -> RenderResult:
    """Render one frame; optionally record per-pixel blended weights.

    ``plan`` lets callers reuse preprocessing output across engine runs on
    the same scene and camera.
    """
    t0 = time.perf_counter()
    if plan is None:
        plan = plan_frame(scene, cam, cfg)
    grid = plan.grid
    image = np.zeros((cam.height, cam.width, 3))
    n_pixels = cam.height * cam.width
    contrib = (
        np.zeros((len(plan.ids), n_pixels)) if record_contributions else None
    )
    stats = FrameStats(
        tile_pairs=len(plan.sorted_pairs),
        culled_near=plan.culled_near,
        dropped_degenerate=plan.dropped_degenerate,
    )

    range_by_tile = {r.tile_id: r for r in plan.ranges}
    jobs = []
    for tile_id in range(grid.tile_count):
        r = range_by_tile.get(tile_id)
        start, end = (r.start, r.end) if r else (0, 0)
        jobs.append((tile_id, start, end))

    def work(job):
        tile_id, start, end = job
        return _run_tile(plan, cfg, tile_id, start, end, contrib)

    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(job) for job in jobs]

    flat_image = image.reshape(n_pixels, 3)
    for (tile_id, start, end), (ctx, state, cost, contrib_rows) in zip(jobs, results):
        stats.add_cost(cost)
        valid = ctx.valid
        flat_image[ctx.pixel_index[valid]] = state.color[valid]
        if contrib_rows is not None:
            refs = plan.sorted_pairs["gaussian_ref"][start:end]
            cols = ctx.pixel_index[valid]
            contrib[refs[:, None], cols[None, :]] = contrib_rows[:, valid]

    stats.wall_ms = (time.perf_counter() - t0) * 1000.0
    return RenderResult(
        image=image,
        stats=stats,
        contributions=contrib,
        contribution_ids=plan.ids if record_contributions else None,
    )


def frame_skip_bound(scene: SceneArrays, cam: CameraPose, cfg: EngineConfig,
                     plan: FramePlan | None = None) -> np.ndarray:
    """Per-pixel certified error bound of the group-gated engine, (h, w)."""
    if plan is None:
        plan = plan_frame(scene, cam, cfg)
    grid = plan.grid
    bound = np.zeros(cam.height * cam.width)
    range_by_tile = {r.tile_id: r for r in plan.ranges}
    for tile_id in range(grid.tile_count):
        r = range_by_tile.get(tile_id)
        start, end = (r.start, r.end) if r else (0, 0)
        ctx = make_tile_context(grid, tile_id)
        tg = plan.tile_gaussians(start, end)
        tile_bound = skipped_contribution_bound(
            ctx, tg, cfg.group_w,
            alpha_theta=cfg.alpha_theta,
            gamma_threshold=cfg.gamma_threshold,
        )
        valid = ctx.valid
        bound[ctx.pixel_index[valid]] = tile_bound[valid]
    return bound.reshape(cam.height, cam.width)
