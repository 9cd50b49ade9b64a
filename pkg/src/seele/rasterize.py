"""Tile rasterization in two interchangeable engines plus the warp-lockstep
cost model.

The reference engine blends every splat front-to-back at every pixel. The
contribution-aware engine first evaluates each splat's alpha only at the
leader pixel (the top-left member) of every w-by-w pixel group; when the
leader's alpha is below the skip threshold the whole group drops the splat,
otherwise every member blends exactly like the reference engine.

Cost is modeled in warps of 32 lanes executing in lockstep: a warp with any
active lane pays for a step even when most lanes idle. Per splat, a live
warp is charged one evaluation step (the alpha phase for the reference
engine, the leader phase for the gated one) plus at most one more step for
its second phase: the reference blend phase runs when any lane blends,
while the gated member phase (alpha evaluation fused with blending) runs
when any leader in the warp passes. The bookkeeping counters
``alpha_eval_steps`` / ``blend_steps`` / ``leader_eval_steps`` break those
charges down by what executed; ``warp_steps`` counts charged steps.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError
from .model import ALPHA_THRESHOLD, GAMMA_THRESHOLD
from .preprocess import TileGrid

WARP_SIZE = 32
# Numerical guard inherited from trained models: alpha never saturates fully.
ALPHA_CLAMP = 0.99


@dataclass
class WarpCost:
    """Lockstep step counters, summed over warps."""

    alpha_eval_steps: int = 0
    blend_steps: int = 0
    leader_eval_steps: int = 0
    warp_steps: int = 0

    def add(self, other: "WarpCost") -> None:
        self.alpha_eval_steps += other.alpha_eval_steps
        self.blend_steps += other.blend_steps
        self.leader_eval_steps += other.leader_eval_steps
        self.warp_steps += other.warp_steps


@dataclass
class FrameStats:
    """Per-frame counters emitted alongside every rendered image."""

    alpha_eval_steps: int = 0
    blend_steps: int = 0
    leader_eval_steps: int = 0
    warp_steps: int = 0
    tile_pairs: int = 0
    culled_near: int = 0
    dropped_degenerate: int = 0
    resident_bytes: int = 0
    stalls: int = 0
    prefetch_hits: int = 0
    wall_ms: float = 0.0

    def add_cost(self, cost: WarpCost) -> None:
        self.alpha_eval_steps += cost.alpha_eval_steps
        self.blend_steps += cost.blend_steps
        self.leader_eval_steps += cost.leader_eval_steps
        self.warp_steps += cost.warp_steps

    def as_dict(self) -> dict:
        return {
            "alpha_eval_steps": self.alpha_eval_steps,
            "blend_steps": self.blend_steps,
            "leader_eval_steps": self.leader_eval_steps,
            "warp_steps": self.warp_steps,
            "tile_pairs": self.tile_pairs,
            "culled_near": self.culled_near,
            "dropped_degenerate": self.dropped_degenerate,
            "resident_bytes": self.resident_bytes,
            "stalls": self.stalls,
            "prefetch_hits": self.prefetch_hits,
            "wall_ms": self.wall_ms,
        }


@dataclass
class TileGaussians:
    """Depth-sorted splat slice binned to one tile, as flat arrays."""

    ids: np.ndarray  # (g,) global ids
    means: np.ndarray  # (g, 2)
    conics: np.ndarray  # (g, 3): a, b, c with q = a dx^2 + 2 b dx dy + c dy^2
    colors: np.ndarray  # (g, 3)
    opacities: np.ndarray  # (g,)
    depths: np.ndarray  # (g,)

    def __len__(self) -> int:
        return len(self.depths)


@dataclass
class TileContext:
    """Geometry of one tile: pixel centers and image-validity mask."""

    origin: tuple[int, int]
    tile_size: int
    centers: np.ndarray  # (t*t, 2) pixel centers, row-major
    valid: np.ndarray  # (t*t,) bool, inside the image
    pixel_index: np.ndarray  # (t*t,) flat y*width+x, -1 outside


def make_tile_context(grid: TileGrid, tile_id: int) -> TileContext:
    ox, oy = grid.tile_origin(tile_id)
    ts = grid.tile_size
    ys, xs = np.mgrid[oy : oy + ts, ox : ox + ts]
    xs = xs.reshape(-1)
    ys = ys.reshape(-1)
    valid = (xs < grid.width) & (ys < grid.height)
    centers = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
    pixel_index = np.where(valid, ys * grid.width + xs, -1).astype(np.int64)
    return TileContext(
        origin=(ox, oy), tile_size=ts, centers=centers, valid=valid, pixel_index=pixel_index
    )


@dataclass
class TilePixelState:
    """Per-pixel accumulation state after a tile finishes."""

    color: np.ndarray  # (t*t, 3)
    transmittance: np.ndarray  # (t*t,)
    done: np.ndarray  # (t*t,) bool
    weight: np.ndarray  # (t*t,) sum of blended transmittance-weighted alphas


def alpha(pg, p) -> float:
    """Transparency of one projected splat at a pixel center."""
    d = np.asarray(p, dtype=np.float64) - pg.mean2d
    q = float(d @ pg.inv_cov2d @ d)
    return min(pg.opacity * np.exp(-0.5 * q), ALPHA_CLAMP)


def _alphas(tg: TileGaussians, j: int, centers: np.ndarray) -> np.ndarray:
    dx = centers[:, 0] - tg.means[j, 0]
    dy = centers[:, 1] - tg.means[j, 1]
    a, b, c = tg.conics[j]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    return np.minimum(tg.opacities[j] * np.exp(-0.5 * q), ALPHA_CLAMP)


def _check_sorted(tg: TileGaussians) -> None:
    if len(tg) > 1 and np.any(np.diff(tg.depths) < 0):
        raise ContractViolationError("tile gaussians are not in front-to-back order")


def _new_state(ctx: TileContext) -> TilePixelState:
    n = ctx.centers.shape[0]
    return TilePixelState(
        color=np.zeros((n, 3)),
        transmittance=np.ones(n),
        done=~ctx.valid.copy(),
        weight=np.zeros(n),
    )


def _blend(state: TilePixelState, mask: np.ndarray, a: np.ndarray, color: np.ndarray,
           gamma_threshold: float, contrib_row: np.ndarray | None) -> None:
    contrib = state.transmittance[mask] * a[mask]
    state.color[mask] += contrib[:, None] * color
    state.weight[mask] += contrib
    state.transmittance[mask] *= 1.0 - a[mask]
    state.done |= state.transmittance < gamma_threshold
    if contrib_row is not None:
        contrib_row[mask] = contrib


def rasterize_reference(
    ctx: TileContext,
    tg: TileGaussians,
    *,
    alpha_theta: float = ALPHA_THRESHOLD,
    gamma_threshold: float = GAMMA_THRESHOLD,
    background: np.ndarray | None = None,
    contrib_out: np.ndarray | None = None,
    trace: list | None = None,
) -> tuple[TilePixelState, WarpCost]:
    """Blend a tile's sorted splats at every pixel, front to back.

    Splats with alpha below ``alpha_theta`` at a pixel are skipped there; a
    pixel stops once its transmittance falls below ``gamma_threshold``; the
    tile stops when every pixel has stopped. ``contrib_out`` rows, when
    given, receive each splat's blended transmittance-weighted alpha.
    """
    _check_sorted(tg)
    state = _new_state(ctx)
    cost = WarpCost()
    n_warps = ctx.centers.shape[0] // WARP_SIZE

    for j in range(len(tg)):
        if state.done.all():
            break
        live = ~state.done
        a = _alphas(tg, j, ctx.centers)

        warp_live = live.reshape(n_warps, WARP_SIZE).any(axis=1)
        blend_mask = live & (a >= alpha_theta)
        warp_blend = blend_mask.reshape(n_warps, WARP_SIZE).any(axis=1)
        cost.alpha_eval_steps += int(warp_live.sum())
        cost.blend_steps += int(warp_blend.sum())
        cost.warp_steps += int(warp_live.sum()) + int(warp_blend.sum())
        if trace is not None:
            steps = warp_live.astype(np.int64) + warp_blend.astype(np.int64)
            trace.append(
                {
                    "steps": steps,
                    "alpha_eval": warp_live.astype(np.int64),
                    "blend": warp_blend.astype(np.int64),
                    "leader_eval": np.zeros(n_warps, dtype=np.int64),
                }
            )

        row = None if contrib_out is None else contrib_out[j]
        _blend(state, blend_mask, a, tg.colors[j], gamma_threshold, row)

    if background is not None:
        state.color[ctx.valid] += (
            state.transmittance[ctx.valid, None] * np.asarray(background)[None, :]
        )
    return state, cost


def _group_shapes(tile_size: int, group_w: int) -> tuple[int, int]:
    if group_w < 1 or tile_size % group_w:
        raise InvalidArgumentError(
            f"group width {group_w} must divide the tile size {tile_size}"
        )
    if (group_w * group_w) > WARP_SIZE or WARP_SIZE % (group_w * group_w):
        raise InvalidArgumentError(
            f"group width {group_w} does not pack into {WARP_SIZE}-lane warps"
        )
    groups_per_side = tile_size // group_w
    groups_per_warp = WARP_SIZE // (group_w * group_w)
    return groups_per_side, groups_per_warp


def rasterize_contribution_aware(
    ctx: TileContext,
    tg: TileGaussians,
    group_w: int = 2,
    *,
    alpha_theta: float = ALPHA_THRESHOLD,
    gamma_threshold: float = GAMMA_THRESHOLD,
    background: np.ndarray | None = None,
    contrib_out: np.ndarray | None = None,
    trace: list | None = None,
) -> tuple[TilePixelState, WarpCost]:
    """Leader-gated blending: a group drops a splat when its leader's alpha
    is below ``alpha_theta``; otherwise members blend exactly like the
    reference engine, leader value included. ``group_w`` of 1 degenerates to
    the reference image bit for bit.
    """
    _check_sorted(tg)
    ts = ctx.tile_size
    gs, gpw = _group_shapes(ts, group_w)
    state = _new_state(ctx)
    cost = WarpCost()
    n_groups = gs * gs
    n_warps = n_groups // gpw

    for j in range(len(tg)):
        if state.done.all():
            break
        live = ~state.done
        a = _alphas(tg, j, ctx.centers)

        # Group-major views; groups and their warps are row-major blocks.
        live_g = live.reshape(gs, group_w, gs, group_w).any(axis=(1, 3)).reshape(-1)
        leader_a = a.reshape(ts, ts)[::group_w, ::group_w].reshape(-1)
        group_pass = live_g & (leader_a >= alpha_theta)

        pass_px = (
            np.broadcast_to(
                group_pass.reshape(gs, 1, gs, 1), (gs, group_w, gs, group_w)
            ).reshape(-1)
        )
        blend_mask = live & pass_px & (a >= alpha_theta)

        warp_live = live_g.reshape(n_warps, gpw).any(axis=1)
        warp_pass = group_pass.reshape(n_warps, gpw).any(axis=1)
        warp_blend = (
            blend_mask.reshape(gs, group_w, gs, group_w)
            .any(axis=(1, 3))
            .reshape(n_warps, gpw)
            .any(axis=1)
        )
        cost.leader_eval_steps += int(warp_live.sum())
        cost.alpha_eval_steps += int(warp_pass.sum())
        cost.blend_steps += int(warp_blend.sum())
        # The member phase is one fused alpha+blend step per passing warp.
        cost.warp_steps += int(warp_live.sum()) + int(warp_pass.sum())
        if trace is not None:
            steps = warp_live.astype(np.int64) + warp_pass.astype(np.int64)
            trace.append(
                {
                    "steps": steps,
                    "alpha_eval": warp_pass.astype(np.int64),
                    "blend": warp_blend.astype(np.int64),
                    "leader_eval": warp_live.astype(np.int64),
                }
            )

        row = None if contrib_out is None else contrib_out[j]
        _blend(state, blend_mask, a, tg.colors[j], gamma_threshold, row)

    if background is not None:
        state.color[ctx.valid] += (
            state.transmittance[ctx.valid, None] * np.asarray(background)[None, :]
        )
    return state, cost


def skipped_contribution_bound(
    ctx: TileContext,
    tg: TileGaussians,
    group_w: int = 2,
    *,
    alpha_theta: float = ALPHA_THRESHOLD,
    gamma_threshold: float = GAMMA_THRESHOLD,
) -> np.ndarray:
    """Per-pixel sum of what group-skipped splats would have blended.

    Runs the contribution-aware schedule while tracking, per pixel, the
    transmittance the reference engine would have had. Every time a splat
    blends under the reference schedule but not under the group-gated one,
    its reference contribution times its maximum color channel is added to
    that pixel's bound.
    """
    _check_sorted(tg)
    ts = ctx.tile_size
    gs, gpw = _group_shapes(ts, group_w)
    n = ctx.centers.shape[0]

    t_cr = np.ones(n)
    done_cr = ~ctx.valid.copy()
    t_ref = np.ones(n)
    done_ref = ~ctx.valid.copy()
    bound = np.zeros(n)

    for j in range(len(tg)):
        if done_cr.all() and done_ref.all():
            break
        a = _alphas(tg, j, ctx.centers)

        live_cr = ~done_cr
        live_g = live_cr.reshape(gs, group_w, gs, group_w).any(axis=(1, 3)).reshape(-1)
        leader_a = a.reshape(ts, ts)[::group_w, ::group_w].reshape(-1)
        group_pass = live_g & (leader_a >= alpha_theta)
        pass_px = (
            np.broadcast_to(
                group_pass.reshape(gs, 1, gs, 1), (gs, group_w, gs, group_w)
            ).reshape(-1)
        )
        blend_cr = live_cr & pass_px & (a >= alpha_theta)
        blend_ref = ~done_ref & (a >= alpha_theta)

        skipped = blend_ref & ~blend_cr
        bound[skipped] += t_ref[skipped] * a[skipped] * float(tg.colors[j].max())

        t_cr[blend_cr] *= 1.0 - a[blend_cr]
        done_cr |= t_cr < gamma_threshold
        t_ref[blend_ref] *= 1.0 - a[blend_ref]
        done_ref |= t_ref < gamma_threshold

    return bound


def warp_cost_from_trace(trace: list) -> WarpCost:
    """Aggregate a per-splat, per-warp charge trace into totals."""
    cost = WarpCost()
    for entry in trace:
        cost.alpha_eval_steps += int(entry["alpha_eval"].sum())
        cost.blend_steps += int(entry["blend"].sum())
        cost.leader_eval_steps += int(entry["leader_eval"].sum())
        cost.warp_steps += int(entry["steps"].sum())
    return cost
