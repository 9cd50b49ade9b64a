"""Front-to-back ordering of tile intersections."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .preprocess import TileIntersection

INTERSECTION_DTYPE = np.dtype(
    [("tile_id", "<i8"), ("gaussian_ref", "<i8"), ("depth", "<f8")]
)


@dataclass(frozen=True)
class SortedTileRange:
    """Half-open [start, end) slice of one tile in the sorted flat array."""

    tile_id: int
    start: int
    end: int


def pack_intersections(items: Sequence[TileIntersection]) -> np.ndarray:
    arr = np.empty(len(items), dtype=INTERSECTION_DTYPE)
    for i, it in enumerate(items):
        arr[i] = (it.tile_id, it.gaussian_ref, it.depth)
    return arr


def sort_intersections(
    items: Sequence[TileIntersection] | np.ndarray,
) -> tuple[np.ndarray, list[SortedTileRange]]:
    """Sort by (tile_id, depth, gaussian_ref) and compute per-tile ranges.

    The gaussian_ref tie-break makes equal-depth ordering deterministic, so
    the result is independent of input order and thread count.
    """
    arr = items if isinstance(items, np.ndarray) else pack_intersections(items)
    if arr.dtype != INTERSECTION_DTYPE:
        raise TypeError("expected an intersection record array")
    order = np.lexsort((arr["gaussian_ref"], arr["depth"], arr["tile_id"]))
    flat = arr[order]

    ranges: list[SortedTileRange] = []
    if len(flat):
        tiles = flat["tile_id"]
        boundaries = np.flatnonzero(np.diff(tiles)) + 1
        starts = np.concatenate(([0], boundaries))
        ends = np.concatenate((boundaries, [len(flat)]))
        for s, e in zip(starts.tolist(), ends.tolist()):
            ranges.append(SortedTileRange(tile_id=int(tiles[s]), start=s, end=e))
    return flat, ranges
