"""Command-line interface: compile scenes, render trajectories, benchmark
engines, inspect containers and diff images.

Exit codes: 0 success, 2 bad input, 3 internal contract violation.
Flags override the SEELE_THREADS / SEELE_SEED environment variables, which
override built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import compiler, io, metrics
from .errors import SeeleError, UserInputError
from .model import SceneArrays
from .render import EngineConfig, render_frame
from .residency import ResidentRenderer

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INTERNAL = 3


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise UserInputError(f"{name} must be an integer, got {raw!r}") from exc


def _parse_background(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UserInputError(f"background must be 'r,g,b', got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise UserInputError(f"background must be numeric, got {text!r}") from exc


def _load_scene_input(path: Path):
    """Returns (flat SceneArrays | None, clustered handle | None)."""
    if path.is_dir():
        return None, io.load_clustered_scene(path)
    scene = io.load_ply(path)
    return scene, None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seele")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="cluster poses and emit a scene container")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--cameras", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--clusters", type=int, default=24)
    p.add_argument("--topk", type=int, default=32)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--share-threshold", type=int, default=2)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--m", type=int, default=None,
                   help="neighbor-cluster default stored in the manifest")
    p.add_argument("--sample-poses", type=int, default=0,
                   help="extra jitter-interpolated viewpoints for harvesting")
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("render", help="render every pose of a trajectory")
    p.add_argument("--scene", required=True, type=Path,
                   help="trained PLY or a compiled container directory")
    p.add_argument("--cameras", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--engine", choices=("ref", "cr"), default="ref")
    p.add_argument("--group", type=int, default=2)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--background", default="0,0,0")
    p.add_argument("--stats", type=Path, default=None)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("bench", help="compare engine/scene configurations")
    p.add_argument("--scene", required=True, type=Path, help="trained PLY")
    p.add_argument("--clustered", type=Path, default=None,
                   help="compiled container for clustered configs")
    p.add_argument("--cameras", required=True, type=Path)
    p.add_argument("--matrix", default="ref:flat,cr:flat",
                   help="comma list of engine:scene tokens, e.g. ref:flat,cr:clustered")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--group", type=int, default=2)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("inspect", help="print scene or container summary")
    p.add_argument("--scene", required=True, type=Path)

    p = sub.add_parser("diff", help="psnr and ssim between two images")
    p.add_argument("--a", required=True, type=Path)
    p.add_argument("--b", required=True, type=Path)
    return parser


def _cmd_compile(args) -> int:
    scene_file = io.load_ply(args.scene)
    poses = io.load_cameras(args.cameras)
    seed = args.seed if args.seed is not None else _env_int("SEELE_SEED", 0)
    neighbors = args.m if args.m is not None else min(4, max(args.clusters - 1, 0))
    params = compiler.CompileParams(
        num_clusters=args.clusters,
        top_k=args.topk,
        beta=args.beta,
        share_threshold=args.share_threshold,
        neighbors=neighbors,
        sh_degree=scene_file.sh_degree,
    )
    threads = args.threads if args.threads is not None else _env_int("SEELE_THREADS", 1)
    cfg = EngineConfig(sh_degree=scene_file.sh_degree, threads=threads)
    arrays = scene_file.arrays()
    result = compiler.compile_scene(
        arrays, poses, params, seed=seed, cfg=cfg,
        extra_pose_samples=args.sample_poses,
    )
    io.write_clustered_scene(result, arrays, args.out)

    total = len(arrays)
    shared = len(result.shared_ids)
    exclusive = sum(len(ids) for ids in result.exclusive_ids)
    discarded = len(result.discarded_ids)
    largest = max((len(ids) for ids in result.exclusive_ids), default=0)
    resident_worst = shared + largest * (1 + params.neighbors)
    reduction = 100.0 * (1.0 - min(resident_worst, total) / total)
    print(f"clusters: {params.num_clusters}")
    print(f"shared: {shared}  exclusive: {exclusive}  discarded: {discarded}")
    print(f"projected resident-size reduction: {reduction:.1f}%")
    return EXIT_OK


def _cmd_render(args) -> int:
    flat, clustered = _load_scene_input(args.scene)
    poses = io.load_cameras(args.cameras)
    threads = args.threads if args.threads is not None else _env_int("SEELE_THREADS", 1)
    sh_degree = flat.sh_degree if flat is not None else int(
        clustered.manifest.get("sh_degree", 3)
    )
    cfg = EngineConfig(
        engine=args.engine,
        group_w=args.group,
        background=_parse_background(args.background),
        sh_degree=sh_degree,
        threads=threads,
    )
    args.out.mkdir(parents=True, exist_ok=True)

    stats_lines = []
    if clustered is not None:
        with ResidentRenderer(clustered, args.m) as renderer:
            for i, pose in enumerate(poses):
                result = renderer.render_frame(pose, cfg)
                io.write_image(result.image, args.out / f"frame_{i:04d}.png")
                stats_lines.append({"frame": i, **result.stats.as_dict()})
    else:
        arrays = flat.arrays()
        for i, pose in enumerate(poses):
            result = render_frame(arrays, pose, cfg)
            io.write_image(result.image, args.out / f"frame_{i:04d}.png")
            stats_lines.append({"frame": i, **result.stats.as_dict()})

    if args.stats is not None:
        with open(args.stats, "w") as fh:
            for line in stats_lines:
                fh.write(json.dumps(line, sort_keys=True) + "\n")
    print(f"rendered {len(poses)} frame(s) to {args.out}")
    return EXIT_OK


def _parse_matrix(text: str) -> list[dict]:
    configs = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        parts = token.split(":")
        if len(parts) != 2 or parts[0] not in ("ref", "cr") or parts[1] not in (
            "flat",
            "clustered",
        ):
            raise UserInputError(f"bad matrix token {token!r}; expected engine:scene")
        configs.append({"engine": parts[0], "scene": parts[1]})
    if not configs:
        raise UserInputError("benchmark matrix is empty")
    return configs


def _cmd_bench(args) -> int:
    scene_file = io.load_ply(args.scene)
    poses = io.load_cameras(args.cameras)
    configs = _parse_matrix(args.matrix)
    clustered = io.load_clustered_scene(args.clustered) if args.clustered else None
    if clustered is None and any(c["scene"] == "clustered" for c in configs):
        raise UserInputError("matrix requests clustered configs but --clustered is missing")
    threads = args.threads if args.threads is not None else _env_int("SEELE_THREADS", 1)
    base_cfg = EngineConfig(group_w=args.group, sh_degree=scene_file.sh_degree, threads=threads)
    rows = metrics.bench_compare(
        configs,
        poses,
        flat_scene=scene_file.arrays(),
        clustered=clustered,
        base_cfg=base_cfg,
        m=args.m,
    )
    metrics.write_report(rows, args.out)
    print(f"wrote {len(rows)} config row(s) to {args.out}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    flat, clustered = _load_scene_input(args.scene)
    if clustered is not None:
        man = clustered.manifest
        print(f"clusters: {man['num_clusters']}")
        print(f"shared count: {man['shared']['count']}")
        for i, entry in enumerate(man["clusters"]):
            print(f"cluster {i}: count={entry['count']} file={entry['file']}")
        print(f"discarded count: {man['discarded_count']}")
        print(
            "hyperparameters: "
            f"k={man['k']} beta={man['beta']} M={man['M']} "
            f"group_w={man['group_w']} alpha_theta={man['alpha_theta']}"
        )
    else:
        print(f"gaussians: {len(flat.gaussians)}")
        print(f"sh_degree: {flat.sh_degree}")
    return EXIT_OK


def _cmd_diff(args) -> int:
    img_a = io.load_image(args.a)
    img_b = io.load_image(args.b)
    p = metrics.psnr(img_a, img_b)
    s = metrics.ssim(img_a, img_b)
    p_text = "inf" if math.isinf(p) else f"{p:.4f}"
    print(f"psnr={p_text} ssim={s:.6f}")
    return EXIT_OK


_COMMANDS = {
    "compile": _cmd_compile,
    "render": _cmd_render,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
    "diff": _cmd_diff,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UserInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SeeleError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
