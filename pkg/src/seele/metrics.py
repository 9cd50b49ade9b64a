"""Quality metrics, the contribution-distribution analysis, and the
comparative benchmark harness."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import InvalidArgumentError
from .io import BYTES_PER_GAUSSIAN
from .model import CameraPose, SceneArrays
from .render import EngineConfig, render_frame
from .residency import ResidentRenderer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])

REPORT_COLUMNS = [
    "config",
    "psnr_db",
    "ssim",
    "lpips",
    "warp_steps",
    "alpha_evals",
    "blend_steps",
    "leader_evals",
    "peak_resident_bytes",
    "stalls",
    "wall_ms",
]


def psnr(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; identical
    inputs give +inf."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    kernel = np.outer(k, k)
    return kernel / kernel.sum()


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ _LUMA
    return img


def ssim(img_a: np.ndarray, img_b: np.ndarray) -> float:
    """Mean structural similarity over the luminance channel.

    Gaussian-weighted 11x11 windows with sigma 1.5, evaluated where the
    window fits entirely inside the image.
    """
    a = luminance(img_a)
    b = luminance(img_b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(
            f"images must be at least {SSIM_WINDOW} pixels per side for SSIM"
        )
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        return convolve2d(x, kernel, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    )
    return float(s.mean())


@dataclass
class ContributionCurve:
    """Sorted cumulative blended-weight curves of one rendered frame."""

    aggregate: np.ndarray  # mean cumulative curve over pixels
    per_pixel_totals: np.ndarray  # (h*w,) total blended weight
    fraction_for_99: float  # mean fraction of a pixel's splats covering 99%
    per_pixel_curves: list[np.ndarray] | None = None


def contribution_cdf(
    scene: SceneArrays,
    cam: CameraPose,
    cfg: EngineConfig | None = None,
    *,
    keep_per_pixel: bool = False,
) -> ContributionCurve:
    """Sort every pixel's blended weights in descending order and
    accumulate, reporting how fast contribution concentrates."""
    cfg = cfg or EngineConfig()
    result = render_frame(scene, cam, cfg, record_contributions=True)
    matrix = result.contributions  # (p, n_pixels)
    n_pixels = matrix.shape[1] if matrix is not None else 0
    if matrix is None or matrix.size == 0:
        return ContributionCurve(
            aggregate=np.zeros(0),
            per_pixel_totals=np.zeros(n_pixels),
            fraction_for_99=0.0,
            per_pixel_curves=[] if keep_per_pixel else None,
        )

    sorted_desc = -np.sort(-matrix, axis=0)
    cumulative = np.cumsum(sorted_desc, axis=0)  # (p, n_pixels)
    totals = cumulative[-1]

    counts = (sorted_desc > 0.0).sum(axis=0)
    fractions = []
    for pix in range(matrix.shape[1]):
        if counts[pix] == 0:
            continue
        target = 0.99 * totals[pix]
        rank = int(np.searchsorted(cumulative[:, pix], target - 1e-15)) + 1
        fractions.append(rank / counts[pix])
    fraction_for_99 = float(np.mean(fractions)) if fractions else 0.0

    curves = None
    if keep_per_pixel:
        curves = [
            cumulative[: max(int(counts[pix]), 1), pix] if counts[pix] else np.zeros(0)
            for pix in range(matrix.shape[1])
        ]
    return ContributionCurve(
        aggregate=cumulative.mean(axis=1),
        per_pixel_totals=totals,
        fraction_for_99=fraction_for_99,
        per_pixel_curves=curves,
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isinf(value):
            return "inf"
        return f"{value:.6f}"
    return "" if value is None else str(value)


def bench_compare(
    configs: list[dict],
    poses: list[CameraPose],
    *,
    flat_scene: SceneArrays | None = None,
    clustered=None,
    base_cfg: EngineConfig | None = None,
    m: int | None = None,
) -> list[dict]:
    """Render a trajectory under each configuration and report quality and
    cost against the flat+reference baseline.

    ``configs`` entries carry ``engine`` ("ref"/"cr") and ``scene`` ("flat"/
    "clustered"). Baseline frames are rendered once up front.
    """
    base_cfg = base_cfg or EngineConfig()
    if flat_scene is None:
        raise InvalidArgumentError("bench requires the flat scene for the baseline")

    baseline_cfg = replace(base_cfg, engine="ref")
    baseline = [render_frame(flat_scene, pose, baseline_cfg).image for pose in poses]
    flat_bytes = len(flat_scene) * BYTES_PER_GAUSSIAN

    rows = []
    for entry in configs:
        engine = entry["engine"]
        scene_mode = entry["scene"]
        cfg = replace(base_cfg, engine=engine)
        t0 = time.perf_counter()
        totals = {"warp": 0, "alpha": 0, "blend": 0, "leader": 0, "stalls": 0}
        peak_bytes = flat_bytes
        psnrs, ssims = [], []

        if scene_mode == "clustered":
            if clustered is None:
                raise InvalidArgumentError("no clustered scene supplied for a clustered config")
            with ResidentRenderer(clustered, m) as renderer:
                for pose, base_img in zip(poses, baseline):
                    result = renderer.render_frame(pose, cfg)
                    totals["warp"] += result.stats.warp_steps
                    totals["alpha"] += result.stats.alpha_eval_steps
                    totals["blend"] += result.stats.blend_steps
                    totals["leader"] += result.stats.leader_eval_steps
                    psnrs.append(psnr(result.image, base_img))
                    ssims.append(ssim(result.image, base_img))
                peak_bytes = renderer.state.peak_resident_bytes
                totals["stalls"] = renderer.state.stall_count
        else:
            for pose, base_img in zip(poses, baseline):
                result = render_frame(flat_scene, pose, cfg)
                totals["warp"] += result.stats.warp_steps
                totals["alpha"] += result.stats.alpha_eval_steps
                totals["blend"] += result.stats.blend_steps
                totals["leader"] += result.stats.leader_eval_steps
                psnrs.append(psnr(result.image, base_img))
                ssims.append(ssim(result.image, base_img))

        wall_ms = (time.perf_counter() - t0) * 1000.0
        rows.append(
            {
                "config": f"{engine}:{scene_mode}",
                "psnr_db": math.inf if all(math.isinf(v) for v in psnrs)
                else float(np.mean([v for v in psnrs if not math.isinf(v)])),
                "ssim": float(np.mean(ssims)),
                "lpips": None,
                "warp_steps": totals["warp"],
                "alpha_evals": totals["alpha"],
                "blend_steps": totals["blend"],
                "leader_evals": totals["leader"],
                "peak_resident_bytes": peak_bytes,
                "stalls": totals["stalls"],
                "wall_ms": wall_ms,
            }
        )
    return rows


def write_report(rows: list[dict], csv_path) -> None:
    """Emit the benchmark table as CSV plus a JSON mirror next to it."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    json_rows = []
    for row in rows:
        mirrored = {}
        for c in REPORT_COLUMNS:
            v = row[c]
            if isinstance(v, float) and math.isinf(v):
                v = "inf"
            mirrored[c] = v
        json_rows.append(mirrored)
    csv_path.with_suffix(".json").write_text(json.dumps(json_rows, indent=1))
