"""Keypoint heatmaps used as targets for the attention masks.

Keypoints live in normalized image coordinates. Each one is drawn as an
isotropic Gaussian on a ``resolution x resolution`` grid, weighted by its
estimator confidence (lip points at half weight), the overlay is averaged
into a 7x7 grid and finally softmax-normalized over its 49 cells.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericInputError
from .tensor import softmax_array

GROUPS = ("lips", "other")


@dataclass(frozen=True)
class Keypoint:
    x: float  # normalized column
    y: float  # normalized row
    conf: float
    group: str = "other"

    def __post_init__(self):
        if not 0.0 <= self.conf <= 1.0:
            raise ValueError(f"keypoint confidence {self.conf} outside [0, 1]")
        if self.group not in GROUPS:
            raise ValueError(f"unknown keypoint group {self.group!r}")

    @property
    def off_frame(self) -> bool:
        return not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "conf": self.conf, "group": self.group}

    @classmethod
    def from_dict(cls, d: dict) -> "Keypoint":
        return cls(float(d["x"]), float(d["y"]), float(d["conf"]), d.get("group", "other"))


KeypointFrame = Sequence[Keypoint]


@dataclass(frozen=True)
class HeatmapConfig:
    sigma: float = 5.0
    resolution: int = 64
    out_size: int = 7
    lip_weight: float = 0.5
    scale: float = 1.0


@dataclass
class SupervisionHeatmap:
    grid: np.ndarray
    source_resolution: int = 64

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


def render_gaussians(
    keypoints: KeypointFrame,
    sigma: float = 5.0,
    resolution: int = 64,
    lip_weight: float = 0.5,
) -> np.ndarray:
    """Overlay of confidence-weighted Gaussians, sigma in grid pixels.

    Keypoints are accumulated one at a time in input order; zero-weight
    points are skipped, so dropping them leaves the result bit-identical.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if resolution < 2:
        raise DimensionError(f"resolution must be >= 2, got {resolution}")
    grid = np.zeros((resolution, resolution))
    axis = np.arange(resolution, dtype=np.float64)
    denom = 2.0 * sigma * sigma
    for kp in keypoints:
        w = kp.conf * (lip_weight if kp.group == "lips" else 1.0)
        if w == 0.0:
            continue
        row = np.exp(-((axis - kp.y * (resolution - 1)) ** 2) / denom)
        col = np.exp(-((axis - kp.x * (resolution - 1)) ** 2) / denom)
        grid += w * np.outer(row, col)
    return grid


def bin_edges(n: int, bins: int = 7) -> np.ndarray:
    """Floor boundaries i*n//bins, i = 0..bins."""
    return (np.arange(bins + 1) * n) // bins


def downsample(grid: np.ndarray, out_size: int = 7) -> np.ndarray:
    """Average a square grid into ``out_size`` x ``out_size`` adaptive bins."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise DimensionError(f"downsample expects a square grid, got {grid.shape}")
    if grid.shape[0] < out_size:
        raise DimensionError(f"grid side {grid.shape[0]} smaller than {out_size}")
    edges = bin_edges(grid.shape[0], out_size)
    sizes = np.diff(edges)
    sums = np.add.reduceat(np.add.reduceat(grid, edges[:-1], axis=0), edges[:-1], axis=1)
    return sums / np.outer(sizes, sizes)


def normalize(grid: np.ndarray, scale: float = 1.0, source_resolution: int = 64) -> SupervisionHeatmap:
    grid = np.asarray(grid, dtype=np.float64)
    if np.isnan(grid).any():
        raise NumericInputError("heatmap grid contains NaN")
    probs = softmax_array(scale * grid.reshape(-1)).reshape(grid.shape)
    return SupervisionHeatmap(probs, source_resolution)


def heatmap_for_frame(keypoints: KeypointFrame, cfg: HeatmapConfig = HeatmapConfig()) -> SupervisionHeatmap:
    dense = render_gaussians(keypoints, cfg.sigma, cfg.resolution, cfg.lip_weight)
    return normalize(downsample(dense, cfg.out_size), cfg.scale, cfg.resolution)


def build_supervision(
    frames: Sequence[KeypointFrame], cfg: HeatmapConfig = HeatmapConfig()
) -> list[SupervisionHeatmap]:
    """Per-frame targets: overlay, then downsample, then softmax."""
    return [heatmap_for_frame(kps, cfg) for kps in frames]


def write_pgm(path, grid: np.ndarray, upscale: int = 8) -> None:
    """Write a grid as a binary greyscale PGM, min-max scaled to 0..255."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    span = hi - lo
    img = np.zeros_like(grid) if span == 0 else (grid - lo) / span
    img = np.kron(img, np.ones((upscale, upscale)))
    pixels = np.round(img * 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
