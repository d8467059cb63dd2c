"""Discrete depth maps: quantization, one-hot encoding, back-projection, fusion.

Foreground depth d in [near, far] maps to code ``1 + round((d - near) /
(far - near) * (2**bits - 2))``; code 0 is background. Codes are bin centres,
so dequantization is exact on codes and the depth round-trip error is at most
half a bin, ``(far - near) / (2 * (2**bits - 2))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .camrig import ViewSpec, canonical_projection

log = logging.getLogger(__name__)

NEAR = 2.0
FAR = 3.0
MIN_BITS, MAX_BITS = 5, 8


@dataclass
class DepthImage:
    """Continuous depth along the view axis; +inf marks background."""

    depth: np.ndarray
    view_id: int = 0
    projection: str = "orthographic"


@dataclass
class DepthMap:
    codes: np.ndarray
    bits: int = 8
    near: float = NEAR
    far: float = FAR
    view_id: int = 0
    projection: str = "orthographic"

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 2 or self.codes.shape[0] != self.codes.shape[1]:
            raise ValueError(f"depth map codes must be a square 2-D grid, got {self.codes.shape}")
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= 2**self.bits):
            raise ValueError(f"codes must lie in [0, {2**self.bits - 1}]")
        self.codes = self.codes.astype(np.uint8)
        self.projection = canonical_projection(self.projection)

    @property
    def resolution(self) -> int:
        return self.codes.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return self.codes > 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (
            self.bits == other.bits
            and self.near == other.near
            and self.far == other.far
            and self.view_id == other.view_id
            and self.projection == other.projection
            and np.array_equal(self.codes, other.codes)
        )


@dataclass
class PointCloud:
    points: np.ndarray
    view_ids: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


def half_bin(bits: int, near: float = NEAR, far: float = FAR) -> float:
    return (far - near) / (2.0 * (2**bits - 2))


def quantize_with_stats(img: DepthImage, bits: int, near: float = NEAR, far: float = FAR) -> tuple[DepthMap, int]:
    """Quantize and also return how many foreground pixels were clamped into range."""
    if not near < far:
        raise ValueError(f"near ({near}) must be < far ({far})")
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    d = np.asarray(img.depth, dtype=np.float64)
    fg = np.isfinite(d)
    clamped = int(np.count_nonzero(fg & ((d < near) | (d > far))))
    dc = np.clip(np.where(fg, d, near), near, far)
    steps = 2**bits - 2
    codes = 1 + np.floor((dc - near) / (far - near) * steps + 0.5)
    codes = np.where(fg, codes, 0).astype(np.uint8)
    return DepthMap(codes, bits, near, far, img.view_id, img.projection), clamped


def quantize(img: DepthImage, bits: int, near: float = NEAR, far: float = FAR) -> DepthMap:
    dm, clamped = quantize_with_stats(img, bits, near, far)
    if clamped:
        log.warning("view %d: clamped %d foreground depths into [%g, %g]", img.view_id, clamped, near, far)
    return dm


def dequantize(dm: DepthMap) -> DepthImage:
    c = dm.codes.astype(np.float64)
    d = dm.near + (c - 1.0) / (2**dm.bits - 2) * (dm.far - dm.near)
    return DepthImage(np.where(dm.codes > 0, d, np.inf), dm.view_id, dm.projection)


def one_hot(dm: DepthMap) -> np.ndarray:
    """(2**bits, H, W) float array with a single 1 per pixel at its code."""
    bins = 2**dm.bits
    out = np.zeros((bins,) + dm.codes.shape)
    np.put_along_axis(out, dm.codes[None].astype(np.int64), 1.0, axis=0)
    return out


def backproject_image(img: DepthImage, view: ViewSpec) -> PointCloud:
    if canonical_projection(img.projection) != view.projection:
        raise ValueError(f"projection mismatch: map is {img.projection}, view is {view.projection}")
    if img.view_id != view.view_id:
        raise ValueError(f"view mismatch: map is view {img.view_id}, camera is view {view.view_id}")
    fg = np.isfinite(img.depth)
    py, px = np.nonzero(fg)
    o, d = view.rays_at(px, py)
    t = img.depth[py, px] / (d @ view.forward)
    pts = o + t[:, None] * d
    return PointCloud(pts, np.full(len(pts), view.view_id, dtype=np.int64))


def backproject(dm: DepthMap, view: ViewSpec) -> PointCloud:
    return backproject_image(dequantize(dm), view)


def fuse(maps: list[tuple[DepthMap, ViewSpec]], dedup: bool = False) -> PointCloud:
    """Concatenate per-view back-projections, optionally merging points per half-bin voxel."""
    if not maps:
        raise ValueError("fuse needs at least one depth map")
    first = maps[0][0]
    for dm, _ in maps:
        if dm.bits != first.bits or dm.projection != first.projection:
            raise ValueError("fuse: all maps must share bit depth and projection")
    clouds = [backproject(dm, view) for dm, view in maps]
    pts = np.concatenate([c.points for c in clouds])
    vids = np.concatenate([c.view_ids for c in clouds])
    if dedup and len(pts):
        cell = half_bin(first.bits, first.near, first.far)
        keys = np.floor(pts / cell).astype(np.int64)
        _, keep = np.unique(keys, axis=0, return_index=True)
        keep.sort()
        pts, vids = pts[keep], vids[keep]
    return PointCloud(pts, vids)
