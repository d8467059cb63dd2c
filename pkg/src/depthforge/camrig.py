"""The fixed 20-camera dodecahedral rig and its pixel rays.

Views are the vertices of a regular dodecahedron,

    (±1, ±1, ±1), (0, ±1/φ, ±φ), (±1/φ, ±φ, 0), (±φ, 0, ±1/φ),

sorted lexicographically on these unnormalized coordinates (x, then y, then
z) to give view ids 0..19, then scaled to radius 2.5 m. Every camera looks at
the origin with up hint +Y (+X if the view is within ~2.6° of the Y axis).
Image rows run top to bottom; ``right``/``up`` span the image plane.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

PHI = (1.0 + math.sqrt(5.0)) / 2.0
CAMERA_RADIUS = 2.5
FOV_Y_DEG = 40.0
ORTHO_HALF_EXTENT = 0.55
N_VIEWS = 20

PROJECTIONS = ("perspective", "orthographic")
_ALIASES = {"persp": "perspective", "perspective": "perspective", "ortho": "orthographic", "orthographic": "orthographic"}


def canonical_projection(kind: str) -> str:
    try:
        return _ALIASES[kind]
    except KeyError:
        raise ValueError(f"unknown projection {kind!r}; expected one of {sorted(_ALIASES)}") from None


def dodecahedron_vertices() -> np.ndarray:
    """The 20 unnormalized canonical vertices in rig order."""
    inv = 1.0 / PHI
    verts = [v for v in itertools.product((-1.0, 1.0), repeat=3)]
    for a, b in itertools.product((-1.0, 1.0), repeat=2):
        verts.append((0.0, a * inv, b * PHI))
        verts.append((a * inv, b * PHI, 0.0))
        verts.append((a * PHI, 0.0, b * inv))
    verts.sort()
    return np.array(verts)


@dataclass(frozen=True)
class ViewSpec:
    view_id: int
    position: np.ndarray
    forward: np.ndarray
    up: np.ndarray
    right: np.ndarray
    projection: str
    resolution: int
    fov_y: float = FOV_Y_DEG
    half_extent: float = ORTHO_HALF_EXTENT

    @property
    def tan_half_fov(self) -> float:
        return math.tan(math.radians(self.fov_y) / 2.0)

    def _ndc(self, px, py):
        n = self.resolution
        x = 2.0 * (np.asarray(px, dtype=np.float64) + 0.5) / n - 1.0
        y = 1.0 - 2.0 * (np.asarray(py, dtype=np.float64) + 0.5) / n
        return x, y

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions for every pixel, each (res, res, 3), indexed [py, px]."""
        n = self.resolution
        py, px = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        return self.rays_at(px, py)

    def rays_at(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        x, y = self._ndc(px, py)
        x, y = x[..., None], y[..., None]
        if self.projection == "perspective":
            t = self.tan_half_fov
            d = self.forward + x * t * self.right + y * t * self.up
            d = d / np.linalg.norm(d, axis=-1, keepdims=True)
            o = np.broadcast_to(self.position, d.shape).copy()
        else:
            o = self.position + x * self.half_extent * self.right + y * self.half_extent * self.up
            d = np.broadcast_to(self.forward, o.shape).copy()
        return o, d

    def pixel_footprint(self, depth: float) -> float:
        """Side length of one pixel on a plane ``depth`` metres along the view axis."""
        if self.projection == "perspective":
            return 2.0 * depth * self.tan_half_fov / self.resolution
        return 2.0 * self.half_extent / self.resolution


def pixel_ray(view: ViewSpec, px: int, py: int) -> tuple[np.ndarray, np.ndarray]:
    n = view.resolution
    if not (0 <= px < n and 0 <= py < n):
        raise IndexError(f"pixel ({px}, {py}) outside a {n}x{n} image")
    o, d = view.rays_at(np.array(px), np.array(py))
    return o, d


@dataclass(frozen=True)
class CameraRig:
    views: tuple[ViewSpec, ...]

    def __len__(self) -> int:
        return len(self.views)

    def __getitem__(self, i: int) -> ViewSpec:
        return self.views[i]

    def __iter__(self):
        return iter(self.views)

    @property
    def positions(self) -> np.ndarray:
        return np.stack([v.position for v in self.views])

    def describe(self) -> str:
        lines = ["view_id\tpx\tpy\tpz\tfx\tfy\tfz\tux\tuy\tuz\trx\try\trz"]
        for v in self.views:
            vals = np.concatenate([v.position, v.forward, v.up, v.right])
            lines.append(f"{v.view_id}\t" + "\t".join(f"{c:.9f}" for c in vals))
        return "\n".join(lines)


def _basis(forward: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hint = np.array([0.0, 1.0, 0.0])
    if abs(float(forward @ hint)) > 0.999:
        hint = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    up /= np.linalg.norm(up)
    return up, right


def build_rig(
    resolution: int = 64,
    projection: str = "orthographic",
    fov_y: float = FOV_Y_DEG,
    half_extent: float = ORTHO_HALF_EXTENT,
    radius: float = CAMERA_RADIUS,
) -> CameraRig:
    if resolution < 8 or resolution & (resolution - 1):
        raise ValueError(f"resolution must be a power of two >= 8, got {resolution}")
    projection = canonical_projection(projection)
    views = []
    for i, v in enumerate(dodecahedron_vertices()):
        pos = v / np.linalg.norm(v) * radius
        fwd = -pos / np.linalg.norm(pos)
        up, right = _basis(fwd)
        views.append(ViewSpec(i, pos, fwd, up, right, projection, resolution, fov_y, half_extent))
    return CameraRig(tuple(views))
