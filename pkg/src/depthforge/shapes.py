"""Analytic test meshes: icospheres and subdivided boxes."""

from __future__ import annotations

import numpy as np

from .camrig import PHI
from .rasterizer import TriangleMesh


def icosphere(subdivisions: int = 4, radius: float = 0.5) -> TriangleMesh:
    """Icosahedron refined ``subdivisions`` times; 20 * 4**s triangles, vertices on the sphere."""
    verts = [(-1, PHI, 0), (1, PHI, 0), (-1, -PHI, 0), (1, -PHI, 0),
             (0, -1, PHI), (0, 1, PHI), (0, -1, -PHI), (0, 1, -PHI),
             (PHI, 0, -1), (PHI, 0, 1), (-PHI, 0, -1), (-PHI, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriangleMesh(np.array(v) * radius, np.array(faces))


def box(size=(0.6, 0.6, 0.6), divisions: int = 19) -> TriangleMesh:
    """Axis-aligned box centred at the origin, each face an n x n grid of quads (12 n^2 triangles)."""
    half = np.asarray(size, dtype=np.float64) / 2.0
    n = divisions
    verts: list[np.ndarray] = []
    tris: list[tuple[int, int, int]] = []
    g = np.linspace(-1.0, 1.0, n + 1)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            base = len(verts)
            for i in range(n + 1):
                for j in range(n + 1):
                    p = np.zeros(3)
                    p[axis] = sign
                    p[u_ax], p[v_ax] = g[i], g[j]
                    verts.append(p * half)
            for i in range(n):
                for j in range(n):
                    a = base + i * (n + 1) + j
                    b, c, d = a + 1, a + n + 1, a + n + 2
                    if sign > 0:
                        tris += [(a, c, d), (a, d, b)]
                    else:
                        tris += [(a, d, c), (a, b, d)]
    # weld duplicated edge vertices so the surface is closed
    vv = np.round(np.array(verts), 12)
    uniq, inverse = np.unique(vv, axis=0, return_inverse=True)
    return TriangleMesh(uniq, inverse.reshape(-1)[np.array(tris)])
