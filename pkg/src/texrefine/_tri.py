"""Scanline-free triangle rasterization core.

Shared by the UV-space mask/style rasterization (geometry module) and the
image-space differentiable renderer (raster module). Pixel (i, j) covers the
continuous rectangle [j, j+1) x [i, i+1); coverage is decided at pixel
centers (j + 0.5, i + 0.5). Inputs are 2D vertex positions in that continuous
pixel space, x = column, y = row.
"""

from __future__ import annotations

import numpy as np

# Pixels whose center sits exactly on a shared edge belong to both triangles;
# the depth test / first-wins rule keeps the result deterministic.
_EDGE_EPS = 1e-12


def rasterize(
    xy: np.ndarray,
    tris: np.ndarray,
    height: int,
    width: int,
    z: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize triangles onto a (height, width) grid.

    xy: (N, 2) float vertex positions in continuous pixel coordinates.
    tris: (F, 3) int vertex indices. Degenerate triangles are skipped.
    z: optional (N,) per-vertex depth. When given, the closest triangle wins
       (ties broken by lower triangle index) and barycentric weights are
       perspective-corrected with 1/z. When None, the lowest triangle index
       covering a pixel wins and weights are affine.

    Returns (tri_index, bary): tri_index is (H, W) int32 with -1 where empty,
    bary is (H, W, 3) float64 barycentric weights of the winning triangle.
    """
    xy = np.asarray(xy, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    tri_index = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64) if z is not None else None
    inv_z = None
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        inv_z = 1.0 / z

    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f]
        p0, p1, p2 = xy[i0], xy[i1], xy[i2]
        denom = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if denom == 0.0:
            continue

        xmin = max(int(np.floor(min(p0[0], p1[0], p2[0]) - 0.5)), 0)
        xmax = min(int(np.ceil(max(p0[0], p1[0], p2[0]) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(p0[1], p1[1], p2[1]) - 0.5)), 0)
        ymax = min(int(np.ceil(max(p0[1], p1[1], p2[1]) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue

        xs = np.arange(xmin, xmax + 1, dtype=np.float64) + 0.5
        ys = np.arange(ymin, ymax + 1, dtype=np.float64) + 0.5
        px, py = np.meshgrid(xs, ys)

        w1 = ((px - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (py - p0[1])) / denom
        w2 = ((p1[0] - p0[0]) * (py - p0[1]) - (px - p0[0]) * (p1[1] - p0[1])) / denom
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -_EDGE_EPS) & (w1 >= -_EDGE_EPS) & (w2 >= -_EDGE_EPS)
        if not inside.any():
            continue

        rows = np.nonzero(inside)
        yy = rows[0] + ymin
        xx = rows[1] + xmin
        b = np.stack([w0[inside], w1[inside], w2[inside]], axis=-1)

        if zbuf is None:
            empty = tri_index[yy, xx] < 0
            if not empty.any():
                continue
            yy, xx, b = yy[empty], xx[empty], b[empty]
            tri_index[yy, xx] = f
            bary[yy, xx] = b
        else:
            # Perspective-correct: interpolate 1/z affinely, renormalize.
            izs = b @ inv_z[[i0, i1, i2]]
            depth = 1.0 / izs
            closer = depth < zbuf[yy, xx]
            if not closer.any():
                continue
            yy, xx, b, depth, izs = yy[closer], xx[closer], b[closer], depth[closer], izs[closer]
            bp = b * inv_z[[i0, i1, i2]][None, :] / izs[:, None]
            tri_index[yy, xx] = f
            bary[yy, xx] = bp
            zbuf[yy, xx] = depth

    return tri_index, bary


def interpolate(
    tri_index: np.ndarray,
    bary: np.ndarray,
    tris: np.ndarray,
    attr: np.ndarray,
) -> np.ndarray:
    """Interpolate per-vertex attributes over a rasterization result.

    attr: (N, K) per-vertex values. Returns (H, W, K); zeros where empty.
    """
    attr = np.asarray(attr, dtype=np.float64)
    out = np.zeros(tri_index.shape + (attr.shape[1],), dtype=np.float64)
    covered = tri_index >= 0
    f = tri_index[covered]
    corners = attr[np.asarray(tris, dtype=np.int64)[f]]  # (P, 3, K)
    out[covered] = np.einsum("pc,pck->pk", bary[covered], corners)
    return out
