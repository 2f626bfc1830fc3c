"""Differentiable texture-space renderer.

Rasterization (pixel -> triangle assignment, perspective-correct UV) depends
only on mesh and pose, so it is precomputed on the CPU with numpy and reused
across texture updates. The texture lookup itself runs in torch: rendered
pixels are bilinear functions of texel values, so gradients with respect to
the texture are exact (geometry and pose gradients are out of scope).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import _tri
from .errors import ConfigError
from .geometry import CameraPose, FaceMesh, TextureMap, compute_vertex_normals


@dataclass
class RenderedImage:
    """Rendered pixels plus the mesh coverage mask (texture-independent)."""

    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    coverage_mask: np.ndarray  # (H, W) bool


class RasterMap:
    """Frozen rasterization of one mesh/pose pair.

    sample() maps any square texture tensor to the rendered image tensor and
    is differentiable with respect to the texture.
    """

    def __init__(self, mesh: FaceMesh, pose: CameraPose):
        self.image_size = pose.image_size
        w, h = pose.image_size
        xy, z = pose.project(mesh.vertices)
        in_front = z > 1e-9
        tris = mesh.triangles

        # Front-facing test via geometric face normals: a triangle faces the
        # camera when its outward normal points back toward the camera center.
        v = mesh.vertices
        face_n = np.cross(v[tris[:, 1]] - v[tris[:, 0]], v[tris[:, 2]] - v[tris[:, 0]])
        centroid = v[tris].mean(axis=1)
        to_cam = pose.center[None, :] - centroid
        front = np.einsum("ij,ij->i", face_n, to_cam) > 0.0
        usable = front & in_front[tris].all(axis=1)

        masked = tris.copy()
        masked[~usable] = 0
        tri_index, bary = _tri.rasterize(xy, masked, h, w, z=z)
        covered = tri_index >= 0
        covered &= usable[np.where(covered, tri_index, 0)]

        uv = _tri.interpolate(tri_index, bary, tris, mesh.uv_coords)
        self.coverage_mask = covered
        self.pixel_rows, self.pixel_cols = np.nonzero(covered)
        self._uv = torch.from_numpy(uv[covered])  # (P, 2) float64
        self._rows = torch.from_numpy(self.pixel_rows.astype(np.int64))
        self._cols = torch.from_numpy(self.pixel_cols.astype(np.int64))

        zmap = _tri.interpolate(tri_index, bary, tris, z[:, None])[..., 0]
        self.depth = np.where(covered, zmap, np.inf)

    def sample(self, texture: torch.Tensor) -> torch.Tensor:
        """Render a (R, R, 3) texture tensor to an (H, W, 3) image tensor.

        Differentiable with respect to `texture`; uncovered pixels are zero.
        """
        if texture.ndim != 3 or texture.shape[0] != texture.shape[1] or texture.shape[2] != 3:
            raise ConfigError(f"texture must be square (R, R, 3), got {tuple(texture.shape)}")
        res = texture.shape[0]
        if res < 2:
            raise ConfigError("texture resolution below supported minimum (2)")
        uv = self._uv.to(texture.dtype)
        s = uv * res - 0.5
        s = s.clamp(0.0, res - 1.0)
        x0 = s[:, 0].floor().long().clamp(0, res - 2)
        y0 = s[:, 1].floor().long().clamp(0, res - 2)
        fx = (s[:, 0] - x0).unsqueeze(1)
        fy = (s[:, 1] - y0).unsqueeze(1)
        top = texture[y0, x0] * (1 - fx) + texture[y0, x0 + 1] * fx
        bot = texture[y0 + 1, x0] * (1 - fx) + texture[y0 + 1, x0 + 1] * fx
        colors = top * (1 - fy) + bot * fy

        w, h = self.image_size
        out = texture.new_zeros((h, w, 3))
        out.index_put_((self._rows, self._cols), colors)
        return out


def build_rastermap(mesh: FaceMesh, pose: CameraPose) -> RasterMap:
    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh)
    return RasterMap(mesh, pose)


def render(
    mesh: FaceMesh,
    texture: TextureMap,
    pose: CameraPose,
    rastermap: RasterMap | None = None,
) -> RenderedImage:
    """Render the texture under the pose; see RasterMap for the hot path."""
    rm = rastermap if rastermap is not None else build_rastermap(mesh, pose)
    tex = torch.from_numpy(np.ascontiguousarray(texture.pixels, dtype=np.float64))
    with torch.no_grad():
        img = rm.sample(tex).numpy()
    return RenderedImage(pixels=np.clip(img, 0.0, 1.0), coverage_mask=rm.coverage_mask.copy())


def face_mask(mesh: FaceMesh, pose: CameraPose, rastermap: RasterMap | None = None) -> np.ndarray:
    """Binary image mask of the rendered face area (the coverage mask)."""
    rm = rastermap if rastermap is not None else build_rastermap(mesh, pose)
    return rm.coverage_mask.copy()


def erode_mask(mask: np.ndarray, pixels: int = 1) -> np.ndarray:
    """Erode a binary image mask; used to drop the aliased coverage boundary
    from the rendering loss."""
    if pixels <= 0:
        return np.asarray(mask).astype(bool)
    from scipy import ndimage

    return ndimage.binary_erosion(np.asarray(mask).astype(bool), iterations=pixels)
