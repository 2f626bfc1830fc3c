"""Mesh/image/UV correspondences and style-texture extraction.

Coordinate conventions, used consistently across the package:

* Image/texture pixel (i, j) covers continuous coordinates [j, j+1) x [i, i+1)
  with center (j + 0.5, i + 0.5); 2D points are (x, y) = (column, row).
* A UV coordinate u in [0, 1] maps to continuous pixel coordinate u * W, so
  bilinear sampling uses sample coordinate u * W - 0.5 (texel centers land on
  integers there). Clamp-to-edge addressing at borders.
* Camera space: x right, y down, z forward; a vertex is in front of the
  camera when its camera-space z is positive.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import _tri
from .errors import ConfigError, MeshFormatError

_DEGENERATE_AREA = 1e-14
_BEHIND_EPS = 1e-9


@dataclass
class FaceMesh:
    """Triangulated face surface with one UV coordinate per vertex."""

    vertices: np.ndarray  # (N, 3) float64
    triangles: np.ndarray  # (F, 3) int64
    uv_coords: np.ndarray  # (N, 2) float64 in [0, 1]^2
    vertex_normals: np.ndarray | None = None  # (N, 3) unit vectors

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.uv_coords = np.asarray(self.uv_coords, dtype=np.float64)
        n = self.vertices.shape[0]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshFormatError("triangle index out of range")
        if self.uv_coords.shape != (n, 2):
            raise MeshFormatError("uv_coords must be (N, 2), one per vertex")
        if self.uv_coords.size and (self.uv_coords.min() < -1e-9 or self.uv_coords.max() > 1 + 1e-9):
            raise MeshFormatError("uv coordinates must lie in [0, 1]^2")


@dataclass
class CameraPose:
    """Rigid transform plus pinhole projection, camera z forward / y down."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1; maps object -> camera
    translation: np.ndarray  # (3,)
    focal: float  # pixels
    principal_point: np.ndarray  # (2,) pixels, (cx, cy)
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self) -> None:
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.focal = float(self.focal)
        w, h = self.image_size
        if not (isinstance(w, (int, np.integer)) and isinstance(h, (int, np.integer))) or w <= 0 or h <= 0:
            raise ConfigError("image_size must be positive integers")
        self.image_size = (int(w), int(h))
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise ConfigError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ConfigError("rotation determinant must be +1")

    @property
    def view_direction(self) -> np.ndarray:
        """Camera forward axis expressed in object space (unit vector)."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    @property
    def center(self) -> np.ndarray:
        """Camera center in object space."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Perspective-project object-space points to pixel coordinates.

        Returns (xy, z_cam); xy is undefined (set to 0) where z_cam <= 0.
        """
        cam = self.to_camera(points)
        z = cam[:, 2]
        safe = np.where(np.abs(z) < _BEHIND_EPS, np.inf, z)
        xy = self.focal * cam[:, :2] / safe[:, None] + self.principal_point
        xy[~np.isfinite(xy).all(axis=1)] = 0.0
        return xy, z


@dataclass
class TextureMap:
    """Square RGB UV image with a binary validity mask.

    Invalid pixels are forced to black; pixels are clamped to [0, 1].
    """

    pixels: np.ndarray  # (H, W, 3) float in [0, 1]
    validity: np.ndarray  # (H, W) bool
    # Allow construction from raw arrays without copying twice.
    _enforce: bool = field(default=True, repr=False)

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.validity = np.asarray(self.validity).astype(bool)
        h, w = self.validity.shape
        if self.pixels.shape != (h, w, 3):
            raise ConfigError("pixels must be (H, W, 3) matching validity")
        if h != w:
            raise ConfigError("texture must be square")
        if self._enforce:
            self.pixels = np.clip(np.nan_to_num(self.pixels), 0.0, 1.0)
            self.pixels = self.pixels * self.validity[:, :, None]

    @property
    def resolution(self) -> int:
        return self.validity.shape[0]


def load_obj(path: str | Path) -> FaceMesh:
    """Load a Wavefront OBJ in the supported subset: v/vt/f with one vt per
    vertex and faces whose v and vt indices coincide. Degenerate (zero-area)
    triangles are dropped at load time. Polygons are fan-triangulated.
    """
    path = Path(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif tag == "vt":
                uvs.append([float(v) for v in parts[1:3]])
            elif tag == "f":
                idx = []
                for token in parts[1:]:
                    fields = token.split("/")
                    vi = int(fields[0])
                    if len(fields) > 1 and fields[1]:
                        ti = int(fields[1])
                        if ti != vi:
                            raise MeshFormatError(
                                f"{path}:{lineno}: face references v {vi} with vt {ti}; "
                                "v/vt indices must coincide"
                            )
                    idx.append(vi - 1)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise MeshFormatError(f"{path}: no vertices")
    if len(uvs) != len(verts):
        raise MeshFormatError(
            f"{path}: {len(uvs)} vt records for {len(verts)} vertices; need exactly one per vertex"
        )
    vertices = np.array(verts, dtype=np.float64)
    triangles = np.array(faces, dtype=np.int64).reshape(-1, 3)
    keep = _face_areas(vertices, triangles) > _DEGENERATE_AREA
    return FaceMesh(vertices, triangles[keep], np.array(uvs, dtype=np.float64))


def save_obj(path: str | Path, mesh: FaceMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.uv_coords:
            fh.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for f in mesh.triangles:
            fh.write(f"f {f[0]+1}/{f[0]+1} {f[1]+1}/{f[1]+1} {f[2]+1}/{f[2]+1}\n")


def load_pose(path: str | Path) -> CameraPose:
    """Load a camera pose from the JSON pose file format."""
    path = Path(path)
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid pose file: {exc}") from exc
    try:
        return CameraPose(
            rotation=np.array(data["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(data["translation"], dtype=np.float64),
            focal=float(data["focal"]),
            principal_point=np.array(data["principal_point"], dtype=np.float64),
            image_size=(int(data["image_size"][0]), int(data["image_size"][1])),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: pose file missing key {exc}") from exc


def save_pose(path: str | Path, pose: CameraPose) -> None:
    data = {
        "rotation": [float(v) for v in pose.rotation.ravel()],
        "translation": [float(v) for v in pose.translation],
        "focal": pose.focal,
        "principal_point": [float(v) for v in pose.principal_point],
        "image_size": list(pose.image_size),
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def _face_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    b = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(a, b), axis=1)


def compute_vertex_normals(mesh: FaceMesh) -> FaceMesh:
    """Area-weighted per-vertex normals; returns a new mesh with normals set.

    Isolated vertices get the camera-facing default (0, 0, -1) and trigger a
    warning; a mesh whose triangles are all degenerate is an error.
    """
    v, t = mesh.vertices, mesh.triangles
    face_n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])  # |n| = 2*area
    if t.shape[0] == 0 or np.linalg.norm(face_n, axis=1).max() <= 2 * _DEGENERATE_AREA:
        raise MeshFormatError("mesh has no non-degenerate triangles")
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, t[:, k], face_n)
    norms = np.linalg.norm(acc, axis=1)
    isolated = norms < 1e-30
    if isolated.any():
        warnings.warn(f"{int(isolated.sum())} isolated vertices; using default normal")
        acc[isolated] = (0.0, 0.0, -1.0)
        norms[isolated] = 1.0
    normals = acc / norms[:, None]
    return FaceMesh(v, t, mesh.uv_coords, vertex_normals=normals)


def compute_visibility(mesh: FaceMesh, pose: CameraPose, threshold: float = 0.6) -> np.ndarray:
    """Per-vertex visibility bits under the normal-alignment test.

    The score is dot(unit direction from vertex to camera center, normal), so
    a vertex whose normal points straight at the camera scores 1.0. Scores
    >= threshold are visible (a score of exactly 0.6 is visible).
    """
    if mesh.vertex_normals is None:
        raise ConfigError("compute_vertex_normals must run first")
    if not (-1.0 < threshold < 1.0):
        raise ConfigError("threshold must lie in (-1, 1)")
    to_cam = pose.center[None, :] - mesh.vertices
    to_cam = to_cam / np.maximum(np.linalg.norm(to_cam, axis=1, keepdims=True), 1e-30)
    score = np.einsum("ij,ij->i", to_cam, mesh.vertex_normals)
    return score >= threshold


def uv_to_pixels(uv: np.ndarray, resolution: int) -> np.ndarray:
    """UV in [0,1]^2 to continuous pixel coordinates in a resolution^2 grid."""
    return np.asarray(uv, dtype=np.float64) * resolution


def rasterize_uv(mesh: FaceMesh, uv_resolution: int, tri_mask: np.ndarray | None = None):
    """Rasterize (a subset of) the mesh triangles in UV space.

    Returns (tri_index, bary) on the uv_resolution^2 grid. tri_index refers
    to indices in mesh.triangles; triangles where tri_mask is False are
    skipped but indices are preserved.
    """
    xy = uv_to_pixels(mesh.uv_coords, uv_resolution)
    tris = mesh.triangles
    if tri_mask is not None:
        # Keep original indices by degenerate-masking skipped triangles.
        tris = tris.copy()
        tris[~tri_mask] = 0
    return _tri.rasterize(xy, tris, uv_resolution, uv_resolution)


def uv_coverage_mask(mesh: FaceMesh, uv_resolution: int) -> np.ndarray:
    """Binary mask of UV pixels covered by any mesh triangle."""
    tri_index, _ = rasterize_uv(mesh, uv_resolution)
    return tri_index >= 0


def rasterize_visibility_mask(
    mesh: FaceMesh, visibility: np.ndarray, uv_resolution: int
) -> np.ndarray:
    """Initial UV visibility mask: pixels covered by a triangle whose three
    vertices are all visible."""
    if uv_resolution <= 0:
        raise ConfigError("uv_resolution must be positive")
    tri_visible = visibility[mesh.triangles].all(axis=1)
    if not tri_visible.any():
        return np.zeros((uv_resolution, uv_resolution), dtype=bool)
    tri_index, _ = rasterize_uv(mesh, uv_resolution, tri_mask=tri_visible)
    covered = tri_index >= 0
    covered &= tri_visible[np.where(covered, tri_index, 0)]
    return covered


def _disk(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    r = int(radius)
    y, x = np.ogrid[-r : r + 1, -r : r + 1]
    return x * x + y * y <= r * r


def clean_mask(mask: np.ndarray, open_radius: int, close_radius: int) -> np.ndarray:
    """Morphological opening then closing with disk structuring elements."""
    if open_radius < 0 or close_radius < 0:
        raise ConfigError("morphology radii must be >= 0")
    out = np.asarray(mask).astype(bool)
    if open_radius > 0:
        out = ndimage.binary_opening(out, structure=_disk(open_radius))
    if close_radius > 0:
        out = ndimage.binary_closing(out, structure=_disk(close_radius))
    return out


def default_morph_radii(uv_resolution: int) -> tuple[int, int]:
    """Default (open, close) disk radii: 3 and 6 at 512, scaled with size."""
    scale = uv_resolution / 512.0
    return max(1, round(3 * scale)), max(1, round(6 * scale))


@dataclass
class VertexMappings:
    """Projections of every vertex into image (f1) and UV (f2) pixel space."""

    f1: np.ndarray  # (N, 2) image pixel coordinates
    f2: np.ndarray  # (N, 2) UV pixel coordinates
    in_front: np.ndarray  # (N,) bool; False where the vertex is behind the camera


def build_mappings(mesh: FaceMesh, pose: CameraPose, uv_resolution: int = 512) -> VertexMappings:
    """Compute f1 (vertex -> image point) and f2 (vertex -> UV point).

    Vertices behind the camera plane are flagged in_front=False and must be
    excluded from sampling by callers.
    """
    f1, z = pose.project(mesh.vertices)
    in_front = z > _BEHIND_EPS
    f2 = uv_to_pixels(mesh.uv_coords, uv_resolution)
    return VertexMappings(f1=f1, f2=f2, in_front=in_front)


def bilinear_sample(image: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinearly sample an (H, W, C) image at (x, y) continuous pixel
    coordinates, clamp-to-edge. Returns (P, C)."""
    h, w = image.shape[:2]
    img = image.reshape(h, w, -1)
    s = np.asarray(points, dtype=np.float64) - 0.5
    x = np.clip(s[:, 0], 0.0, w - 1.0)
    y = np.clip(s[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def sample_style_image(
    input_image: np.ndarray,
    mesh: FaceMesh,
    pose: CameraPose,
    uv_resolution: int,
    morph_radii: tuple[int, int] | None = None,
    visibility_threshold: float = 0.6,
) -> TextureMap:
    """Build the style texture: per-UV-pixel pull-back of the photograph over
    the cleaned visibility mask. Invalid pixels are black.
    """
    h, w = input_image.shape[:2]
    if (w, h) != pose.image_size:
        raise ConfigError(
            f"input image is {w}x{h} but pose expects {pose.image_size[0]}x{pose.image_size[1]}"
        )
    if morph_radii is None:
        morph_radii = default_morph_radii(uv_resolution)

    if mesh.vertex_normals is None:
        mesh = compute_vertex_normals(mesh)
    visibility = compute_visibility(mesh, pose, visibility_threshold)
    raw_mask = rasterize_visibility_mask(mesh, visibility, uv_resolution)
    validity = clean_mask(raw_mask, *morph_radii)
    if not validity.any():
        raise ConfigError("no visible face region: cleaned visibility mask is empty")

    mappings = build_mappings(mesh, pose, uv_resolution)
    tri_front = mappings.in_front[mesh.triangles].all(axis=1)
    tri_index, bary = rasterize_uv(mesh, uv_resolution, tri_mask=tri_front)
    covered = tri_index >= 0

    image_xy = _tri.interpolate(tri_index, bary, mesh.triangles, mappings.f1)
    pixels = np.zeros((uv_resolution, uv_resolution, 3), dtype=np.float64)
    pixels[covered] = bilinear_sample(np.asarray(input_image, dtype=np.float64), image_xy[covered])

    # Closing can extend validity a little past the rasterized coverage; fill
    # those pixels from their nearest covered neighbor instead of leaving
    # black inside the valid region.
    orphans = validity & ~covered
    if orphans.any():
        _, (iy, ix) = ndimage.distance_transform_edt(~covered, return_indices=True)
        pixels[orphans] = pixels[iy[orphans], ix[orphans]]

    return TextureMap(pixels=pixels, validity=validity)
