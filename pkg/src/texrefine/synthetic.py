"""Deterministic synthetic scenes for tests, demos, and the bundled sample.

All scenes share the package camera convention: the camera sits on the +z
axis looking back at the origin, so surfaces facing +z face the camera.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import CameraPose, FaceMesh, TextureMap, compute_vertex_normals


def make_camera(distance: float, focal: float, image_size: tuple[int, int]) -> CameraPose:
    """Camera at (0, 0, distance) looking down -z toward the origin, image x
    right / y down."""
    rotation = np.diag([1.0, -1.0, -1.0])
    translation = np.array([0.0, 0.0, distance])
    w, h = image_size
    return CameraPose(
        rotation=rotation,
        translation=translation,
        focal=focal,
        principal_point=np.array([w / 2.0, h / 2.0]),
        image_size=(int(w), int(h)),
    )


def _pixel_to_plane(px: float, py: float, pose: CameraPose, plane_z: float = 0.0) -> np.ndarray:
    """Invert the projection for a point on the object-space plane z=plane_z."""
    cx, cy = pose.principal_point
    depth = pose.center[2] - plane_z
    x = (px - cx) * depth / pose.focal
    y = -(py - cy) * depth / pose.focal
    return np.array([x, y, plane_z])


def make_quad_scene(
    pose: CameraPose,
    pixel_bounds: tuple[float, float, float, float],
) -> FaceMesh:
    """Screen-aligned two-triangle quad whose UVs equal normalized projected
    image coordinates (the identity configuration).

    pixel_bounds is (x0, y0, x1, y1) in image pixels.
    """
    x0, y0, x1, y1 = pixel_bounds
    corners_px = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    vertices = np.stack([_pixel_to_plane(px, py, pose) for px, py in corners_px])
    uv = np.array(
        [
            [(px - x0) / (x1 - x0), (py - y0) / (y1 - y0)]
            for px, py in corners_px
        ]
    )
    triangles = np.array([[0, 3, 2], [0, 2, 1]])
    return compute_vertex_normals(FaceMesh(vertices, triangles, uv))


def make_dome(
    grid: int = 40,
    radius: float = 1.0,
    lon_span_deg: float = 170.0,
    lat_span_deg: float = 140.0,
) -> FaceMesh:
    """Spherical patch facing +z with a clean (u, v) chart; the edges curve
    away far enough to be culled by the visibility threshold."""
    n = int(grid)
    us = np.linspace(0.0, 1.0, n + 1)
    vs = np.linspace(0.0, 1.0, n + 1)
    uu, vv = np.meshgrid(us, vs)  # rows follow v
    lon = np.deg2rad((uu - 0.5) * lon_span_deg)
    lat = np.deg2rad((0.5 - vv) * lat_span_deg)
    x = np.sin(lon) * np.cos(lat)
    y = np.sin(lat)
    z = np.cos(lon) * np.cos(lat)
    vertices = radius * np.stack([x, y, z], axis=-1).reshape(-1, 3)
    uv = np.stack([uu, vv], axis=-1).reshape(-1, 2)

    tris = []
    for i in range(n):
        for j in range(n):
            a = i * (n + 1) + j
            b = a + 1
            d = a + (n + 1)
            c = d + 1
            tris.append([a, d, c])
            tris.append([a, c, b])
    return compute_vertex_normals(FaceMesh(vertices, np.array(tris), uv))


def make_icosphere(subdivisions: int = 3, radius: float = 1.0) -> FaceMesh:
    """Subdivided icosahedron with spherical UVs (seam triangles are fine for
    visibility/coverage tests, which never unwrap them)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.array(verts[i]) + np.array(verts[j])
                m /= np.linalg.norm(m)
                verts.append(tuple(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    vertices = np.array(verts) * radius
    unit = np.array(verts)
    uv = np.stack(
        [
            0.5 + np.arctan2(unit[:, 1], unit[:, 0]) / (2 * np.pi),
            0.5 + np.arcsin(np.clip(unit[:, 2], -1, 1)) / np.pi,
        ],
        axis=-1,
    )
    uv = np.clip(uv, 0.0, 1.0)
    return compute_vertex_normals(FaceMesh(vertices, np.array(faces), uv))


def make_gt_texture(resolution: int, seed: int = 7) -> TextureMap:
    """Smooth blobs plus fine speckle: enough low- and high-frequency content
    to make blurring and recovery measurable."""
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:resolution, 0:resolution] / resolution
    base = np.zeros((resolution, resolution, 3))
    for _ in range(6):
        cx, cy = rng.random(2)
        sigma = 0.08 + 0.2 * rng.random()
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
        color = 0.2 + 0.6 * rng.random(3)
        base += blob[..., None] * color[None, None, :]
    base += 0.25 * np.stack([xx, yy, 1 - xx], axis=-1)
    base /= max(base.max(), 1e-9)
    speckle = ndimage.gaussian_filter(rng.standard_normal((resolution, resolution, 3)), (1.0, 1.0, 0))
    pixels = np.clip(0.15 + 0.7 * base + 0.12 * speckle, 0.02, 0.98)
    return TextureMap(pixels=pixels, validity=np.ones((resolution, resolution), dtype=bool))


def degrade_texture(gt: TextureMap, blur_sigma: float = 2.0, shift: float = 0.1) -> TextureMap:
    """The imperfect 'generator output': blurred and color-shifted ground
    truth."""
    blurred = ndimage.gaussian_filter(gt.pixels, (blur_sigma, blur_sigma, 0))
    pixels = np.clip(blurred + shift, 0.0, 1.0)
    return TextureMap(pixels=pixels, validity=gt.validity.copy())


@dataclass
class SyntheticScene:
    mesh: FaceMesh
    pose: CameraPose
    gt: TextureMap
    content: TextureMap
    input_image: np.ndarray  # (H, W, 3) render of the GT texture


def make_synthetic_scene(
    tex_resolution: int = 128,
    image_size: tuple[int, int] = (128, 128),
    seed: int = 7,
    blur_sigma: float = 2.0,
    shift: float = 0.1,
) -> SyntheticScene:
    """Dome scene with known ground truth: input image = render(GT), content
    = blurred + color-shifted GT. Part of the dome faces away, so the style
    texture has a genuine invisible region."""
    from .raster import build_rastermap

    mesh = make_dome(grid=40)
    w, h = image_size
    pose = make_camera(distance=8.0, focal=3.3 * max(w, h), image_size=image_size)
    gt = make_gt_texture(tex_resolution, seed=seed)
    content = degrade_texture(gt, blur_sigma=blur_sigma, shift=shift)
    rm = build_rastermap(mesh, pose)
    import torch

    with torch.no_grad():
        img = rm.sample(torch.from_numpy(gt.pixels)).numpy()
    return SyntheticScene(mesh=mesh, pose=pose, gt=gt, content=content, input_image=img)


def write_scene_files(scene: SyntheticScene, directory: str | Path) -> dict[str, Path]:
    """Write the scene as the CLI's on-disk input format."""
    from .fileio import save_image, save_texture
    from .geometry import save_obj, save_pose

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "mesh": directory / "mesh.obj",
        "pose": directory / "pose.json",
        "input_image": directory / "input.png",
    }
    save_obj(paths["mesh"], scene.mesh)
    save_pose(paths["pose"], scene.pose)
    save_image(paths["input_image"], scene.input_image)
    content_px, content_val = save_texture(directory, "content", scene.content)
    gt_px, _ = save_texture(directory, "gt", scene.gt)
    paths["content_texture"] = content_px
    paths["content_validity"] = content_val
    paths["gt_texture"] = gt_px
    return paths
