import numpy as np
import pytest

from texrefine import geometry, synthetic
from texrefine.errors import ConfigError, MeshFormatError
from texrefine.geometry import CameraPose, FaceMesh, TextureMap


def single_triangle():
    verts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    uv = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return FaceMesh(verts, np.array([[0, 1, 2]]), uv)


class TestVertexNormals:
    def test_planar_triangle_normals(self):
        mesh = geometry.compute_vertex_normals(single_triangle())
        assert np.allclose(mesh.vertex_normals, [[0, 0, 1]] * 3)

    def test_flat_quad_normals_identical(self):
        pose = synthetic.make_camera(4.0, 100.0, (64, 64))
        quad = synthetic.make_quad_scene(pose, (8, 8, 56, 56))
        assert np.allclose(quad.vertex_normals, quad.vertex_normals[0])
        assert np.allclose(np.linalg.norm(quad.vertex_normals, axis=1), 1.0, atol=1e-6)

    def test_icosphere_normals_near_radial(self):
        sphere = synthetic.make_icosphere(subdivisions=2)
        radial = sphere.vertices / np.linalg.norm(sphere.vertices, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", sphere.vertex_normals, radial)
        angles = np.degrees(np.arccos(np.clip(cos, -1, 1)))
        assert angles.max() < 2.0

    def test_unit_norm(self):
        sphere = synthetic.make_icosphere(subdivisions=1)
        assert np.allclose(np.linalg.norm(sphere.vertex_normals, axis=1), 1.0, atol=1e-6)

    def test_isolated_vertex_warns(self):
        verts = np.vstack([single_triangle().vertices, [[5.0, 5.0, 5.0]]])
        uv = np.vstack([single_triangle().uv_coords, [[0.5, 0.5]]])
        mesh = FaceMesh(verts, np.array([[0, 1, 2]]), uv)
        with pytest.warns(UserWarning, match="isolated"):
            out = geometry.compute_vertex_normals(mesh)
        assert np.allclose(out.vertex_normals[3], [0, 0, -1])

    def test_all_degenerate_errors(self):
        verts = np.zeros((3, 3))
        mesh = FaceMesh(verts, np.empty((0, 3), dtype=int), np.zeros((3, 2)))
        with pytest.raises(MeshFormatError):
            geometry.compute_vertex_normals(mesh)


class TestVisibility:
    def test_head_on_vertex_visible(self):
        mesh = geometry.compute_vertex_normals(single_triangle())
        pose = synthetic.make_camera(distance=10.0, focal=100.0, image_size=(64, 64))
        assert geometry.compute_visibility(mesh, pose).all()

    def test_threshold_boundary_exactly_visible(self):
        # Vertex at origin, camera straight above: direction to camera is
        # exactly (0, 0, 1); normal (0.8, 0, 0.6) gives score 0.6 exactly.
        verts = np.array([[0.0, 0.0, 0.0], [1e-3, 0.0, 0.0], [0.0, 1e-3, 0.0]])
        mesh = FaceMesh(verts, np.array([[0, 1, 2]]), np.zeros((3, 2)))
        mesh.vertex_normals = np.array([[0.8, 0.0, 0.6]] * 3)
        pose = synthetic.make_camera(distance=10.0, focal=100.0, image_size=(64, 64))
        vis = geometry.compute_visibility(mesh, pose, threshold=0.6)
        assert vis[0], "score exactly 0.6 must be visible"
        mesh.vertex_normals = np.array([[np.sqrt(1 - 0.59**2), 0.0, 0.59]] * 3)
        assert not geometry.compute_visibility(mesh, pose, threshold=0.6)[0]

    def test_sphere_visible_fraction_matches_enumeration(self):
        sphere = synthetic.make_icosphere(subdivisions=2)
        pose = synthetic.make_camera(distance=200.0, focal=100.0, image_size=(64, 64))
        vis = geometry.compute_visibility(sphere, pose, threshold=0.6)
        # Far-camera oracle: cos(angle between normal and +z) >= 0.6.
        oracle = (sphere.vertex_normals @ np.array([0.0, 0.0, 1.0])) >= 0.6
        assert abs(vis.mean() - oracle.mean()) <= 0.02

    def test_monotone_in_threshold(self):
        sphere = synthetic.make_icosphere(subdivisions=2)
        pose = synthetic.make_camera(distance=5.0, focal=100.0, image_size=(64, 64))
        prev = None
        for thr in (0.0, 0.3, 0.6, 0.9):
            vis = geometry.compute_visibility(sphere, pose, threshold=thr)
            if prev is not None:
                assert not (vis & ~prev).any(), "raising threshold added a vertex"
            prev = vis

    def test_requires_normals(self):
        pose = synthetic.make_camera(4.0, 100.0, (64, 64))
        with pytest.raises(ConfigError):
            geometry.compute_visibility(single_triangle(), pose)


class TestVisibilityMask:
    def test_all_visible_equals_coverage(self, quad_scene):
        mesh, pose, _ = quad_scene
        vis = np.ones(len(mesh.vertices), bool)
        mask = geometry.rasterize_visibility_mask(mesh, vis, 64)
        assert np.array_equal(mask, geometry.uv_coverage_mask(mesh, 64))
        assert mask.all()

    def test_none_visible_empty(self, quad_scene):
        mesh, pose, _ = quad_scene
        vis = np.zeros(len(mesh.vertices), bool)
        assert not geometry.rasterize_visibility_mask(mesh, vis, 64).any()

    def test_half_visible_sphere_matches_brute_force(self):
        sphere = synthetic.make_icosphere(subdivisions=2)
        pose = synthetic.make_camera(distance=50.0, focal=100.0, image_size=(64, 64))
        vis = geometry.compute_visibility(sphere, pose, threshold=0.6)
        res = 64
        mask = geometry.rasterize_visibility_mask(sphere, vis, res)

        # Brute-force oracle: point-in-triangle tests at every pixel center
        # over the fully visible triangles.
        oracle = np.zeros((res, res), bool)
        xy = sphere.uv_coords * res
        tri_vis = vis[sphere.triangles].all(axis=1)
        for f in np.nonzero(tri_vis)[0]:
            p0, p1, p2 = xy[sphere.triangles[f]]
            den = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
            if den == 0:
                continue
            for i in range(res):
                for j in range(res):
                    px, py = j + 0.5, i + 0.5
                    w1 = ((px - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (py - p0[1])) / den
                    w2 = ((p1[0] - p0[0]) * (py - p0[1]) - (px - p0[0]) * (p1[1] - p0[1])) / den
                    if w1 >= 0 and w2 >= 0 and 1 - w1 - w2 >= 0:
                        oracle[i, j] = True
        assert abs(int(mask.sum()) - int(oracle.sum())) <= 0.02 * res * res


def _loop_dilate(mask, element):
    h, w = mask.shape
    r = element.shape[0] // 2
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if element[di + r, dj + r] and 0 <= i + di < h and 0 <= j + dj < w:
                        out[i + di, j + dj] = True
    return out


def _loop_erode(mask, element):
    h, w = mask.shape
    r = element.shape[0] // 2
    out = np.zeros_like(mask)
    for i in range(h):
        for j in range(w):
            ok = True
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if not element[di + r, dj + r]:
                        continue
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < h and 0 <= jj < w) or not mask[ii, jj]:
                        ok = False
                        break
                if not ok:
                    break
            out[i, j] = ok
    return out


class TestCleanMask:
    def test_zero_radii_identity(self):
        rng = np.random.Generator(np.random.PCG64(0))
        mask = rng.random((32, 32)) > 0.5
        assert np.array_equal(geometry.clean_mask(mask, 0, 0), mask)

    def test_opening_removes_speck(self):
        mask = np.zeros((32, 32), bool)
        mask[4:20, 4:20] = True
        mask[27, 27] = True
        out = geometry.clean_mask(mask, 2, 0)
        assert not out[27, 27]
        assert out[10, 10]

    def test_closing_fills_hole_matches_loop_oracle(self):
        mask = np.zeros((40, 40), bool)
        mask[8:32, 8:32] = True
        mask[18:21, 18:21] = False  # 3-px-wide interior hole
        out = geometry.clean_mask(mask, 0, 3)
        assert out[19, 19], "hole filled"
        element = geometry._disk(3)
        oracle = _loop_erode(_loop_dilate(mask, element), element)
        assert np.array_equal(out, oracle)

    def test_open_close_matches_loop_oracle(self):
        rng = np.random.Generator(np.random.PCG64(5))
        mask = np.zeros((28, 28), bool)
        mask[6:22, 6:22] = rng.random((16, 16)) > 0.3
        out = geometry.clean_mask(mask, 1, 2)
        e1, e2 = geometry._disk(1), geometry._disk(2)
        opened = _loop_dilate(_loop_erode(mask, e1), e1)
        oracle = _loop_erode(_loop_dilate(opened, e2), e2)
        assert np.array_equal(out, oracle)

    def test_mask_sandwich_properties(self):
        rng = np.random.Generator(np.random.PCG64(9))
        mask = np.zeros((36, 36), bool)
        mask[6:30, 6:30] = rng.random((24, 24)) > 0.35
        opened = geometry.clean_mask(mask, 2, 0)
        assert not (opened & ~mask).any(), "opening output must be a subset of input"
        out = geometry.clean_mask(mask, 2, 3)
        dilated = _loop_dilate(mask, geometry._disk(3))
        assert not (out & ~dilated).any(), "open-close must stay inside dilation of input"


class TestMappings:
    def test_optical_axis_hits_principal_point(self):
        pose = synthetic.make_camera(distance=5.0, focal=120.0, image_size=(100, 80))
        mesh = FaceMesh(np.array([[0.0, 0.0, 0.0]]), np.empty((0, 3), int), np.array([[0.5, 0.5]]))
        m = geometry.build_mappings(mesh, pose, uv_resolution=64)
        assert np.allclose(m.f1[0], pose.principal_point)
        assert m.in_front[0]

    def test_f2_half_pixel_convention(self):
        pose = synthetic.make_camera(distance=5.0, focal=120.0, image_size=(64, 64))
        mesh = FaceMesh(np.array([[0.0, 0.0, 0.0]]), np.empty((0, 3), int), np.array([[0.5, 0.5]]))
        m = geometry.build_mappings(mesh, pose, uv_resolution=512)
        assert np.allclose(m.f2[0], [256.0, 256.0])

    def test_projection_matches_longhand_homogeneous(self):
        rng = np.random.Generator(np.random.PCG64(7))
        pose = synthetic.make_camera(distance=6.0, focal=150.0, image_size=(96, 96))
        pts = rng.standard_normal((20, 3))
        mesh = FaceMesh(pts, np.empty((0, 3), int), rng.random((20, 2)))
        m = geometry.build_mappings(mesh, pose, uv_resolution=128)

        # Longhand: build the 3x4 projection matrix and divide by w.
        K = np.array(
            [
                [pose.focal, 0, pose.principal_point[0]],
                [0, pose.focal, pose.principal_point[1]],
                [0, 0, 1],
            ]
        )
        P = K @ np.hstack([pose.rotation, pose.translation[:, None]])
        homo = np.hstack([pts, np.ones((20, 1))]) @ P.T
        expected = homo[:, :2] / homo[:, 2:3]
        assert np.allclose(m.f1, expected, atol=1e-9)

    def test_behind_camera_flagged(self):
        pose = synthetic.make_camera(distance=2.0, focal=100.0, image_size=(64, 64))
        mesh = FaceMesh(
            np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]]),
            np.empty((0, 3), int),
            np.array([[0.5, 0.5], [0.5, 0.5]]),
        )
        m = geometry.build_mappings(mesh, pose, uv_resolution=64)
        assert m.in_front[0] and not m.in_front[1]


class TestStyleImage:
    def test_constant_gray_input(self, quad_scene):
        mesh, pose, _ = quad_scene
        img = np.full((128, 128, 3), 0.5)
        style = geometry.sample_style_image(img, mesh, pose, 64, morph_radii=(0, 0))
        assert np.allclose(style.pixels[style.validity], 0.5)
        assert np.allclose(style.pixels[~style.validity], 0.0)

    def test_identity_scene_reproduces_input(self, quad_scene):
        mesh, pose, img = quad_scene
        style = geometry.sample_style_image(img, mesh, pose, 64, morph_radii=(0, 0))
        crop = img[32:96, 32:96]
        err = np.abs(style.pixels - crop)[style.validity]
        assert err.mean() < 1e-3

    def test_back_facing_mesh_errors(self, quad_scene):
        mesh, pose, img = quad_scene
        flipped = FaceMesh(mesh.vertices, mesh.triangles[:, ::-1], mesh.uv_coords)
        with pytest.raises(ConfigError, match="no visible face region"):
            geometry.sample_style_image(img, flipped, pose, 64)

    def test_validity_equals_cleaned_mask_bit_for_bit(self, synth_scene):
        scene = synth_scene
        radii = geometry.default_morph_radii(128)
        style = geometry.sample_style_image(
            scene.input_image, scene.mesh, scene.pose, 128, morph_radii=radii
        )
        vis = geometry.compute_visibility(scene.mesh, scene.pose)
        expected = geometry.clean_mask(
            geometry.rasterize_visibility_mask(scene.mesh, vis, 128), *radii
        )
        assert np.array_equal(style.validity, expected)

    def test_image_size_mismatch(self, quad_scene):
        mesh, pose, _ = quad_scene
        with pytest.raises(ConfigError, match="pose expects"):
            geometry.sample_style_image(np.zeros((64, 64, 3)), mesh, pose, 64)


class TestRoundTrip:
    def test_sample_then_render_reproduces_input(self, quad_scene):
        from texrefine import raster

        mesh, pose, img = quad_scene
        style = geometry.sample_style_image(img, mesh, pose, 96, morph_radii=(0, 0))
        rendered = raster.render(mesh, style, pose)
        diff = np.abs(rendered.pixels - img)[rendered.coverage_mask]
        assert diff.mean() < 5e-3


class TestLoaders:
    def test_obj_round_trip(self, tmp_path, synth_scene):
        path = tmp_path / "mesh.obj"
        geometry.save_obj(path, synth_scene.mesh)
        mesh = geometry.load_obj(path)
        assert np.allclose(mesh.vertices, synth_scene.mesh.vertices, atol=1e-6)
        assert np.array_equal(mesh.triangles, synth_scene.mesh.triangles)
        assert np.allclose(mesh.uv_coords, synth_scene.mesh.uv_coords, atol=1e-6)

    def test_obj_rejects_mismatched_vt(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/2 2/2 3/3\n")
        with pytest.raises(MeshFormatError, match="coincide"):
            geometry.load_obj(path)

    def test_obj_rejects_missing_vt(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nf 1 2 3\n")
        with pytest.raises(MeshFormatError, match="one per vertex"):
            geometry.load_obj(path)

    def test_obj_drops_degenerate_triangles(self, tmp_path):
        path = tmp_path / "degen.obj"
        path.write_text(
            "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1 2 3\nf 1 1 2\n"
        )
        mesh = geometry.load_obj(path)
        assert mesh.triangles.shape == (1, 3)

    def test_pose_round_trip(self, tmp_path):
        pose = synthetic.make_camera(distance=3.0, focal=111.5, image_size=(96, 80))
        path = tmp_path / "pose.json"
        geometry.save_pose(path, pose)
        loaded = geometry.load_pose(path)
        assert np.allclose(loaded.rotation, pose.rotation)
        assert np.allclose(loaded.translation, pose.translation)
        assert loaded.focal == pose.focal
        assert loaded.image_size == pose.image_size

    def test_pose_rejects_bad_rotation(self, tmp_path):
        path = tmp_path / "pose.json"
        path.write_text(
            '{"rotation": [2,0,0, 0,1,0, 0,0,1], "translation": [0,0,4],'
            ' "focal": 100, "principal_point": [32,32], "image_size": [64,64]}'
        )
        with pytest.raises(ConfigError, match="orthonormal"):
            geometry.load_pose(path)


class TestTextureMap:
    def test_invalid_pixels_forced_black(self):
        validity = np.zeros((8, 8), bool)
        validity[:4] = True
        tex = TextureMap(np.ones((8, 8, 3)), validity)
        assert np.allclose(tex.pixels[4:], 0.0)
        assert np.allclose(tex.pixels[:4], 1.0)

    def test_pixels_clamped(self):
        tex = TextureMap(np.full((4, 4, 3), 1.7), np.ones((4, 4), bool))
        assert tex.pixels.max() <= 1.0

    def test_non_square_rejected(self):
        with pytest.raises(ConfigError):
            TextureMap(np.zeros((4, 8, 3)), np.zeros((4, 8), bool))
