import numpy as np
import pytest
import torch
from scipy import ndimage

from texrefine import features, geometry, synthetic

torch.set_num_threads(max(torch.get_num_threads(), 2))


@pytest.fixture(scope="session")
def weights_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("weights") / "weights.pt"
    features.make_untrained_bundle(path, seed=0)
    return path


@pytest.fixture(scope="session")
def extractor(weights_path):
    return features.FeatureExtractor.from_bundle(weights_path)


@pytest.fixture(scope="session")
def reduced_extractor(weights_path):
    return features.FeatureExtractor.from_bundle(weights_path, layers=features.REDUCED_LAYERS)


@pytest.fixture(scope="session")
def smooth_image():
    rng = np.random.Generator(np.random.PCG64(3))
    img = ndimage.gaussian_filter(rng.random((128, 128, 3)), (2, 2, 0))
    return (img - img.min()) / (img.max() - img.min())


@pytest.fixture(scope="session")
def quad_scene(smooth_image):
    """Screen-aligned identity quad: UVs equal normalized projected coords."""
    pose = synthetic.make_camera(distance=4.0, focal=200.0, image_size=(128, 128))
    mesh = synthetic.make_quad_scene(pose, (32, 32, 96, 96))
    return mesh, pose, smooth_image


@pytest.fixture(scope="session")
def synth_scene():
    return synthetic.make_synthetic_scene(tex_resolution=128, image_size=(128, 128), seed=7)


@pytest.fixture(scope="session")
def synth_style(synth_scene):
    return geometry.sample_style_image(
        synth_scene.input_image, synth_scene.mesh, synth_scene.pose, 128
    )
