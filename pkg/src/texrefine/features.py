"""Hypercolumn feature extraction and point sampling.

A frozen 16-layer VGG-style convolutional classifier provides multi-level
activations; a hypercolumn at an image point is the concatenation, over the
configured sub-layers, of bilinearly sampled activations at that point. The
raw RGB image itself is the first level of the default selection, which is
what makes the default channel total 2179 (3 + 64 + 64 + 128 + 128 + 256 +
256 + 256 + 512 + 512).

Weights are loaded from a local bundle file (state dict + input normalization
constants); `fetch-weights` in the CLI creates one.
"""

from __future__ import annotations

import hashlib
import os
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, MissingArtifactError

WEIGHTS_ENV_VAR = "TEXREFINE_WEIGHTS"
UPSTREAM_WEIGHTS_URL = "https://download.pytorch.org/models/vgg16-397923af.pth"
UPSTREAM_SHA256_PREFIX = "397923af"
_BUNDLE_FORMAT = "texrefine-weights-v1"

# Tap name -> (index of the activation inside the backbone Sequential,
# channel count). "rgb" taps the raw input image.
LAYER_TABLE: dict[str, tuple[int, int]] = {
    "rgb": (-1, 3),
    "relu1_1": (1, 64),
    "relu1_2": (3, 64),
    "relu2_1": (6, 128),
    "relu2_2": (8, 128),
    "relu3_1": (11, 256),
    "relu3_2": (13, 256),
    "relu3_3": (15, 256),
    "relu4_1": (18, 512),
    "relu4_2": (20, 512),
    "relu4_3": (22, 512),
    "relu5_1": (25, 512),
    "relu5_2": (27, 512),
    "relu5_3": (29, 512),
}

DEFAULT_LAYERS: tuple[str, ...] = (
    "rgb",
    "relu1_1",
    "relu1_2",
    "relu2_1",
    "relu2_2",
    "relu3_1",
    "relu3_2",
    "relu3_3",
    "relu4_3",
    "relu5_3",
)
DEFAULT_TOTAL_CHANNELS = 2179

# Cheaper selection for small synthetic problems: stops before the two
# heaviest convolution blocks.
REDUCED_LAYERS: tuple[str, ...] = DEFAULT_LAYERS[:8]

MIN_IMAGE_SIDE = 64


def total_channels(layers: tuple[str, ...] = DEFAULT_LAYERS) -> int:
    for name in layers:
        if name not in LAYER_TABLE:
            raise ConfigError(f"unknown feature layer {name!r}")
    return sum(LAYER_TABLE[name][1] for name in layers)


def build_backbone() -> torch.nn.Sequential:
    """The convolutional part of the 16-layer classifier, through relu5_3."""
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]
    layers: list[torch.nn.Module] = []
    in_ch = 3
    for item in cfg:
        if item == "M":
            layers.append(torch.nn.MaxPool2d(2))
        else:
            layers.append(torch.nn.Conv2d(in_ch, int(item), kernel_size=3, padding=1))
            layers.append(torch.nn.ReLU(inplace=False))
            in_ch = int(item)
    net = torch.nn.Sequential(*layers)
    for p in net.parameters():
        p.requires_grad_(False)
    net.eval()
    return net


def file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def resolve_weights_path(path: str | Path | None) -> Path:
    if path is None:
        path = os.environ.get(WEIGHTS_ENV_VAR)
    if path is None:
        raise MissingArtifactError(
            "no weights bundle configured: set paths.weights_bundle or the "
            f"{WEIGHTS_ENV_VAR} environment variable"
        )
    return Path(path)


def save_bundle(path: str | Path, state_dict: dict, mean, std, source: str) -> str:
    bundle = {
        "format": _BUNDLE_FORMAT,
        "state_dict": {k: v.cpu() for k, v in state_dict.items()},
        "mean": [float(v) for v in mean],
        "std": [float(v) for v in std],
        "source": source,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bundle, path)
    return file_sha256(path)


def make_untrained_bundle(path: str | Path, seed: int = 0) -> str:
    """Write a reproducible randomly initialized bundle.

    For offline smoke runs and tests only; refinement quality needs the
    pretrained classifier weights.
    """
    torch.manual_seed(seed)
    net = build_backbone()
    for m in net.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            torch.nn.init.uniform_(m.bias, -0.05, 0.05)
    return save_bundle(
        path,
        net.state_dict(),
        mean=(0.485, 0.456, 0.406),
        std=(0.229, 0.224, 0.225),
        source=f"untrained(seed={seed})",
    )


def fetch_weights(path: str | Path, url: str = UPSTREAM_WEIGHTS_URL) -> str:
    """Download the upstream classifier checkpoint, verify its checksum, and
    convert it into a bundle at `path`. Returns the bundle checksum."""
    path = Path(path)
    tmp = path.with_suffix(".download")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    urllib.request.urlretrieve(url, tmp)
    digest = file_sha256(tmp)
    if not digest.startswith(UPSTREAM_SHA256_PREFIX):
        tmp.unlink(missing_ok=True)
        raise MissingArtifactError(
            f"downloaded weights checksum {digest[:8]} does not match expected "
            f"prefix {UPSTREAM_SHA256_PREFIX}"
        )
    raw = torch.load(tmp, map_location="cpu", weights_only=True)
    tmp.unlink()
    state = {}
    for key, value in raw.items():
        if key.startswith("features."):
            idx = key.split(".")[1]
            if int(idx) <= 29:
                state[f"{idx}.{key.split('.', 2)[2]}"] = value
    return save_bundle(
        path,
        state,
        mean=(0.485, 0.456, 0.406),
        std=(0.229, 0.224, 0.225),
        source=url,
    )


@dataclass
class FeatureStack:
    """Ordered multi-level activations of one image."""

    levels: list[torch.Tensor]  # each (C_l, H_l, W_l)
    layer_ids: tuple[str, ...]
    image_size: tuple[int, int]  # (width, height) of the input image

    @property
    def total_channels(self) -> int:
        return sum(int(lv.shape[0]) for lv in self.levels)


@dataclass
class HypercolumnSet:
    """Hypercolumn vectors sampled at continuous image points."""

    points: np.ndarray  # (P, 2) image (x, y)
    vectors: torch.Tensor  # (P, D)


class FeatureExtractor:
    """Frozen backbone plus a fixed sub-layer selection."""

    def __init__(
        self,
        module: torch.nn.Sequential,
        mean,
        std,
        layers: tuple[str, ...] = DEFAULT_LAYERS,
        checksum: str | None = None,
    ):
        self.module = module
        self.layers = tuple(layers)
        self.checksum = checksum
        self._taps = {LAYER_TABLE[name][0] for name in self.layers if name != "rgb"}
        self._max_tap = max(self._taps, default=-1)
        self.total_channels = total_channels(self.layers)
        self.mean = torch.tensor([float(v) for v in mean]).view(3, 1, 1)
        self.std = torch.tensor([float(v) for v in std]).view(3, 1, 1)

    @classmethod
    def from_bundle(
        cls,
        path: str | Path | None = None,
        layers: tuple[str, ...] = DEFAULT_LAYERS,
    ) -> "FeatureExtractor":
        path = resolve_weights_path(path)
        if not path.exists():
            raise MissingArtifactError(
                f"weights bundle not found at {path}; run `texrefine fetch-weights` "
                f"(upstream file sha256 starts with {UPSTREAM_SHA256_PREFIX})"
            )
        checksum = file_sha256(path)
        bundle = torch.load(path, map_location="cpu", weights_only=True)
        if bundle.get("format") != _BUNDLE_FORMAT:
            raise ConfigError(f"{path} is not a {_BUNDLE_FORMAT} bundle")
        net = build_backbone()
        net.load_state_dict(bundle["state_dict"])
        return cls(net, bundle["mean"], bundle["std"], layers=layers, checksum=checksum)

    def extract(self, image: torch.Tensor | np.ndarray) -> FeatureStack:
        """Run the frozen backbone; returns the selected activations.

        `image` is (H, W, 3) in [0, 1]. Torch inputs stay on the autograd
        tape, so losses over the stack differentiate back to the image.
        """
        if isinstance(image, np.ndarray):
            image = torch.from_numpy(np.ascontiguousarray(image))
        if image.ndim != 3 or image.shape[2] != 3:
            raise ConfigError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
        h, w = int(image.shape[0]), int(image.shape[1])
        if min(h, w) < MIN_IMAGE_SIDE:
            raise ConfigError(f"image side {min(h, w)} below minimum {MIN_IMAGE_SIDE}")

        chw = image.permute(2, 0, 1)
        param_dtype = next(self.module.parameters()).dtype
        by_tap: dict[int, torch.Tensor] = {}
        if self._max_tap >= 0:
            x = ((chw.to(param_dtype) - self.mean.to(param_dtype)) / self.std.to(param_dtype)).unsqueeze(0)
            for idx, layer in enumerate(self.module):
                x = layer(x)
                if idx in self._taps:
                    by_tap[idx] = x[0]
                if idx == self._max_tap:
                    break
        levels = []
        for name in self.layers:
            tap, _ = LAYER_TABLE[name]
            levels.append(chw if name == "rgb" else by_tap[tap])
        return FeatureStack(levels=levels, layer_ids=self.layers, image_size=(w, h))


def draw_points(
    validity: np.ndarray | None,
    count: int,
    rng_seed: int,
    shape: tuple[int, int] | None = None,
) -> np.ndarray:
    """Seeded uniform points over valid pixels (or the whole image).

    Returns (count, 2) float64 (x, y) continuous coordinates. `shape` is
    (height, width) and is required when no mask is given.
    """
    if count < 1:
        raise ConfigError("point count must be >= 1")
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    if validity is not None:
        mask = np.asarray(validity).astype(bool)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            raise ConfigError("cannot draw points from an empty mask")
        pick = rng.integers(0, rows.size, size=count)
        base = np.stack([cols[pick], rows[pick]], axis=-1).astype(np.float64)
        return base + rng.random((count, 2))
    if shape is None:
        raise ConfigError("shape is required when no mask is given")
    h, w = shape
    return rng.random((count, 2)) * np.array([w, h], dtype=np.float64)


def sample_hypercolumns(stack: FeatureStack, points: np.ndarray) -> HypercolumnSet:
    """Bilinearly sample every level at the given full-resolution points and
    concatenate along channels (differentiable with respect to the stack)."""
    points = np.asarray(points, dtype=np.float64)
    w, h = stack.image_size
    bad = np.nonzero(
        (points[:, 0] < 0) | (points[:, 0] > w) | (points[:, 1] < 0) | (points[:, 1] > h)
    )[0]
    if bad.size:
        raise ConfigError(f"points out of image bounds at indices {bad.tolist()[:8]}")

    pts = torch.from_numpy(points)
    parts = []
    for level in stack.levels:
        c, lh, lw = level.shape
        scale = torch.tensor([lw / w, lh / h], dtype=torch.float64)
        s = pts * scale - 0.5
        sx = s[:, 0].clamp(0.0, lw - 1.0)
        sy = s[:, 1].clamp(0.0, lh - 1.0)
        x0 = sx.floor().long().clamp(0, max(lw - 2, 0))
        y0 = sy.floor().long().clamp(0, max(lh - 2, 0))
        x1 = (x0 + 1).clamp(0, lw - 1)
        y1 = (y0 + 1).clamp(0, lh - 1)
        fx = (sx - x0).to(level.dtype).unsqueeze(0)
        fy = (sy - y0).to(level.dtype).unsqueeze(0)
        top = level[:, y0, x0] * (1 - fx) + level[:, y0, x1] * fx
        bot = level[:, y1, x0] * (1 - fx) + level[:, y1, x1] * fx
        parts.append((top * (1 - fy) + bot * fy).transpose(0, 1))  # (P, C)
    return HypercolumnSet(points=points, vectors=torch.cat(parts, dim=1))


def match_points(style_hc: HypercolumnSet, output_hc: HypercolumnSet) -> np.ndarray:
    """For every style hypercolumn, the index of the nearest output
    hypercolumn under cosine distance."""
    if style_hc.vectors.shape[0] == 0 or output_hc.vectors.shape[0] == 0:
        raise ConfigError("match_points needs nonempty sets")
    with torch.no_grad():
        s = style_hc.vectors.double()
        o = output_hc.vectors.double()
        s = s / s.norm(dim=1, keepdim=True).clamp_min(1e-8)
        o = o / o.norm(dim=1, keepdim=True).clamp_min(1e-8)
        cost = 1.0 - s @ o.T
        return cost.argmin(dim=1).numpy()
