"""Image, texture, and report file handling (8-bit PNG on disk, floats in
memory)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingArtifactError
from .geometry import TextureMap


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB file to (H, W, 3) float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"image not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path: str | Path, array: np.ndarray) -> None:
    arr = np.clip(np.asarray(array, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0).round().astype(np.uint8)
    Image.fromarray(data, mode="RGB" if data.ndim == 3 else "L").save(Path(path))


def load_mask(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"mask not found: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr >= 128


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    data = (np.asarray(mask).astype(np.uint8)) * 255
    Image.fromarray(data, mode="L").save(Path(path))


def save_texture(directory: str | Path, name: str, texture: TextureMap) -> tuple[Path, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pixels_path = directory / f"{name}.png"
    validity_path = directory / f"{name}_validity.png"
    save_image(pixels_path, texture.pixels)
    save_mask(validity_path, texture.validity)
    return pixels_path, validity_path


def load_texture(pixels_path: str | Path, validity_path: str | Path | None = None) -> TextureMap:
    pixels = load_image(pixels_path)
    if validity_path is not None and Path(validity_path).exists():
        validity = load_mask(validity_path)
    else:
        validity = np.ones(pixels.shape[:2], dtype=bool)
    return TextureMap(pixels=pixels, validity=validity)


def write_json(path: str | Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"file not found: {path}")
    with open(path) as fh:
        return json.load(fh)
