"""Pixel- and structure-level evaluation metrics and report records.

PSNR/MAE operate on [0, 1] images, optionally masked. SSIM is the
single-scale variant with an 11x11 Gaussian window (sigma 1.5) and
stabilizers C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range, averaged over
fully interior window positions; inputs are converted to luma internally.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .geometry import CameraPose, FaceMesh, TextureMap
from .raster import RasterMap, build_rastermap

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _flatten_masked(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None):
    if mask is None:
        return a.ravel(), b.ravel()
    m = np.asarray(mask).astype(bool)
    if m.shape != a.shape[: m.ndim]:
        raise ConfigError("mask shape does not match images")
    if not m.any():
        raise ConfigError("empty mask")
    return a[m].ravel(), b[m].ravel()


def mae(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean absolute error over (masked) pixels and channels."""
    a, b = _check_pair(a, b)
    av, bv = _flatten_masked(a, b, mask)
    return float(np.mean(np.abs(av - bv)))


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB against unit peak; inf for identical
    inputs."""
    a, b = _check_pair(a, b)
    av, bv = _flatten_masked(a, b, mask)
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ _LUMA
    return img


def _gaussian_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _windowed_mean(img: np.ndarray) -> np.ndarray:
    g = _gaussian_kernel()
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    half = SSIM_WINDOW // 2
    return out[half:-half, half:-half]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural similarity between two images (grayscale internally)."""
    a, b = _check_pair(a, b)
    ga, gb = _to_gray(a), _to_gray(b)
    if min(ga.shape) < SSIM_WINDOW:
        raise ConfigError(f"image side {min(ga.shape)} smaller than SSIM window {SSIM_WINDOW}")
    mu_a = _windowed_mean(ga)
    mu_b = _windowed_mean(gb)
    var_a = _windowed_mean(ga * ga) - mu_a**2
    var_b = _windowed_mean(gb * gb) - mu_b**2
    cov = _windowed_mean(ga * gb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


@dataclass
class EvalRecord:
    id: str
    mae: float
    psnr: float
    ssim: float
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"id": self.id, "mae": self.mae, "psnr": self.psnr, "ssim": self.ssim}
        out.update(self.extras)
        return out


@dataclass
class EvalReport:
    protocol: str  # "uv" | "reprojected"
    records: list[EvalRecord] = field(default_factory=list)

    def aggregates(self) -> dict:
        if not self.records:
            return {}
        return {
            "mean_mae": float(np.mean([r.mae for r in self.records])),
            "mean_psnr": float(np.mean([r.psnr for r in self.records])),
            "mean_ssim": float(np.mean([r.ssim for r in self.records])),
        }

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "records": [r.to_dict() for r in self.records],
            "aggregates": self.aggregates(),
        }


def _json_default(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    raise TypeError(f"not JSON serializable: {value!r}")


def _json_safe(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def write_report_json(path: str | Path, report: EvalReport) -> None:
    with open(path, "w") as fh:
        json.dump(_json_safe(report.to_dict()), fh, indent=2)
        fh.write("\n")


def write_report_csv(path: str | Path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "protocol", "mae", "psnr", "ssim"])
        for r in report.records:
            writer.writerow([r.id, report.protocol, f"{r.mae:.6g}", f"{r.psnr:.6g}", f"{r.ssim:.6g}"])


def evaluate_reprojected(
    texture: TextureMap,
    mesh: FaceMesh,
    pose: CameraPose,
    input_image: np.ndarray,
    record_id: str = "scene",
    rastermap: RasterMap | None = None,
) -> EvalRecord:
    """Render the texture and compare against the photograph inside the face
    mask. SSIM is computed on the mask's bounding box with both images zeroed
    outside the mask."""
    from .raster import render

    rm = rastermap if rastermap is not None else build_rastermap(mesh, pose)
    rendered = render(mesh, texture, pose, rastermap=rm)
    img = np.asarray(input_image, dtype=np.float64)
    mask = rendered.coverage_mask
    if not mask.any():
        raise ConfigError("face mask is empty; nothing to evaluate")
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    sl = (slice(rows.min(), rows.max() + 1), slice(cols.min(), cols.max() + 1))
    m3 = mask[:, :, None].astype(np.float64)
    return EvalRecord(
        id=record_id,
        mae=mae(rendered.pixels, img, mask=mask),
        psnr=psnr(rendered.pixels, img, mask=mask),
        ssim=ssim((rendered.pixels * m3)[sl], (img * m3)[sl]),
        extras={"protocol": "reprojected"},
    )


def evaluate_uv(
    texture: TextureMap,
    reference: TextureMap,
    record_id: str = "scene",
    mask: np.ndarray | None = None,
) -> EvalRecord:
    """UV-space comparison against a reference texture: full-square PSNR and
    masked PSNR (over `mask`, defaulting to the reference validity)."""
    m = reference.validity if mask is None else np.asarray(mask).astype(bool)
    return EvalRecord(
        id=record_id,
        mae=mae(texture.pixels, reference.pixels, mask=m),
        psnr=psnr(texture.pixels, reference.pixels, mask=m),
        ssim=ssim(texture.pixels, reference.pixels),
        extras={
            "protocol": "uv",
            "psnr_full": psnr(texture.pixels, reference.pixels),
            "psnr_masked": psnr(texture.pixels, reference.pixels, mask=m),
        },
    )
