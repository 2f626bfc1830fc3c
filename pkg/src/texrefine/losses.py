"""Differentiable loss terms for the multi-stage texture optimization.

Four families: self-similarity content loss, the three-part style loss
(relaxed earth mover's distance, moment matching, color matching), the masked
image-space rendering loss, and their weighted total. All functions accept
torch tensors (kept on the autograd tape) and return scalar tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericalError

COSINE_EPS = 1e-8

# Fixed decorrelating color transform for the color matching term (a
# luma/chroma style orthogonal-ish basis; rows are the output channels).
COLOR_TRANSFORM = (
    (0.577350, 0.577350, 0.577350),
    (-0.577350, 0.788675, -0.211325),
    (-0.577350, -0.211325, 0.788675),
)


@dataclass
class LossWeights:
    """Weights of the three loss terms; alpha also sets the color-term weight
    1 / max(alpha, 1)."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self) -> None:
        if not all(np.isfinite([self.alpha, self.beta, self.gamma])):
            raise ConfigError("loss weights must be finite")
        if self.alpha <= 0 or self.beta <= 0 or self.gamma < 0:
            raise ConfigError("need alpha > 0, beta > 0, gamma >= 0")


def _vectors(x) -> torch.Tensor:
    v = getattr(x, "vectors", x)
    if isinstance(v, np.ndarray):
        v = torch.from_numpy(v)
    if v.ndim != 2:
        raise ConfigError(f"expected (P, D) vectors, got {tuple(v.shape)}")
    return v


def cosine_distance_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise 1 - cos(a_i, b_j) with epsilon-guarded norms."""
    an = a / a.norm(dim=1, keepdim=True).clamp_min(COSINE_EPS)
    bn = b / b.norm(dim=1, keepdim=True).clamp_min(COSINE_EPS)
    return 1.0 - an @ bn.T


def content_loss(hc_x, hc_c) -> torch.Tensor:
    """Mean absolute difference of the two sets' pairwise cosine-distance
    matrices (self-similarity transfer)."""
    x, c = _vectors(hc_x), _vectors(hc_c)
    if x.shape[0] != c.shape[0]:
        raise ConfigError(f"content loss needs matching point counts, got {x.shape[0]} vs {c.shape[0]}")
    px = getattr(hc_x, "points", None)
    pc = getattr(hc_c, "points", None)
    if px is not None and pc is not None and not np.allclose(px, pc, atol=1e-9):
        raise ConfigError("content loss needs identical point layouts")
    dx = cosine_distance_matrix(x, x)
    dc = cosine_distance_matrix(c, c.to(x.dtype))
    return (dx - dc).abs().mean()


def remd_loss(hc_x, hc_s) -> torch.Tensor:
    """Relaxed earth mover's distance over cosine costs: the larger of the
    two directional mean nearest-neighbor costs."""
    x, s = _vectors(hc_x), _vectors(hc_s)
    if x.shape[0] == 0 or s.shape[0] == 0:
        raise ConfigError("remd needs nonempty sets")
    cost = cosine_distance_matrix(x, s.to(x.dtype))
    return torch.maximum(cost.min(dim=1).values.mean(), cost.min(dim=0).values.mean())


def moment_loss(hc_x, hc_s) -> torch.Tensor:
    """L1 gap between feature means and between feature covariances, each
    averaged over its elements; restores the magnitude information that
    cosine distances drop."""
    x, s = _vectors(hc_x), _vectors(hc_s).to(_vectors(hc_x).dtype)
    if x.shape[0] < 2 or s.shape[0] < 2:
        raise ConfigError("moment loss needs at least 2 points per set")
    mu_x, mu_s = x.mean(dim=0), s.mean(dim=0)
    xc, sc = x - mu_x, s - mu_s
    cov_x = xc.T @ xc / (x.shape[0] - 1)
    cov_s = sc.T @ sc / (s.shape[0] - 1)
    return (mu_x - mu_s).abs().mean() + (cov_x - cov_s).abs().mean()


def color_loss(pixels_x, pixels_s, alpha: float) -> torch.Tensor:
    """Relaxed EMD between sampled pixel colors in the fixed decorrelated
    color space, weighted by 1 / max(alpha, 1)."""
    x, s = _vectors(pixels_x), _vectors(pixels_s)
    if x.shape[1] != 3 or s.shape[1] != 3:
        raise ConfigError("color loss expects (P, 3) pixel sets")
    t = torch.tensor(COLOR_TRANSFORM, dtype=x.dtype)
    return remd_loss(x @ t.T, s.to(x.dtype) @ t.T) / max(float(alpha), 1.0)


def style_loss(hc_x, hc_s, pixels_x, pixels_s, alpha: float) -> torch.Tensor:
    """remd + moment + color terms."""
    return remd_loss(hc_x, hc_s) + moment_loss(hc_x, hc_s) + color_loss(pixels_x, pixels_s, alpha)


def _image_tensor(img) -> torch.Tensor:
    pix = getattr(img, "pixels", img)
    if isinstance(pix, np.ndarray):
        pix = torch.from_numpy(np.ascontiguousarray(pix))
    return pix


def rendering_loss(rendered, input_image, mask, normalize: bool = False) -> torch.Tensor:
    """Masked absolute difference between the render and the photograph,
    summed over pixels and channels (mean per masked element if normalize).

    Callers are expected to pass the coverage mask already eroded by one
    pixel (the renderer skips edge antialiasing in favor of dropping the
    boundary ring from this loss).
    """
    r = _image_tensor(rendered)
    i = _image_tensor(input_image).to(r.dtype)
    if r.shape != i.shape:
        raise ConfigError(f"shape mismatch {tuple(r.shape)} vs {tuple(i.shape)}")
    m = mask
    if isinstance(m, np.ndarray):
        m = torch.from_numpy(m.astype(np.float64))
    m = m.to(r.dtype)
    total = ((r - i).abs() * m.unsqueeze(-1)).sum()
    if normalize:
        total = total / (m.sum() * r.shape[-1]).clamp_min(1.0)
    return total


def uv_recon_loss(texture, style_texture, validity, normalize: bool = True) -> torch.Tensor:
    """UV-space pixel loss over the style validity mask; the ablation
    alternative to the rendering loss."""
    t = _image_tensor(texture)
    s = _image_tensor(style_texture).to(t.dtype)
    m = validity
    if isinstance(m, np.ndarray):
        m = torch.from_numpy(m.astype(np.float64))
    m = m.to(t.dtype)
    total = ((t - s).abs() * m.unsqueeze(-1)).sum()
    if normalize:
        total = total / (m.sum() * t.shape[-1]).clamp_min(1.0)
    return total


def total_loss(content, style, render_term, w: LossWeights) -> torch.Tensor:
    """alpha * content + beta * style + gamma * render, with a NaN guard that
    names the offending term."""
    terms = {"content": content, "style": style, "render": render_term}
    for name, value in terms.items():
        v = float(value.detach() if isinstance(value, torch.Tensor) else value)
        if not np.isfinite(v):
            raise NumericalError(f"non-finite {name} loss ({v})")
    c = torch.as_tensor(content, dtype=None if isinstance(content, torch.Tensor) else torch.float64)
    s = torch.as_tensor(style, dtype=None if isinstance(style, torch.Tensor) else torch.float64)
    r = torch.as_tensor(
        render_term, dtype=None if isinstance(render_term, torch.Tensor) else torch.float64
    )
    dtype = torch.promote_types(torch.promote_types(c.dtype, s.dtype), r.dtype)
    return w.alpha * c.to(dtype) + w.beta * s.to(dtype) + w.gamma * r.to(dtype)
