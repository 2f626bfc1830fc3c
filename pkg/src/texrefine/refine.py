"""Multi-stage optimization driver.

Each stage runs SGD-with-momentum over a Laplacian-pyramid parameterization
of the texture, at each configured scale in ascending order, against the
weighted sum of content, style, and rendering losses. A stage's output
becomes the next stage's content image; the style image stays fixed. The
content weight shrinks by the stage decay factor per stage while the render
weight grows by the same factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import ConfigError, NumericalError
from .features import FeatureExtractor, FeatureStack, draw_points, sample_hypercolumns
from .geometry import CameraPose, FaceMesh, TextureMap, _disk, uv_coverage_mask
from .losses import (
    LossWeights,
    content_loss,
    rendering_loss,
    style_loss,
    total_loss,
    uv_recon_loss,
)
from .raster import RasterMap, build_rastermap, erode_mask

DEFAULT_BASE_RES = 32


@dataclass
class LaplacianPyramid:
    """Coarse base plus band-pass residuals, coarse to fine."""

    base: torch.Tensor  # (1, 3, b, b)
    details: list[torch.Tensor]  # doubling resolution up to full size

    def parameters(self) -> list[torch.Tensor]:
        return [self.base, *self.details]


def _chw(image) -> torch.Tensor:
    x = image
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if x.ndim != 3 or x.shape[2] != 3:
        raise ConfigError(f"expected (H, W, 3) image, got {tuple(x.shape)}")
    return x.permute(2, 0, 1).unsqueeze(0)


def _hwc(x: torch.Tensor) -> torch.Tensor:
    return x[0].permute(1, 2, 0)


def decompose(image, base_res: int = DEFAULT_BASE_RES) -> LaplacianPyramid:
    """Blur-downsample / upsample-difference pyramid; exact right-inverse of
    reconstruct. Requires a square power-of-two side >= base_res."""
    x = _chw(image).to(torch.float64)
    side = x.shape[2]
    if x.shape[3] != side:
        raise ConfigError("pyramid input must be square")
    if side < base_res or (side & (side - 1)) != 0:
        raise ConfigError(f"side must be a power of two >= {base_res}, got {side}")
    details: list[torch.Tensor] = []
    while side > base_res:
        down = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
        up = F.interpolate(down, size=(side, side), mode="bilinear", align_corners=False)
        details.append(x - up)
        x = down
        side //= 2
    return LaplacianPyramid(base=x, details=details[::-1])


def reconstruct(pyr: LaplacianPyramid) -> torch.Tensor:
    """Invert decompose; returns an (H, W, 3) tensor on the autograd tape."""
    x = pyr.base
    for detail in pyr.details:
        size = (detail.shape[2], detail.shape[3])
        x = F.interpolate(x, size=size, mode="bilinear", align_corners=False) + detail
    return _hwc(x)


@dataclass
class StageSchedule:
    """Per-stage weights and optimizer settings."""

    num_stages: int = 5
    alpha: float = 8.0
    beta: float = 1.7
    gamma: float = 20.0
    stage_decay: float = 1.1
    scales: tuple[int, ...] = (256, 512)
    iterations: int = 150
    learning_rate: float = 0.3
    momentum: float = 0.9
    scale_decay: float = 0.5

    def __post_init__(self) -> None:
        self.scales = tuple(int(s) for s in self.scales)
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.scales or list(self.scales) != sorted(self.scales):
            raise ConfigError("scales must be ascending")
        for s in self.scales:
            if s < 64 or (s & (s - 1)) != 0:
                raise ConfigError(f"scale {s} must be a power of two >= 64")
        if self.stage_decay <= 0 or self.scale_decay <= 0:
            raise ConfigError("decay factors must be positive")

    def weights_for_stage(self, stage: int) -> LossWeights:
        """Stage is 1-based: alpha_i = alpha / d^(i-1), gamma_i = gamma * d^(i-1)."""
        if not 1 <= stage <= self.num_stages:
            raise ConfigError(f"stage {stage} outside 1..{self.num_stages}")
        k = self.stage_decay ** (stage - 1)
        return LossWeights(alpha=self.alpha / k, beta=self.beta, gamma=self.gamma * k)

    def weights_for_scale(self, stage: int, scale_index: int) -> LossWeights:
        w = self.weights_for_stage(stage)
        f = self.scale_decay**scale_index
        return LossWeights(alpha=w.alpha * f, beta=w.beta * f, gamma=w.gamma * f)


@dataclass
class StageContext:
    """Everything a stage needs besides the images."""

    extractor: FeatureExtractor
    rastermap: RasterMap
    render_mask: np.ndarray
    scales: tuple[int, ...]
    iterations: int
    learning_rate: float
    momentum: float
    scale_decay: float
    point_count: int
    seed: int
    stage_index: int = 1
    normalize_render: bool = True
    render_mode: str = "render"  # render | uv_recon | none
    use_content: bool = True
    use_style: bool = True
    base_res: int = DEFAULT_BASE_RES


@dataclass
class IterationRecord:
    scale: int
    iteration: int
    content: float
    remd_moment_color: float
    render: float
    total: float

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "iteration": self.iteration,
            "content": self.content,
            "style": self.remd_moment_color,
            "render": self.render,
            "total": self.total,
        }


@dataclass
class StageReport:
    stage: int
    weights: dict
    iterations: list[IterationRecord] = field(default_factory=list)
    aborted_at: tuple[int, int] | None = None  # (scale, iteration)

    @property
    def initial_render(self) -> float:
        return self.iterations[0].render if self.iterations else math.nan

    @property
    def final_render(self) -> float:
        return self.iterations[-1].render if self.iterations else math.nan

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "weights": self.weights,
            "aborted_at": list(self.aborted_at) if self.aborted_at else None,
            "initial_render": self.initial_render,
            "final_render": self.final_render,
            "iterations": [r.to_dict() for r in self.iterations],
        }


@dataclass
class RunReport:
    stages: list[StageReport] = field(default_factory=list)
    boundary_margin_px: int = 0

    @property
    def aborted(self) -> bool:
        return any(s.aborted_at is not None for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "aborted": self.aborted,
            "boundary_margin_px": self.boundary_margin_px,
            "stages": [s.to_dict() for s in self.stages],
        }


def _resize_image(x: torch.Tensor, side: int) -> torch.Tensor:
    """Area for shrinking, bilinear for growing; (H, W, 3) in and out."""
    cur = x.shape[0]
    if cur == side:
        return x
    chw = x.permute(2, 0, 1).unsqueeze(0)
    mode = "area" if side < cur else "bilinear"
    kwargs = {} if mode == "area" else {"align_corners": False}
    out = F.interpolate(chw, size=(side, side), mode=mode, **kwargs)
    return out[0].permute(1, 2, 0)


def _resize_mask(mask: np.ndarray, side: int) -> np.ndarray:
    if mask.shape[0] == side:
        return mask.astype(bool)
    t = torch.from_numpy(mask.astype(np.float64))[None, None]
    mode = "area" if side < mask.shape[0] else "bilinear"
    kwargs = {} if mode == "area" else {"align_corners": False}
    out = F.interpolate(t, size=(side, side), mode=mode, **kwargs)[0, 0]
    return (out >= 0.5).numpy()


def _fold_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) & 0x7FFFFFFF for k in keys]).generate_state(1)[0])


def _sample_pixels(image: torch.Tensor, points: np.ndarray) -> torch.Tensor:
    """Bilinear RGB samples of an (H, W, 3) tensor at image points."""
    stack = FeatureStack(
        levels=[image.permute(2, 0, 1)],
        layer_ids=("rgb",),
        image_size=(int(image.shape[1]), int(image.shape[0])),
    )
    return sample_hypercolumns(stack, points).vectors


def run_stage(
    content: TextureMap,
    style: TextureMap,
    mesh: FaceMesh,
    pose: CameraPose,
    input_image: np.ndarray,
    weights: LossWeights,
    ctx: StageContext,
) -> tuple[TextureMap, StageReport]:
    """One stage of two-scale SGD refinement; returns the clamped full-
    resolution texture (content's validity channel) and the stage report."""
    if content.resolution != style.resolution:
        raise ConfigError("content and style must share resolution")
    full_res = content.resolution
    report = StageReport(
        stage=ctx.stage_index,
        weights={"alpha": weights.alpha, "beta": weights.beta, "gamma": weights.gamma},
    )

    image_t = torch.from_numpy(np.ascontiguousarray(input_image, dtype=np.float64))
    x_full = torch.from_numpy(np.ascontiguousarray(content.pixels, dtype=np.float64))
    extract = ctx.extractor.extract

    for scale_index, scale in enumerate(ctx.scales):
        f = ctx.scale_decay**scale_index
        w_scale = LossWeights(weights.alpha * f, weights.beta * f, weights.gamma * f)

        content_s = _resize_image(
            torch.from_numpy(np.ascontiguousarray(content.pixels, dtype=np.float64)), scale
        )
        style_s = _resize_image(
            torch.from_numpy(np.ascontiguousarray(style.pixels, dtype=np.float64)), scale
        )
        content_mask = _resize_mask(content.validity, scale)
        style_mask = _resize_mask(style.validity, scale)
        with torch.no_grad():
            content_stack = extract(content_s)
            style_stack = extract(style_s)

        pyr = decompose(_resize_image(x_full, scale), base_res=min(ctx.base_res, scale))
        params = pyr.parameters()
        for p in params:
            p.requires_grad_(True)
        opt = torch.optim.SGD(params, lr=ctx.learning_rate, momentum=ctx.momentum)
        snapshot = [p.detach().clone() for p in params]

        for it in range(ctx.iterations):
            x = reconstruct(pyr)
            seed_it = _fold_seed(ctx.seed, ctx.stage_index, scale_index, it)
            try:
                pts_x = draw_points(content_mask, ctx.point_count, seed_it)
                pts_s = draw_points(style_mask, ctx.point_count, seed_it)

                stack_x = extract(x)
                hc_x = sample_hypercolumns(stack_x, pts_x)
                hc_c = sample_hypercolumns(content_stack, pts_x)
                hc_s = sample_hypercolumns(style_stack, pts_s)

                c_term = content_loss(hc_x, hc_c) if ctx.use_content else torch.zeros((), dtype=torch.float64)
                if ctx.use_style:
                    px_x = _sample_pixels(x, pts_x)
                    px_s = _sample_pixels(style_s, pts_s)
                    s_term = style_loss(hc_x, hc_s, px_x, px_s, alpha=w_scale.alpha)
                else:
                    s_term = torch.zeros((), dtype=torch.float64)

                if ctx.render_mode == "render":
                    rendered = ctx.rastermap.sample(x)
                    r_term = rendering_loss(rendered, image_t, ctx.render_mask, normalize=ctx.normalize_render)
                elif ctx.render_mode == "uv_recon":
                    r_term = uv_recon_loss(x, style_s, style_mask)
                elif ctx.render_mode == "none":
                    r_term = torch.zeros((), dtype=torch.float64)
                else:
                    raise ConfigError(f"unknown render_mode {ctx.render_mode!r}")

                loss = total_loss(c_term, s_term, r_term, w_scale)
            except NumericalError:
                report.aborted_at = (scale, it)
                with torch.no_grad():
                    for p, s in zip(params, snapshot):
                        p.copy_(s)
                break

            report.iterations.append(
                IterationRecord(
                    scale=scale,
                    iteration=it,
                    content=float(c_term.detach()),
                    remd_moment_color=float(s_term.detach()),
                    render=float(r_term.detach()),
                    total=float(loss.detach()),
                )
            )
            snapshot = [p.detach().clone() for p in params]
            opt.zero_grad()
            loss.backward()
            opt.step()

        with torch.no_grad():
            x_full = _resize_image(reconstruct(pyr).detach(), full_res)
        if report.aborted_at is not None:
            break

    pixels = x_full.clamp(0.0, 1.0).numpy()
    return TextureMap(pixels=pixels, validity=content.validity.copy()), report


def apply_boundary_mask(
    texture: TextureMap,
    content: TextureMap,
    margin_px: int,
    coverage: np.ndarray | None = None,
) -> TextureMap:
    """Replace pixels within margin_px of the UV coverage boundary with the
    pre-refinement content pixels (content-leak mitigation)."""
    if margin_px < 0:
        raise ConfigError("margin must be >= 0")
    if margin_px == 0:
        return TextureMap(texture.pixels.copy(), texture.validity.copy())
    cov = texture.validity if coverage is None else np.asarray(coverage).astype(bool)
    interior = ndimage.binary_erosion(cov, structure=_disk(margin_px))
    ring = cov & ~interior
    pixels = texture.pixels.copy()
    pixels[ring] = content.pixels[ring]
    return TextureMap(pixels=pixels, validity=texture.validity.copy())


def refine_texture(
    content: TextureMap,
    style: TextureMap,
    mesh: FaceMesh,
    pose: CameraPose,
    input_image: np.ndarray,
    schedule: StageSchedule,
    extractor: FeatureExtractor,
    point_count: int = 1024,
    master_seed: int = 0,
    normalize_render: bool = True,
    render_mode: str = "render",
    use_content: bool = True,
    use_style: bool = True,
    boundary_margin_px: int | None = None,
    checkpoint_dir=None,
    rastermap: RasterMap | None = None,
) -> tuple[TextureMap, RunReport]:
    """Chain the configured stages, feeding each stage's output into the next
    as content, then apply the boundary defaulting mask."""
    if schedule.scales[-1] != content.resolution:
        raise ConfigError(
            f"final scale {schedule.scales[-1]} must equal texture resolution {content.resolution}"
        )
    rm = rastermap if rastermap is not None else build_rastermap(mesh, pose)
    render_mask = erode_mask(rm.coverage_mask, 1)
    if boundary_margin_px is None:
        boundary_margin_px = max(1, round(4 * content.resolution / 512))

    report = RunReport(boundary_margin_px=boundary_margin_px)
    current = content
    for stage in range(1, schedule.num_stages + 1):
        ctx = StageContext(
            extractor=extractor,
            rastermap=rm,
            render_mask=render_mask,
            scales=schedule.scales,
            iterations=schedule.iterations,
            learning_rate=schedule.learning_rate,
            momentum=schedule.momentum,
            scale_decay=schedule.scale_decay,
            point_count=point_count,
            seed=master_seed,
            stage_index=stage,
            normalize_render=normalize_render,
            render_mode=render_mode,
            use_content=use_content,
            use_style=use_style,
        )
        current, stage_report = run_stage(
            current, style, mesh, pose, input_image, schedule.weights_for_stage(stage), ctx
        )
        report.stages.append(stage_report)
        if checkpoint_dir is not None:
            from .fileio import save_texture

            save_texture(checkpoint_dir, f"stage_{stage}", current)

    coverage = uv_coverage_mask(mesh, content.resolution)
    refined = apply_boundary_mask(current, content, boundary_margin_px, coverage=coverage)
    return refined, report
