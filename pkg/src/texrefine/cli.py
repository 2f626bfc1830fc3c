"""Batch pipeline CLI.

Subcommands: prepare, refine, evaluate, diagnose-matching, fetch-weights,
report, batch. Configuration comes from a flat key-value file with dotted
keys plus repeatable --set key=value overrides (command line wins). Exit
codes: 0 success, 2 config error, 3 numerical failure, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, features, fileio, geometry, metrics, raster, refine
from .errors import ConfigError, MissingArtifactError, NumericalError, TexRefineError

# key -> (parser, default); None defaults mean "unset / auto".
_KEYS: dict[str, tuple] = {
    "paths.input_image": (str, None),
    "paths.mesh": (str, None),
    "paths.pose": (str, None),
    "paths.content_texture": (str, None),
    "paths.content_validity": (str, None),
    "paths.reference_texture": (str, None),
    "paths.output_dir": (str, None),
    "paths.weights_bundle": (str, None),
    "schedule.num_stages": (int, 5),
    "schedule.alpha": (float, 8.0),
    "schedule.beta": (float, 1.7),
    "schedule.gamma": (float, 20.0),
    "schedule.stage_decay": (float, 1.1),
    "schedule.scales": ("intlist", (256, 512)),
    "schedule.iterations": (int, 150),
    "schedule.learning_rate": (float, 0.3),
    "schedule.momentum": (float, 0.9),
    "schedule.scale_decay": (float, 0.5),
    "morph.open_radius": (int, None),
    "morph.close_radius": (int, None),
    "points.count": (int, 1024),
    "seed": (int, 0),
    "uv.resolution": (int, 512),
    "features.layers": (str, "default"),
    "features.expected_channels": (int, None),
    "flags.normalize_render_loss": (bool, True),
    "flags.boundary_margin_px": (int, None),
    "flags.render_mode": (str, "render"),
    "diagnose.points": (str, None),
}


def _parse_value(key: str, raw: str):
    kind = _KEYS[key][0]
    raw = raw.strip()
    if raw.lower() in ("none", "auto", ""):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if kind == "intlist":
        try:
            return tuple(int(v) for v in raw.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"{key}: expected integers, got {raw!r}") from exc
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        merged = {k: default for k, (_, default) in _KEYS.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key: str):
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self[key]
        if value is None:
            if required:
                raise ConfigError(f"config key {key} is required")
            return None
        return Path(value)

    def existing_path(self, key: str) -> Path:
        p = self.path(key)
        if not p.exists():
            raise MissingArtifactError(f"{key}: file not found: {p}")
        return p

    def canonical(self) -> dict:
        out = {}
        for key in sorted(_KEYS):
            v = self.values[key]
            out[key] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, val = item.partition("=")
        key = key.strip()
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _parse_value(key, val)
    if getattr(args, "output_dir", None):
        values["paths.output_dir"] = args.output_dir
    if getattr(args, "stages", None) is not None:
        values["schedule.num_stages"] = args.stages
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "weights", None):
        values["paths.weights_bundle"] = args.weights
    return RunConfig(values)


def _feature_layers(config: RunConfig) -> tuple[str, ...]:
    spec = config["features.layers"]
    if spec in (None, "default"):
        layers = features.DEFAULT_LAYERS
    elif spec == "reduced":
        layers = features.REDUCED_LAYERS
    else:
        layers = tuple(s.strip() for s in spec.replace(",", " ").split())
    expected = config["features.expected_channels"]
    if expected is None and layers == features.DEFAULT_LAYERS:
        expected = features.DEFAULT_TOTAL_CHANNELS
    actual = features.total_channels(layers)
    if expected is not None and actual != expected:
        raise ConfigError(
            f"feature layer selection yields {actual} channels, expected {expected}"
        )
    return layers


def _weights_path(config: RunConfig) -> Path:
    configured = config["paths.weights_bundle"]
    return features.resolve_weights_path(configured)


def _morph_radii(config: RunConfig, uv_res: int) -> tuple[int, int]:
    auto = geometry.default_morph_radii(uv_res)
    open_r = config["morph.open_radius"]
    close_r = config["morph.close_radius"]
    return (auto[0] if open_r is None else open_r, auto[1] if close_r is None else close_r)


def _write_manifest(config: RunConfig, out_dir: Path, name: str, extra: dict | None = None) -> None:
    payload = {
        "version": __version__,
        "config": config.canonical(),
        "config_hash": config.config_hash(),
        "seed": config["seed"],
    }
    weights = config["paths.weights_bundle"]
    if weights and Path(weights).exists():
        payload["weights_sha256"] = features.file_sha256(weights)
    if extra:
        payload.update(extra)
    fileio.write_json(out_dir / name, payload)


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise ConfigError(f"refusing to overwrite {path} without --force")


def _load_scene(config: RunConfig):
    mesh = geometry.load_obj(config.existing_path("paths.mesh"))
    pose = geometry.load_pose(config.existing_path("paths.pose"))
    image = fileio.load_image(config.existing_path("paths.input_image"))
    h, w = image.shape[:2]
    if (w, h) != pose.image_size:
        raise ConfigError(
            f"input image {w}x{h} does not match pose image_size {pose.image_size}"
        )
    return geometry.compute_vertex_normals(mesh), pose, image


def cmd_prepare(config: RunConfig, force: bool = False) -> int:
    out_dir = config.path("paths.output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite(out_dir / "style.png", force)

    mesh, pose, image = _load_scene(config)
    uv_res = config["uv.resolution"]
    xy, z = pose.project(mesh.vertices)
    w, h = pose.image_size
    on_image = (z > 0) & (xy[:, 0] >= 0) & (xy[:, 0] < w) & (xy[:, 1] >= 0) & (xy[:, 1] < h)
    if not on_image.any():
        raise ConfigError("mesh projects entirely off the input image; check mesh/pose/image")

    style = geometry.sample_style_image(
        image, mesh, pose, uv_res, morph_radii=_morph_radii(config, uv_res)
    )
    mask = raster.face_mask(mesh, pose)
    fileio.save_texture(out_dir, "style", style)
    fileio.save_mask(out_dir / "face_mask.png", mask)
    _write_manifest(config, out_dir, "prepare_manifest.json")
    print(f"prepare: wrote style texture ({style.validity.mean():.3f} valid) to {out_dir}")
    return 0


def _load_or_prepare_style(config: RunConfig, mesh, pose, image) -> geometry.TextureMap:
    out_dir = config.path("paths.output_dir")
    style_px = out_dir / "style.png"
    if style_px.exists():
        return fileio.load_texture(style_px, out_dir / "style_validity.png")
    uv_res = config["uv.resolution"]
    style = geometry.sample_style_image(
        image, mesh, pose, uv_res, morph_radii=_morph_radii(config, uv_res)
    )
    fileio.save_texture(out_dir, "style", style)
    fileio.save_mask(out_dir / "face_mask.png", raster.face_mask(mesh, pose))
    return style


def _schedule_from(config: RunConfig) -> refine.StageSchedule:
    return refine.StageSchedule(
        num_stages=config["schedule.num_stages"],
        alpha=config["schedule.alpha"],
        beta=config["schedule.beta"],
        gamma=config["schedule.gamma"],
        stage_decay=config["schedule.stage_decay"],
        scales=tuple(config["schedule.scales"]),
        iterations=config["schedule.iterations"],
        learning_rate=config["schedule.learning_rate"],
        momentum=config["schedule.momentum"],
        scale_decay=config["schedule.scale_decay"],
    )


def cmd_refine(config: RunConfig, force: bool = False) -> int:
    out_dir = config.path("paths.output_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    _refuse_overwrite(out_dir / "refined.png", force)

    mesh, pose, image = _load_scene(config)
    uv_res = config["uv.resolution"]
    schedule = _schedule_from(config)
    if schedule.scales[-1] != uv_res:
        raise ConfigError(
            f"schedule.scales must end at uv.resolution ({uv_res}), got {schedule.scales}"
        )
    style = _load_or_prepare_style(config, mesh, pose, image)
    if style.resolution != uv_res:
        raise ConfigError(f"style texture is {style.resolution}, expected {uv_res}")

    content = fileio.load_texture(
        config.existing_path("paths.content_texture"),
        config.path("paths.content_validity", required=False),
    )
    if content.resolution != uv_res:
        raise ConfigError(f"content texture is {content.resolution}, expected {uv_res}")

    extractor = features.FeatureExtractor.from_bundle(
        _weights_path(config), layers=_feature_layers(config)
    )
    refined, report = refine.refine_texture(
        content,
        style,
        mesh,
        pose,
        image,
        schedule,
        extractor,
        point_count=config["points.count"],
        master_seed=config["seed"],
        normalize_render=config["flags.normalize_render_loss"],
        render_mode=config["flags.render_mode"],
        boundary_margin_px=config["flags.boundary_margin_px"],
        checkpoint_dir=out_dir,
    )
    fileio.save_texture(out_dir, "refined", refined)
    fileio.write_json(out_dir / "run_report.json", report.to_dict())
    _write_manifest(config, out_dir, "manifest.json")
    if report.aborted:
        where = [(s.stage, s.aborted_at) for s in report.stages if s.aborted_at]
        print(f"refine: aborted on non-finite loss at stage/scale/iteration {where}", file=sys.stderr)
        return 3
    final = report.stages[-1]
    print(
        f"refine: {schedule.num_stages} stages done; render loss "
        f"{report.stages[0].initial_render:.5f} -> {final.final_render:.5f}; wrote {out_dir}/refined.png"
    )
    return 0


def cmd_evaluate(config: RunConfig, force: bool = False) -> int:
    out_dir = config.path("paths.output_dir")
    refined_path = out_dir / "refined.png"
    if not refined_path.exists():
        raise MissingArtifactError(f"refined texture not found: {refined_path}; run refine first")
    _refuse_overwrite(out_dir / "eval_report.json", force)

    mesh, pose, image = _load_scene(config)
    refined = fileio.load_texture(refined_path, out_dir / "refined_validity.png")

    report = metrics.EvalReport(protocol="reprojected")
    report.records.append(metrics.evaluate_reprojected(refined, mesh, pose, image, record_id="refined"))
    reference = config.path("paths.reference_texture", required=False)
    uv_report = None
    if reference is not None:
        ref = fileio.load_texture(reference)
        style_val_path = out_dir / "style_validity.png"
        mask = fileio.load_mask(style_val_path) if style_val_path.exists() else None
        uv_report = metrics.EvalReport(protocol="uv")
        uv_report.records.append(metrics.evaluate_uv(refined, ref, record_id="refined", mask=mask))

    metrics.write_report_json(out_dir / "eval_report.json", report)
    metrics.write_report_csv(out_dir / "eval_report.csv", report)
    if uv_report is not None:
        metrics.write_report_json(out_dir / "eval_report_uv.json", uv_report)
    agg = report.aggregates()
    print(f"evaluate: psnr {agg['mean_psnr']:.4g} dB, ssim {agg['mean_ssim']:.4g}, mae {agg['mean_mae']:.4g}")
    return 0


_DEFAULT_LANDMARKS = ((0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.35, 0.7), (0.65, 0.7), (0.04, 0.04))
_LANDMARK_COLORS = (
    (1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.3, 1.0),
    (1.0, 1.0, 0.0), (0.0, 1.0, 1.0), (1.0, 0.4, 0.8),
)


def _parse_landmarks(spec: str | None, resolution: int) -> np.ndarray:
    if spec is None:
        rel = np.array(_DEFAULT_LANDMARKS)
    else:
        try:
            rel = np.array(
                [[float(v) for v in pair.split(",")] for pair in spec.split(";") if pair.strip()]
            )
        except ValueError as exc:
            raise ConfigError(f"diagnose.points: cannot parse {spec!r}") from exc
    return rel * resolution


def _mark(image: np.ndarray, x: float, y: float, color, half: int = 2) -> None:
    h, w = image.shape[:2]
    r, c = int(round(y)), int(round(x))
    image[max(r - half, 0) : r + half + 1, max(c - half, 0) : c + half + 1] = color


def cmd_diagnose_matching(config: RunConfig, force: bool = False) -> int:
    out_dir = config.path("paths.output_dir")
    style_path = out_dir / "style.png"
    if not style_path.exists():
        raise MissingArtifactError(f"style texture not found: {style_path}; run prepare first")
    checkpoints = sorted(out_dir.glob("stage_*.png"), key=lambda p: int(p.stem.split("_")[1]))
    if not checkpoints:
        raise MissingArtifactError(
            f"no stage checkpoints in {out_dir} (expected stage_1.png ...); run refine first"
        )
    _refuse_overwrite(out_dir / "matching_report.json", force)

    style = fileio.load_texture(style_path, out_dir / "style_validity.png")
    res = style.resolution
    landmarks = _parse_landmarks(config["diagnose.points"], res)
    extractor = features.FeatureExtractor.from_bundle(
        _weights_path(config), layers=_feature_layers(config)
    )
    style_stack = extractor.extract(style.pixels)
    style_hc = features.sample_hypercolumns(style_stack, landmarks)

    # Dense candidate grid over the checkpoint texture.
    step = max(res // 64, 2)
    grid = np.arange(step / 2.0, res, step)
    gx, gy = np.meshgrid(grid, grid)
    candidates = np.stack([gx.ravel(), gy.ravel()], axis=-1)

    rows = []
    for ckpt in checkpoints:
        tex = fileio.load_texture(ckpt)
        stack = extractor.extract(tex.pixels)
        out_hc = features.sample_hypercolumns(stack, candidates)
        matched = features.match_points(style_hc, out_hc)

        overlay_style = style.pixels.copy()
        overlay_out = tex.pixels.copy()
        for k, (pt, m) in enumerate(zip(landmarks, matched)):
            color = _LANDMARK_COLORS[k % len(_LANDMARK_COLORS)]
            _mark(overlay_style, pt[0], pt[1], color)
            _mark(overlay_out, candidates[m, 0], candidates[m, 1], color)
        fileio.save_image(out_dir / f"matching_{ckpt.stem}.png", np.concatenate([overlay_style, overlay_out], axis=1))

        for k, (pt, m) in enumerate(zip(landmarks, matched)):
            x, y = candidates[m]
            valid = bool(style.validity[min(int(pt[1]), res - 1), min(int(pt[0]), res - 1)])
            rows.append(
                {
                    "checkpoint": ckpt.stem,
                    "point_index": k,
                    "style_point": [float(pt[0]), float(pt[1])],
                    "style_point_valid": valid,
                    "matched_point": [float(x), float(y)],
                }
            )
    fileio.write_json(out_dir / "matching_report.json", {"points": rows})
    print(f"diagnose-matching: {len(landmarks)} points x {len(checkpoints)} checkpoints -> {out_dir}")
    return 0


def cmd_fetch_weights(config: RunConfig, untrained: bool = False, seed: int = 0) -> int:
    path = _weights_path(config)
    if untrained:
        checksum = features.make_untrained_bundle(path, seed=seed)
        print(f"fetch-weights: wrote untrained bundle {path} (sha256 {checksum[:12]})")
        return 0
    checksum = features.fetch_weights(path)
    print(f"fetch-weights: wrote {path} (sha256 {checksum[:12]})")
    return 0


def _fit_panel(img: np.ndarray, side: int) -> np.ndarray:
    from PIL import Image

    arr = (np.clip(img, 0, 1) * 255).round().astype(np.uint8)
    out = Image.fromarray(arr).resize((side, side), Image.BILINEAR)
    return np.asarray(out, dtype=np.float64) / 255.0


def cmd_report(config: RunConfig, force: bool = False) -> int:
    out_dir = config.path("paths.output_dir")
    refined_path = out_dir / "refined.png"
    if not refined_path.exists():
        raise MissingArtifactError(f"refined texture not found: {refined_path}; run refine first")
    _refuse_overwrite(out_dir / "comparison.png", force)

    mesh, pose, image = _load_scene(config)
    refined = fileio.load_texture(refined_path, out_dir / "refined_validity.png")
    content = fileio.load_texture(
        config.existing_path("paths.content_texture"),
        config.path("paths.content_validity", required=False),
    )
    rendered = raster.render(mesh, refined, pose).pixels
    side = 256
    grid = np.concatenate(
        [_fit_panel(p, side) for p in (image, content.pixels, refined.pixels, rendered)], axis=1
    )
    fileio.save_image(out_dir / "comparison.png", grid)
    print(f"report: wrote {out_dir}/comparison.png (input | content | refined | rendered)")
    return 0


def cmd_batch(jobs_file: str, force: bool = False, workers: int | None = None) -> int:
    jobs_path = Path(jobs_file)
    if not jobs_path.exists():
        raise MissingArtifactError(f"job list not found: {jobs_path}")
    jobs = [line.strip() for line in jobs_path.read_text().splitlines() if line.strip() and not line.strip().startswith("#")]
    if not jobs:
        raise ConfigError(f"{jobs_path}: no jobs")
    statuses = []
    if workers is None:
        workers = 1
    if workers <= 1:
        for job in jobs:
            config = RunConfig(load_config_file(job))
            statuses.append(cmd_refine(config, force=force))
    else:
        import concurrent.futures as cf

        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_batch_worker, job, force) for job in jobs]
            statuses = [f.result() for f in futures]
    bad = [s for s in statuses if s != 0]
    print(f"batch: {len(jobs) - len(bad)}/{len(jobs)} jobs succeeded")
    return max(statuses) if bad else 0


def _batch_worker(job: str, force: bool) -> int:
    config = RunConfig(load_config_file(job))
    return cmd_refine(config, force=force)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--output-dir", help="shorthand for paths.output_dir")
    p.add_argument("--stages", type=int, help="shorthand for schedule.num_stages")
    p.add_argument("--seed", type=int, help="shorthand for seed")
    p.add_argument("--weights", help="shorthand for paths.weights_bundle")
    p.add_argument("--force", action="store_true", help="allow overwriting existing outputs")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="texrefine", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("prepare", "refine", "evaluate", "diagnose-matching", "report"):
        p = sub.add_parser(name)
        _add_common(p)
    p = sub.add_parser("fetch-weights")
    _add_common(p)
    p.add_argument("--untrained", action="store_true", help="write a seeded random bundle (offline smoke runs)")
    p.add_argument("--untrained-seed", type=int, default=0)
    p = sub.add_parser("batch")
    p.add_argument("jobs_file", help="text file with one refine config path per line")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--force", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "batch":
            return cmd_batch(args.jobs_file, force=args.force, workers=args.workers)
        config = build_config(args)
        if args.command == "prepare":
            return cmd_prepare(config, force=args.force)
        if args.command == "refine":
            return cmd_refine(config, force=args.force)
        if args.command == "evaluate":
            return cmd_evaluate(config, force=args.force)
        if args.command == "diagnose-matching":
            return cmd_diagnose_matching(config, force=args.force)
        if args.command == "report":
            return cmd_report(config, force=args.force)
        if args.command == "fetch-weights":
            return cmd_fetch_weights(config, untrained=args.untrained, seed=args.untrained_seed)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
