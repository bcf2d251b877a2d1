"""Batch command-line interface.

Subcommands: ingest, train, render, eval, pose-sample, augment-bg, info.
Outputs land under --out with fixed names (see README). Exit codes:
2 usage error, 3 defective scene, 4 training divergence, 5 runtime/I-O
error. Verbosity is controlled by the PERFIELD_LOG environment variable.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import augment, pipeline, serialization, synthetic
from .grid import dense_grid, make_background
from .images import atomic_write_text, load_image_rgb, save_float32, save_image_png
from .pipeline import DefectiveSceneError, SceneManifest, load_manifest, save_manifest
from .renderer import RenderConfig, render_image
from .trainer import DivergenceError, TrainConfig, train

log = logging.getLogger("perfield")

EXIT_DEFECTIVE = 3
EXIT_DIVERGENCE = 4
EXIT_RUNTIME = 5

PROFILES = {
    "object": dict(resolution=128, total_steps=76800, upsample_at=25600,
                   prune_at=25600, fg_skip_steps=1000, background=True),
    "indoor": dict(resolution=256, total_steps=51200, upsample_at=0,
                   prune_at=25600, fg_skip_steps=0, background=False),
}


def derive_world_bounds(cameras) -> tuple[np.ndarray, np.ndarray]:
    """Cube around the least-squares intersection of the optical axes."""
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for cam in cameras:
        d = cam.R @ np.array([0.0, 0.0, 1.0])
        P = np.eye(3) - np.outer(d, d)
        A += P
        b += P @ cam.t
    try:
        center = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        center = np.mean([c.t for c in cameras], axis=0)
    half = 0.7 * float(np.median([np.linalg.norm(c.t - center) for c in cameras]))
    half = max(half, 1e-3)
    return center - half, center + half


def _cameras_for_render(args) -> list:
    if getattr(args, "poses", None):
        return augment.cameras_from_pose_json(Path(args.poses).read_text())
    manifest = load_manifest(args.manifest)
    split = getattr(args, "split", "test")
    if split == "all":
        frames = manifest.frames
    elif split == "train":
        frames = manifest.train_frames()
    else:
        frames = manifest.test_frames()
    return [f.camera for f in frames]


def cmd_ingest(args) -> int:
    manifest = load_manifest(args.manifest)
    manifest = pipeline.select_frames(manifest, max_frames=args.max_frames,
                                      blur_threshold=args.blur_threshold)
    manifest = pipeline.assign_splits(manifest, seed=args.seed)
    manifest.validate_split()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.json")
    log.info("ingested %d frames (%d test) for scene %s",
             len(manifest.frames), len(manifest.test_frames()), manifest.scene_id)
    return 0


def _train_config_for(args, profile: dict) -> TrainConfig:
    total = args.steps if args.steps else profile["total_steps"]
    scale = total / profile["total_steps"]

    def scaled(v):
        return int(round(v * scale)) if v else 0

    return TrainConfig(
        total_steps=total,
        upsample_at=scaled(profile["upsample_at"]),
        prune_at=scaled(profile["prune_at"]),
        fg_skip_steps=scaled(profile["fg_skip_steps"]),
        prune_threshold=args.prune_threshold,
        rays_per_batch=args.rays_per_batch,
        optimizer=args.optimizer,
        rng_seed=args.seed,
    )


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    profile = dict(PROFILES[args.profile])
    if args.resolution:
        profile["resolution"] = args.resolution
    cfg = _train_config_for(args, profile)
    train_frames = manifest.train_frames()
    cameras = [f.camera for f in train_frames]
    images = [load_image_rgb(f.image_path) for f in train_frames]

    if args.profile == "indoor":
        missing = [f for f in train_frames if f.depth_path is None]
        if missing:
            raise ValueError("indoor profile requires depth maps for every train frame")
        points = []
        for f in train_frames:
            from .images import load_depth_png
            points.append(pipeline.unproject_depth(f.camera, load_depth_png(f.depth_path)))
        points = np.concatenate(points)
        points = pipeline.filter_connected_components(points)
        grid = pipeline.init_grid_from_points(points, resolution=profile["resolution"])
        bg = None
    else:
        if manifest.world_bounds is not None:
            wmin, wmax = manifest.world_bounds
        else:
            wmin, wmax = derive_world_bounds(cameras)
        grid = dense_grid((profile["resolution"],) * 3, wmin, wmax)
        bg = make_background(grid, n_layers=args.bg_layers,
                             layer_resolution=args.bg_resolution) \
            if profile["background"] else None

    render_cfg = RenderConfig(step_size=args.step_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    grid, bg, rows, _ = train(cameras, images, grid, bg, cfg, render_cfg,
                              log_path=out / "loss_log.csv")
    train_time = time.perf_counter() - t0

    scene = serialization.quantize(grid, bg)
    container = out / f"{manifest.scene_id}.prfx"
    serialization.write(scene, container)

    # held-out metrics on float renders, before any 8-bit quantization
    psnrs = []
    ssims = []
    for f in manifest.test_frames():
        rendered = render_image(grid, bg, f.camera, render_cfg, workers=args.workers)
        target = load_image_rgb(f.image_path)
        psnrs.append(pipeline.psnr(rendered, target))
        ssims.append(pipeline.ssim(rendered, target))
    file_bytes = os.path.getsize(container)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["scene_id", "psnr", "ssim", "train_time_s", "n_voxels", "file_bytes"])
    w.writerow([manifest.scene_id,
                f"{np.mean(psnrs):.4f}" if psnrs else "nan",
                f"{np.mean(ssims):.6f}" if ssims else "nan",
                f"{train_time:.2f}", grid.slot_count, file_bytes])
    atomic_write_text(buf.getvalue(), out / "metrics.csv")
    log.info("trained %s: %d voxels, psnr %.2f", manifest.scene_id,
             grid.slot_count, float(np.mean(psnrs)) if psnrs else float("nan"))
    return 0


def cmd_render(args) -> int:
    grid, bg = serialization.load_scene(args.scene)
    cams = _cameras_for_render(args)
    cfg = RenderConfig(step_size=args.step_size,
                       background_brightness=args.background_brightness)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        img = render_image(grid, bg, cam, cfg, workers=args.workers)
        save_image_png(img, out / f"render_{i:04d}.png")
        if args.float:
            save_float32(img, out / f"render_{i:04d}.npy")
    log.info("rendered %d views to %s", len(cams), out)
    return 0


def cmd_eval(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png")
                   if (gt_dir / p.name).exists())
    if not names:
        raise ValueError("no matching image pairs between --pred and --gt")
    rows = []
    for name in names:
        a = load_image_rgb(pred_dir / name)
        b = load_image_rgb(gt_dir / name)
        rows.append((name, pipeline.psnr(a, b), pipeline.ssim(a, b)))
    finite = [r[1] for r in rows if np.isfinite(r[1])]
    mean_psnr = float(np.mean(finite)) if finite else float("inf")
    summary = {
        "n_pairs": len(rows),
        "mean_psnr": mean_psnr,
        "mean_ssim": float(np.mean([r[2] for r in rows])),
        "frac_psnr_gt_15": float(np.mean([r[1] > 15 for r in rows])),
        "frac_psnr_gt_20": float(np.mean([r[1] > 20 for r in rows])),
        "frac_psnr_gt_25": float(np.mean([r[1] > 25 for r in rows])),
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["name", "psnr", "ssim"])
        for name, p, s in rows:
            w.writerow([name, "inf" if np.isinf(p) else f"{p:.4f}", f"{s:.6f}"])
        atomic_write_text(buf.getvalue(), args.out)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_pose_sample(args) -> int:
    manifest = load_manifest(args.manifest, require_files=False)
    cams = [f.camera for f in manifest.train_frames()]
    rng = np.random.default_rng(args.seed)
    cfg = augment.PoseSampleConfig(rng_seed=args.seed)
    sampled = []
    for _ in range(args.n):
        cam = augment.sampled_camera(cams, cfg, rng)
        sampled.append((cam.pose_matrix(), cam))
    text = augment.poses_to_json(sampled)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        atomic_write_text(text, args.out)
    else:
        print(text, end="")
    return 0


def cmd_augment_bg(args) -> int:
    grid_a, bg_a = serialization.load_scene(args.scene_a)
    _, bg_b = serialization.load_scene(args.scene_b)
    if bg_a is None or bg_b is None:
        raise ValueError("both scenes must contain background models")
    cams = _cameras_for_render(args)
    cfg = RenderConfig(step_size=args.step_size)
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cams):
        img = augment.augment_background(grid_a, bg_a, bg_b, cam, cfg,
                                         probability=args.bg_prob, rng=rng)
        save_image_png(img, out / f"augmented_{i:04d}.png")
    log.info("wrote %d augmented renders to %s", len(cams), out)
    return 0


def cmd_info(args) -> int:
    scene = serialization.read(args.scene)
    report = serialization.storage_report(scene)
    report["file_bytes_on_disk"] = os.path.getsize(args.scene)
    report["resolution"] = list(scene.resolution)
    report["has_background"] = scene.background is not None
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def _add_common_render_flags(p):
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--step-size", type=float, default=0.5)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perfield",
                                 description="sparse-voxel radiance field tooling")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="filter frames and freeze the split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-frames", type=int, default=pipeline.DEFAULT_MAX_FRAMES)
    p.add_argument("--blur-threshold", type=float, default=pipeline.DEFAULT_BLUR_THRESHOLD)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="optimize a scene and write the container")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="object")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=0, help="override total steps")
    p.add_argument("--resolution", type=int, default=0)
    p.add_argument("--prune-threshold", type=float, default=1.28)
    p.add_argument("--rays-per-batch", type=int, default=5000)
    p.add_argument("--optimizer", choices=["sgd", "rmsprop"], default="rmsprop")
    p.add_argument("--bg-layers", type=int, default=16)
    p.add_argument("--bg-resolution", type=int, default=512)
    _add_common_render_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render views from a trained container")
    p.add_argument("--scene", required=True)
    p.add_argument("--manifest")
    p.add_argument("--poses", help="JSON pose list from pose-sample")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--float", action="store_true", help="also write float32 arrays")
    p.add_argument("--background-brightness", type=float, default=0.5)
    _add_common_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM between two image directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="per-pair CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pose-sample", help="sample novel poses near the train set")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pose_sample)

    p = sub.add_parser("augment-bg", help="render with substituted backgrounds")
    p.add_argument("--scene-a", required=True)
    p.add_argument("--scene-b", required=True)
    p.add_argument("--manifest")
    p.add_argument("--poses")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--bg-prob", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    _add_common_render_flags(p)
    p.set_defaults(func=cmd_augment_bg)

    p = sub.add_parser("info", help="container storage breakdown")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_info)

    return ap


def main(argv=None) -> int:
    level = os.environ.get("PERFIELD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except DefectiveSceneError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DEFECTIVE
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, ValueError, RuntimeError, serialization.ContainerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
