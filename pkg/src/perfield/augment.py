"""Pose-space and appearance-space augmentation.

Novel poses are sampled by rejection: draw an interpolation factor s once,
then draw index pairs until both the rotation geodesic distance and the
squared translation distance fall below their thresholds, and blend the
accepted pair (geodesic rotation interpolation, linear translation). The
defaults (pi/24 radians, 0.5 squared world units) keep sampled views close
to observed ones, where rendering quality holds up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import Camera, intermediate_rotation, rotation_distance, translation_distance
from .grid import BackgroundModel, SparseVoxelGrid
from .renderer import RenderConfig, composite_foreground_background, render_image


class PoseSamplingError(RuntimeError):
    """No index pair satisfied the thresholds within max_attempts."""


@dataclass
class PoseSampleConfig:
    rotation_threshold: float = np.pi / 24.0
    translation_threshold: float = 0.5   # compared against the squared norm
    max_attempts: int = 10000
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rotation_threshold <= np.pi:
            raise ValueError("rotation_threshold must lie in (0, pi]")
        if not self.translation_threshold > 0:
            raise ValueError("translation_threshold must be positive")


def random_pose(rotations: np.ndarray, translations: np.ndarray,
                cfg: PoseSampleConfig,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample one camera-to-world pose between a close pair of train poses.

    Returns a 4x4 matrix with rotation intermediate_rotation(R_j, R_k, s)
    and translation s * t_k + (1 - s) * t_j. Raises PoseSamplingError when
    pose coverage is too sparse for any pair to qualify.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    translations = np.asarray(translations, dtype=np.float64)
    n = rotations.shape[0]
    if n < 2:
        raise ValueError("need at least two train poses")
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    s = float(rng.uniform(0.0, 1.0))
    for _ in range(cfg.max_attempts):
        j = int(rng.integers(0, n))
        k = int(rng.integers(0, n))
        if (rotation_distance(rotations[j], rotations[k]) < cfg.rotation_threshold
                and translation_distance(translations[j], translations[k])
                < cfg.translation_threshold):
            pose = np.eye(4)
            pose[:3, :3] = intermediate_rotation(rotations[j], rotations[k], s)
            pose[:3, 3] = s * translations[k] + (1.0 - s) * translations[j]
            return pose
    raise PoseSamplingError(
        f"no pose pair within thresholds after {cfg.max_attempts} attempts")


def random_intrinsics(cameras: list[Camera],
                      rng: np.random.Generator | None = None) -> Camera:
    """Pick one train camera's intrinsics and image shape verbatim."""
    if not cameras:
        raise ValueError("camera set must be nonempty")
    if rng is None:
        rng = np.random.default_rng(0)
    return cameras[int(rng.integers(0, len(cameras)))]


def sampled_camera(cameras: list[Camera], cfg: PoseSampleConfig,
                   rng: np.random.Generator) -> Camera:
    """Random pose plus randomly selected intrinsics from the train set."""
    rotations = np.stack([c.R for c in cameras])
    translations = np.stack([c.t for c in cameras])
    pose = random_pose(rotations, translations, cfg, rng)
    src = random_intrinsics(cameras, rng)
    return Camera(fx=src.fx, fy=src.fy, cx=src.cx, cy=src.cy,
                  width=src.width, height=src.height,
                  R=pose[:3, :3], t=pose[:3, 3], k1=src.k1, k2=src.k2)


def augment_background(grid_a: SparseVoxelGrid, bg_a: BackgroundModel,
                       bg_b: BackgroundModel, cam: Camera, cfg: RenderConfig,
                       probability: float = 0.5,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Render scene A, substituting scene B's background with the given probability."""
    if bg_a is None or bg_b is None:
        raise ValueError("both scenes must carry background models")
    if rng is None:
        rng = np.random.default_rng(0)
    if rng.uniform(0.0, 1.0) < probability:
        return composite_foreground_background(grid_a, bg_b, cam, cfg)
    return render_image(grid_a, bg_a, cam, cfg)


def manipulate_camera(cam: Camera, focal_scale: float = 1.0,
                      k1: float = 0.0, k2: float = 0.0) -> Camera:
    """Scale the focal lengths and replace the radial distortion coefficients."""
    if not focal_scale > 0:
        raise ValueError("focal_scale must be positive")
    return cam.replace(fx=cam.fx * focal_scale, fy=cam.fy * focal_scale,
                       k1=k1, k2=k2)


def poses_to_json(poses_with_cameras: list[tuple[np.ndarray, Camera]]) -> str:
    """Serialize sampled poses (with their source intrinsics) for render jobs."""
    items = []
    for pose, cam in poses_with_cameras:
        items.append({
            "pose": [[float(x) for x in row] for row in np.asarray(pose)],
            "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                           "k1": cam.k1, "k2": cam.k2,
                           "width": cam.width, "height": cam.height},
        })
    return json.dumps(items, indent=2, sort_keys=True) + "\n"


def cameras_from_pose_json(text: str) -> list[Camera]:
    items = json.loads(text)
    out = []
    for it in items:
        pose = np.asarray(it["pose"], dtype=np.float64)
        d = it["intrinsics"]
        out.append(Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                          width=int(d["width"]), height=int(d["height"]),
                          R=pose[:3, :3], t=pose[:3, 3],
                          k1=d.get("k1", 0.0), k2=d.get("k2", 0.0)))
    return out
