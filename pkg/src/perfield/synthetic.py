"""Bundled analytic test scene: a colored axis-aligned cube on a gray field.

Ground-truth images come from closed-form ray/box intersection (no voxels
anywhere in the path), supersampled per pixel so edges are band-limited the
way a converged volumetric render is. Sixteen cameras sit on a circle
looking at the origin; two of them are held out as the test split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, look_at_camera
from .grid import SparseVoxelGrid, dense_grid
from .images import save_image_png
from .pipeline import Frame, SceneManifest, save_manifest
from .trainer import TrainConfig

CUBE_HALF = 0.45
WORLD_MIN = np.array([-0.8, -0.8, -0.8])
WORLD_MAX = np.array([0.8, 0.8, 0.8])
BACKGROUND = 0.5

# +x, -x, +y, -y, +z, -z
FACE_COLORS = np.array([
    [0.85, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.75, 0.20],
    [0.80, 0.25, 0.80],
    [0.20, 0.80, 0.80],
])


def cube_cameras(n_cameras: int = 16, image_size: int = 100,
                 radius: float = 2.7, height: float = 0.9,
                 focal: float | None = None) -> list[Camera]:
    if focal is None:
        focal = 1.4 * image_size
    cams = []
    for i in range(n_cameras):
        phi = 2.0 * np.pi * i / n_cameras
        pos = np.array([radius * np.cos(phi), radius * np.sin(phi), height])
        cams.append(look_at_camera(pos, (0.0, 0.0, 0.0), (0.0, 0.0, 1.0),
                                   fx=focal, fy=focal,
                                   cx=image_size / 2.0, cy=image_size / 2.0,
                                   width=image_size, height=image_size))
    return cams


def render_cube_analytic(cam: Camera, supersample: int = 3,
                         cube_half: float = CUBE_HALF,
                         background: float = BACKGROUND) -> np.ndarray:
    """Closed-form render of the cube: first hit face color, else background."""
    ss = supersample
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    sub = (np.arange(ss) + 0.5) / ss
    uu = (u[:, None] + sub[None, :]).reshape(-1)   # width * ss
    vv = (v[:, None] + sub[None, :]).reshape(-1)   # height * ss
    gu, gv = np.meshgrid(uu, vv)
    x = (gu - cam.cx) / cam.fx
    y = (gv - cam.cy) / cam.fy
    dirs = np.stack([x, y, np.ones_like(x)], axis=-1) @ cam.R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    o = cam.t

    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    ta = (-cube_half - o) * inv
    tb = (cube_half - o) * inv
    t_lo = np.minimum(ta, tb)
    t_hi = np.maximum(ta, tb)
    t0 = t_lo.max(axis=-1)
    t1 = t_hi.min(axis=-1)
    hit = (t0 < t1) & (t1 > 0)
    axis = t_lo.argmax(axis=-1)
    d_at_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
    face = axis * 2 + (d_at_axis > 0).astype(int)  # entering -face when d > 0
    img = np.full(gu.shape + (3,), background)
    img[hit] = FACE_COLORS[face[hit]]
    # average the subpixel grid back to pixel resolution
    img = img.reshape(cam.height, ss, cam.width, ss, 3).mean(axis=(1, 3))
    return img


@dataclass
class CubeScene:
    cameras: list[Camera]
    images: list[np.ndarray]
    train_idx: list[int]
    test_idx: list[int]

    def train(self):
        return ([self.cameras[i] for i in self.train_idx],
                [self.images[i] for i in self.train_idx])

    def test(self):
        return ([self.cameras[i] for i in self.test_idx],
                [self.images[i] for i in self.test_idx])


def cube_scene(n_cameras: int = 16, image_size: int = 100,
               supersample: int = 3) -> CubeScene:
    cams = cube_cameras(n_cameras, image_size)
    images = [render_cube_analytic(c, supersample) for c in cams]
    test_idx = [i for i in range(n_cameras) if i % 8 == 3][:max(1, n_cameras // 8)]
    train_idx = [i for i in range(n_cameras) if i not in test_idx]
    return CubeScene(cams, images, train_idx, test_idx)


def cube_grid(resolution: int = 64, sigma0: float = 0.1,
              color_jitter: float = 0.5, seed: int = 0) -> SparseVoxelGrid:
    """Dense init with seeded jitter on the SH DC coefficients.

    The jitter breaks the gray-start symmetry: with uniform colors equal to
    the background, the density gradient of the rendering loss is exactly
    zero, so nothing can begin to move.
    """
    g = dense_grid((resolution,) * 3, WORLD_MIN, WORLD_MAX, sigma0=sigma0)
    if color_jitter > 0:
        rng = np.random.default_rng(seed)
        g.sh[:, [0, 9, 18]] = rng.normal(0.0, color_jitter, (g.slot_count, 3))
    return g


CUBE_START_RESOLUTION = 16


def cube_train_config(total_steps: int = 5000, seed: int = 7) -> TrainConfig:
    """Training recipe for the bundled cube scene (no background model).

    Coarse-to-fine: 16^3 for the first fifth, 32^3 to the halfway mark, then
    64^3, pruning once at the first boundary. RMSprop drives the bootstrap
    from the gray start; the degree >= 1 SH coefficients get a much smaller
    rate so view-dependence only grows where the data demands it, and the
    rates step down 50x after the final upsample to polish.
    """
    f = total_steps / 5000.0

    def at(step):
        return max(1, int(round(step * f)))

    return TrainConfig(
        total_steps=total_steps,
        rays_per_batch=2000,
        prune_at=(at(1000),),
        prune_threshold=1.28,
        upsample_at=(at(1000), at(2500)),
        fg_skip_steps=0,
        optimizer="rmsprop",
        lr_density=10.0,
        lr_sh=5e-2,
        lr_sh_bands=2e-4,
        lambda_tv_density=1e-9,
        lambda_tv_sh=1e-7,
        lr_decay_at=at(2500),
        lr_decay_factor=0.02,
        sparsity_samples=4096,
        rng_seed=seed,
    )


def cube_recipe(total_steps: int = 5000, seed: int = 7):
    """Starting grid plus training config; the trained grid ends at 64^3."""
    return cube_grid(resolution=CUBE_START_RESOLUTION), cube_train_config(total_steps, seed)


def materialize(directory, scene: CubeScene | None = None,
                scene_id: str = "cube") -> str:
    """Write the scene to disk as PNGs plus a manifest; returns the manifest path."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if scene is None:
        scene = cube_scene()
    frames = []
    for i, (cam, img) in enumerate(zip(scene.cameras, scene.images)):
        name = f"frame_{i:03d}.png"
        save_image_png(img, directory / name)
        split = "test" if i in scene.test_idx else "train"
        frames.append(Frame(image_path=directory / name, camera=cam, split=split))
    manifest = SceneManifest(scene_id=scene_id, frames=frames,
                             world_bounds=np.stack([WORLD_MIN, WORLD_MAX]))
    path = directory / "manifest.json"
    save_manifest(manifest, path)
    return str(path)
