"""Dataset ingestion and quality control.

A scene arrives as a single JSON manifest listing image paths, 4x4
camera-to-world poses (row-major), intrinsics, and optional 16-bit
millimeter depth maps. Ingestion scores sharpness, caps the frame count,
assigns a deterministic train/test split, and (for depth scenes) builds the
initial voxel grid from denoised unprojected depth.

Blur scores are the variance of the 3x3 Laplacian response over the
luma image on the 0-255 scale; the default rejection threshold of 10
presumes roughly 640x480 inputs and is exposed as a flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Camera
from .grid import SparseVoxelGrid, grid_from_mask
from .images import load_image_rgb

DEFAULT_BLUR_THRESHOLD = 10.0
DEFAULT_MAX_FRAMES = 1500
IGNORE_CLASS = 255


class DefectiveSceneError(RuntimeError):
    """Raised when a scene has too few usable frames to process."""

    def __init__(self, scene_id: str, reason: str):
        super().__init__(f"scene '{scene_id}' is defective: {reason}")
        self.scene_id = scene_id


@dataclass
class Frame:
    image_path: Path
    camera: Camera
    depth_path: Path | None = None
    blur_score: float | None = None
    split: str | None = None


@dataclass
class SceneManifest:
    scene_id: str
    frames: list[Frame]
    class_label: str | None = None
    world_bounds: np.ndarray | None = None  # (2, 3) min/max, optional

    def train_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split != "test"]

    def test_frames(self) -> list[Frame]:
        return [f for f in self.frames if f.split == "test"]

    def validate_split(self) -> None:
        n = len(self.frames)
        n_test = len(self.test_frames())
        if len(self.train_frames()) < 2:
            raise DefectiveSceneError(self.scene_id, "fewer than 2 train frames")
        if not (0.05 * n <= n_test <= 0.15 * n):
            raise ValueError("test fraction outside [5%, 15%]")


@dataclass
class LabeledPointCloud:
    points: np.ndarray   # (N, 3)
    labels: np.ndarray   # (N,) small integers
    ignore_class: int = IGNORE_CLASS

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels).reshape(-1)
        if self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("labels length must match point count")
        if not np.isfinite(self.points).all():
            raise ValueError("point coordinates must be finite")


def _camera_from_dict(d: dict, pose, convention: str) -> Camera:
    pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
    R = pose[:3, :3]
    t = pose[:3, 3]
    if convention == "w2c":
        R, t = R.T, -(R.T @ t)
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  width=int(d["width"]), height=int(d["height"]),
                  R=R, t=t, k1=d.get("k1", 0.0), k2=d.get("k2", 0.0))


def load_manifest(path, require_files: bool = True) -> SceneManifest:
    path = Path(path)
    with open(path) as f:
        data = json.load(f)
    base = path.parent
    convention = data.get("pose_convention", "c2w")
    if convention not in ("c2w", "w2c"):
        raise ValueError(f"unknown pose convention {convention!r}")
    frames = []
    for fr in data["frames"]:
        cam = _camera_from_dict(fr["intrinsics"], fr["pose"], convention)
        img = base / fr["image"]
        depth = base / fr["depth"] if fr.get("depth") else None
        if require_files:
            if not img.exists():
                raise FileNotFoundError(f"missing image {img}")
            if depth is not None and not depth.exists():
                raise FileNotFoundError(f"missing depth {depth}")
        frames.append(Frame(image_path=img, camera=cam, depth_path=depth,
                            blur_score=fr.get("blur_score"),
                            split=fr.get("split")))
    wb = data.get("world_bounds")
    wb = np.asarray(wb, dtype=np.float64).reshape(2, 3) if wb is not None else None
    return SceneManifest(scene_id=data["scene_id"], frames=frames,
                         class_label=data.get("class_label"), world_bounds=wb)


def save_manifest(manifest: SceneManifest, path) -> None:
    """Write a manifest deterministically (sorted keys, no timestamps)."""
    base = Path(path).parent
    frames = []
    for fr in manifest.frames:
        cam = fr.camera
        pose = cam.pose_matrix()
        frames.append({
            "image": _relative_or_absolute(fr.image_path, base),
            "pose": [[float(x) for x in row] for row in pose],
            "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                           "k1": cam.k1, "k2": cam.k2,
                           "width": cam.width, "height": cam.height},
            "depth": _relative_or_absolute(fr.depth_path, base) if fr.depth_path else None,
            "blur_score": fr.blur_score,
            "split": fr.split,
        })
    data = {
        "scene_id": manifest.scene_id,
        "class_label": manifest.class_label,
        "pose_convention": "c2w",
        "world_bounds": (None if manifest.world_bounds is None
                         else [[float(x) for x in row] for row in manifest.world_bounds]),
        "frames": frames,
    }
    from .images import atomic_write_text
    atomic_write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", path)


def _relative_or_absolute(p: Path, base: Path) -> str:
    try:
        return str(p.relative_to(base))
    except ValueError:
        return str(p)


def blur_score(image: np.ndarray) -> float:
    """Variance of the 3x3 Laplacian response, valid region only.

    RGB inputs are converted with 0.299 R + 0.587 G + 0.114 B; float images
    in [0, 1] are rescaled to 0-255 so scores are comparable to uint8 input.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError("blur_score needs a grayscale image of at least 3x3")
    if img.max() <= 1.0:
        img = img * 255.0
    lap = (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
           - 4.0 * img[1:-1, 1:-1])
    return float(lap.var())


def select_frames(manifest: SceneManifest, max_frames: int = DEFAULT_MAX_FRAMES,
                  blur_threshold: float = DEFAULT_BLUR_THRESHOLD) -> SceneManifest:
    """Cap the frame count; below the cap, drop blurry frames instead.

    Above the cap every ceil(N / max)-th frame is kept uniformly. Below it,
    frames scoring under blur_threshold are rejected (scores are computed
    on demand when missing). Fewer than 2 survivors marks the scene
    defective.
    """
    frames = manifest.frames
    n = len(frames)
    if n > max_frames:
        stride = int(np.ceil(n / max_frames))
        kept = frames[::stride]
    else:
        kept = []
        for fr in frames:
            if fr.blur_score is None:
                fr.blur_score = blur_score(load_image_rgb(fr.image_path))
            if fr.blur_score >= blur_threshold:
                kept.append(fr)
    if len(kept) < 2:
        raise DefectiveSceneError(manifest.scene_id,
                                  f"{len(kept)} usable frames after filtering")
    return SceneManifest(scene_id=manifest.scene_id, frames=kept,
                         class_label=manifest.class_label,
                         world_bounds=manifest.world_bounds)


def assign_splits(manifest: SceneManifest, test_fraction: float = 0.1,
                  seed: int = 0) -> SceneManifest:
    """Deterministic stratified-uniform test split.

    Selected test indices follow an even spacing with a seeded fractional
    offset, so they land within one position of exact uniformity.
    """
    n = len(manifest.frames)
    n_test = max(1, int(round(test_fraction * n)))
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.0, 1.0)
    idx = np.unique((np.floor((np.arange(n_test) + offset) * n / n_test)).astype(int))
    idx = np.clip(idx, 0, n - 1)
    for i, fr in enumerate(manifest.frames):
        fr.split = "test" if i in set(idx.tolist()) else "train"
    return manifest


def unproject_depth(cam: Camera, depth: np.ndarray) -> np.ndarray:
    """World points for every valid (nonzero) depth pixel."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (cam.height, cam.width):
        raise ValueError("depth dimensions do not match the camera")
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    x = (u + 0.5 - cam.cx) / cam.fx
    y = (v + 0.5 - cam.cy) / cam.fy
    pts_cam = np.stack([x * d, y * d, d], axis=1)
    return pts_cam @ cam.R.T + cam.t


def project_point(cam: Camera, points: np.ndarray):
    """Inverse of unproject_depth: world points to (u, v, depth)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = (p - cam.t) @ cam.R
    z = pc[:, 2]
    u = cam.fx * pc[:, 0] / z + cam.cx - 0.5
    v = cam.fy * pc[:, 1] / z + cam.cy - 0.5
    return u, v, z


def filter_connected_components(points: np.ndarray, cell: float = 0.05,
                                min_component: float = 0.01) -> np.ndarray:
    """Drop points in small disconnected clusters.

    Points are discretized to `cell`-sized voxels, cells are linked with
    26-connectivity, and every point whose component holds fewer than
    min_component x (largest component's points) is removed. Survivor order
    is preserved.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    cells = np.floor(pts / cell).astype(np.int64)
    cmin = cells.min(axis=0)
    ext = cells.max(axis=0) - cmin + 1
    rel = cells - cmin
    code = (rel[:, 0] * ext[1] + rel[:, 1]) * ext[2] + rel[:, 2]
    uniq, inverse = np.unique(code, return_inverse=True)
    m = uniq.shape[0]
    # graph edges between occupied cells for the 13 positive neighbor offsets
    rel_u = np.stack(np.unravel_index(uniq, ext), axis=1)
    rows = []
    cols = []
    offsets = [(di, dj, dk) for di in (-1, 0, 1) for dj in (-1, 0, 1)
               for dk in (-1, 0, 1)]
    offsets = [o for o in offsets if o > (0, 0, 0)]
    for off in offsets:
        nb = rel_u + off
        ok = ((nb >= 0) & (nb < ext)).all(axis=1)
        nb_code = (nb[ok, 0] * ext[1] + nb[ok, 1]) * ext[2] + nb[ok, 2]
        pos = np.searchsorted(uniq, nb_code)
        pos = np.clip(pos, 0, m - 1)
        found = uniq[pos] == nb_code
        rows.append(np.flatnonzero(ok)[found])
        cols.append(pos[found])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    graph = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(m, m))
    _, comp = connected_components(graph, directed=False)
    comp_points = np.bincount(comp[inverse])
    threshold = min_component * comp_points.max()
    keep = comp_points[comp[inverse]] >= threshold
    return pts[keep]


def init_grid_from_points(points: np.ndarray, resolution: int = 256,
                          sigma0: float = 0.1) -> SparseVoxelGrid:
    """Seed a grid from a filtered point cloud.

    Bounds are the tight AABB padded by 5% per axis; every cell containing a
    point is occupied, plus a one-cell 26-neighborhood dilation.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("cannot initialize a grid from an empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    scale = max(float((hi - lo).max()), 1e-3)
    pad = 0.05 * scale
    wmin = lo - pad
    wmax = hi + pad
    cell = (wmax - wmin) / resolution
    idx = np.clip(((pts - wmin) / cell).astype(np.int64), 0, resolution - 1)
    mask = np.zeros((resolution,) * 3, dtype=bool)
    mask[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3, 3), bool))
    return grid_from_mask(mask, wmin, wmax, sigma0=sigma0)


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """10 log10(1 / MSE) for float images in [0, 1]; +inf when identical."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def ssim(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean structural similarity with the canonical 11x11 sigma-1.5 window.

    Inputs are converted to luma like blur_score but kept on the [0, 1]
    scale (L = 1, C1 = 0.01^2, C2 = 0.03^2). Windows are evaluated at valid
    positions only.
    """
    def to_gray(img):
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            img = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
        return img

    a = to_gray(rendered)
    b = to_gray(target)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    if min(a.shape) < 11:
        raise ValueError("ssim needs images of at least 11x11")
    win = _gaussian_window()

    def filt(x):
        full = ndimage.correlate(x, win, mode="constant")
        return full[5:-5, 5:-5]

    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def transfer_labels(grid: SparseVoxelGrid, cloud: LabeledPointCloud,
                    radius: float = 0.05) -> np.ndarray:
    """Label each occupied voxel by its nearest cloud point within radius.

    Exact nearest neighbors via a KD-tree; voxels whose nearest point is at
    or beyond the radius get the cloud's ignore_class.
    """
    out = np.full(grid.slot_count, cloud.ignore_class, dtype=np.int64)
    if cloud.points.shape[0] == 0 or grid.slot_count == 0:
        return out
    tree = cKDTree(cloud.points)
    dist, idx = tree.query(grid.voxel_centers(), k=1)
    within = dist < radius
    out[within] = cloud.labels[idx[within]]
    return out
