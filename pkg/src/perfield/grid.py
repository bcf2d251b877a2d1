"""Sparse voxel scene representation.

Each occupied voxel stores a raw density value and 27 spherical-harmonic
coefficients (9 per RGB channel, degree <= 2). Values live at voxel centers;
sampling is trilinear over the 8 surrounding centers with empty corners
contributing zeros. Density is clamped at 0 after interpolation (ReLU) and
colors go through a sigmoid after the SH dot product, so raw parameters are
unbounded.

Slot order is always lexicographic in (x, y, z), which serialization and the
binary-search lookup rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EMPTY = -1
MAX_RESOLUTION = 1024

# real spherical harmonics, bands l=0..2, order (l, m) =
# (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


@dataclass
class SparseVoxelGrid:
    resolution: tuple[int, int, int]
    world_min: np.ndarray
    world_max: np.ndarray
    occupancy: np.ndarray   # int32 (Nx, Ny, Nz), slot index or EMPTY
    coords: np.ndarray      # int32 (S, 3), lexicographically sorted
    density: np.ndarray     # float64 (S,)
    sh: np.ndarray          # float64 (S, 27)

    @property
    def slot_count(self) -> int:
        return self.density.shape[0]

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.world_max - self.world_min) / np.asarray(self.resolution, dtype=np.float64)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of occupied voxel centers, slot order."""
        return self.world_min + (self.coords.astype(np.float64) + 0.5) * self.voxel_size

    def bounding_radius(self) -> float:
        """Radius of the sphere around the bounds center that encloses the bounds."""
        return float(np.linalg.norm(self.world_max - self.world_min) / 2.0)

    def center(self) -> np.ndarray:
        return (self.world_min + self.world_max) / 2.0

    def audit(self) -> None:
        """Full check of the occupancy/slot bijection and value shapes."""
        s = self.slot_count
        occ = self.occupancy
        if occ.shape != tuple(self.resolution):
            raise AssertionError("occupancy shape mismatch")
        filled = occ[occ != EMPTY]
        if filled.size != s or (np.sort(filled) != np.arange(s)).any():
            raise AssertionError("occupancy slots are not a bijection")
        if self.coords.shape != (s, 3) or self.sh.shape != (s, 27):
            raise AssertionError("array shape mismatch")
        ix, iy, iz = self.coords.T
        if (occ[ix, iy, iz] != np.arange(s)).any():
            raise AssertionError("coords do not invert occupancy")
        if s > 1:
            key = self._coord_keys()
            if (np.diff(key) <= 0).any():
                raise AssertionError("coords not strictly lexicographically sorted")
        if not (self.world_min < self.world_max).all():
            raise AssertionError("degenerate world bounds")

    def _coord_keys(self) -> np.ndarray:
        nx, ny, nz = self.resolution
        c = self.coords.astype(np.int64)
        return (c[:, 0] * ny + c[:, 1]) * nz + c[:, 2]


def _build_grid(resolution, world_min, world_max, coords, density, sh) -> SparseVoxelGrid:
    """Assemble a grid from (possibly unsorted) occupied cells."""
    resolution = tuple(int(n) for n in resolution)
    nx, ny, nz = resolution
    if max(resolution) > MAX_RESOLUTION:
        raise ValueError(f"resolution exceeds {MAX_RESOLUTION}^3 cap")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    key = (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]
    order = np.argsort(key, kind="stable")
    coords = coords[order]
    density = np.ascontiguousarray(np.asarray(density, dtype=np.float64).reshape(-1)[order])
    sh = np.ascontiguousarray(np.asarray(sh, dtype=np.float64).reshape(-1, 27)[order])
    occ = np.full(resolution, EMPTY, dtype=np.int32)
    occ[coords[:, 0], coords[:, 1], coords[:, 2]] = np.arange(coords.shape[0], dtype=np.int32)
    return SparseVoxelGrid(
        resolution=resolution,
        world_min=np.asarray(world_min, dtype=np.float64).reshape(3),
        world_max=np.asarray(world_max, dtype=np.float64).reshape(3),
        occupancy=occ,
        coords=coords.astype(np.int32),
        density=density,
        sh=sh,
    )


def dense_grid(resolution, world_min, world_max, sigma0: float = 0.1) -> SparseVoxelGrid:
    """Fully occupied grid, densities at sigma0 and SH at zero."""
    resolution = tuple(int(n) for n in resolution)
    nx, ny, nz = resolution
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    s = coords.shape[0]
    return _build_grid(resolution, world_min, world_max, coords,
                       np.full(s, sigma0), np.zeros((s, 27)))


def grid_from_mask(mask: np.ndarray, world_min, world_max,
                   sigma0: float = 0.1) -> SparseVoxelGrid:
    coords = np.argwhere(mask)
    s = coords.shape[0]
    return _build_grid(mask.shape, world_min, world_max, coords,
                       np.full(s, sigma0), np.zeros((s, 27)))


def sh_basis(direction: np.ndarray) -> np.ndarray:
    """Evaluate the 9 real SH basis functions for unit direction(s).

    Accepts a single (3,) direction or an (N, 3) batch; returns (9,) or (N, 9).
    """
    d = np.asarray(direction, dtype=np.float64)
    single = d.ndim == 1
    d = d.reshape(-1, 3)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], 9))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (3.0 * z * z - 1.0)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (x * x - y * y)
    return out[0] if single else out


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def eval_color(sh27: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """View-dependent RGB in (0,1): sigmoid of per-channel SH dot products."""
    sh27 = np.asarray(sh27, dtype=np.float64)
    single = sh27.ndim == 1
    sh27 = sh27.reshape(-1, 3, 9)
    b = sh_basis(direction).reshape(-1, 9)
    logits = np.einsum("nck,nk->nc", sh27, np.broadcast_to(b, (sh27.shape[0], 9)))
    rgb = _sigmoid(logits)
    return rgb[0] if single else rgb


def interpolate_raw(grid: SparseVoxelGrid, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation of raw (unactivated) density and SH at world points.

    Empty corners contribute zeros. Points outside the world bounds return
    zeros. Returns (sigma_raw (N,), sh (N, 27)).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = p.shape[0]
    g = (p - grid.world_min) / grid.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    w1 = g - i0
    w0 = 1.0 - w1
    sigma = np.zeros(n)
    sh = np.zeros((n, 27))
    res = np.asarray(grid.resolution)
    inside = ((p >= grid.world_min) & (p <= grid.world_max)).all(axis=1)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                ci = i0 + np.array([di, dj, dk])
                valid = inside & (ci >= 0).all(axis=1) & (ci < res).all(axis=1)
                w = (np.where(di, w1[:, 0], w0[:, 0])
                     * np.where(dj, w1[:, 1], w0[:, 1])
                     * np.where(dk, w1[:, 2], w0[:, 2]))
                slot = np.full(n, EMPTY, dtype=np.int64)
                slot[valid] = grid.occupancy[ci[valid, 0], ci[valid, 1], ci[valid, 2]]
                hit = slot >= 0
                if hit.any():
                    sigma[hit] += w[hit] * grid.density[slot[hit]]
                    sh[hit] += w[hit, None] * grid.sh[slot[hit]]
    return sigma, sh


def sample_trilinear(grid: SparseVoxelGrid, point: np.ndarray):
    """Activated sample at world point(s): (max(sigma, 0), sh27)."""
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    sigma, sh = interpolate_raw(grid, p)
    sigma = np.maximum(sigma, 0.0)
    if single:
        return float(sigma[0]), sh[0]
    return sigma, sh


def prune(grid: SparseVoxelGrid, threshold: float) -> SparseVoxelGrid:
    """Drop voxels with raw density below threshold; survivors are bit-identical."""
    if np.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    keep = grid.density >= threshold
    return _build_grid(grid.resolution, grid.world_min, grid.world_max,
                       grid.coords[keep], grid.density[keep], grid.sh[keep])


def neighbor_slots(grid: SparseVoxelGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slot index of the +x/+y/+z neighbor per slot, EMPTY when absent."""
    nx, ny, nz = grid.resolution
    c = grid.coords.astype(np.int64)
    out = []
    for axis, limit in ((0, nx), (1, ny), (2, nz)):
        nb = c.copy()
        nb[:, axis] += 1
        ok = nb[:, axis] < limit
        res = np.full(grid.slot_count, EMPTY, dtype=np.int64)
        res[ok] = grid.occupancy[nb[ok, 0], nb[ok, 1], nb[ok, 2]]
        out.append(res)
    return out[0], out[1], out[2]


def upsample(grid: SparseVoxelGrid, factor: int = 2) -> SparseVoxelGrid:
    """Double the resolution; every occupied voxel spawns its 8 children.

    Child values are trilinear interpolations of the coarse field at the
    child centers, with interpolation weights renormalized over occupied
    corners so constant regions stay constant across occupancy boundaries.
    World bounds are unchanged.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    new_res = tuple(n * 2 for n in grid.resolution)
    if max(new_res) > MAX_RESOLUTION:
        raise ValueError(f"upsampling beyond {MAX_RESOLUTION}^3 is rejected")
    base = grid.coords.astype(np.int64) * 2
    offsets = np.array([[a, b, c] for a in (0, 1) for b in (0, 1) for c in (0, 1)])
    child_coords = (base[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
    child_size = grid.voxel_size / 2.0
    centers = grid.world_min + (child_coords.astype(np.float64) + 0.5) * child_size

    # renormalized trilinear gather on the coarse lattice
    g = (centers - grid.world_min) / grid.voxel_size - 0.5
    i0 = np.floor(g).astype(np.int64)
    w1 = g - i0
    w0 = 1.0 - w1
    n = centers.shape[0]
    sigma = np.zeros(n)
    sh = np.zeros((n, 27))
    wsum = np.zeros(n)
    res = np.asarray(grid.resolution)
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                ci = i0 + np.array([di, dj, dk])
                valid = (ci >= 0).all(axis=1) & (ci < res).all(axis=1)
                w = (np.where(di, w1[:, 0], w0[:, 0])
                     * np.where(dj, w1[:, 1], w0[:, 1])
                     * np.where(dk, w1[:, 2], w0[:, 2]))
                slot = np.full(n, EMPTY, dtype=np.int64)
                slot[valid] = grid.occupancy[ci[valid, 0], ci[valid, 1], ci[valid, 2]]
                hit = slot >= 0
                sigma[hit] += w[hit] * grid.density[slot[hit]]
                sh[hit] += w[hit, None] * grid.sh[slot[hit]]
                wsum[hit] += w[hit]
    # every child has its own parent among the corners, so wsum > 0
    sigma /= wsum
    sh /= wsum[:, None]
    return _build_grid(new_res, grid.world_min, grid.world_max, child_coords, sigma, sh)


@dataclass
class BackgroundModel:
    """Concentric textured spheres enclosing the foreground bounds.

    Textures are equirectangular (width = 2 * height) with 4 channels per
    texel: RGB color logits and a raw density. Layer alpha is
    1 - exp(-max(density, 0)); whatever transmittance survives the last layer
    contributes brightness * (1, 1, 1).
    """

    texels: np.ndarray      # float64 (L, H, 2H, 4)
    radii: np.ndarray       # float64 (L,), strictly increasing
    center: np.ndarray      # float64 (3,)
    brightness: float = 0.5

    @property
    def n_layers(self) -> int:
        return self.texels.shape[0]

    @property
    def layer_resolution(self) -> int:
        return self.texels.shape[1]

    def __post_init__(self):
        self.texels = np.asarray(self.texels, dtype=np.float64)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if self.texels.ndim != 4 or self.texels.shape[3] != 4:
            raise ValueError("texels must be (layers, H, W, 4)")
        if self.texels.shape[2] != 2 * self.texels.shape[1]:
            raise ValueError("texture width must be twice the height")
        if self.radii.shape[0] != self.texels.shape[0]:
            raise ValueError("one radius per layer required")
        if self.radii.shape[0] > 1 and (np.diff(self.radii) <= 0).any():
            raise ValueError("radii must be strictly increasing")
        if not 0.0 <= self.brightness <= 1.0:
            raise ValueError("brightness must lie in [0, 1]")


def make_background(grid: SparseVoxelGrid, n_layers: int = 16,
                    layer_resolution: int = 512, brightness: float = 0.5) -> BackgroundModel:
    """Zero-texel background with inverse-depth layer radii around the grid.

    Radii run from 1.01x to 8x the foreground bounding radius, spaced
    linearly in inverse depth so each layer covers comparable parallax.
    """
    r_fg = grid.bounding_radius()
    r_near, r_far = 1.01 * r_fg, 8.0 * r_fg
    if n_layers == 1:
        radii = np.array([r_near])
    else:
        inv = np.linspace(1.0 / r_near, 1.0 / r_far, n_layers)
        radii = 1.0 / inv
    texels = np.zeros((n_layers, layer_resolution, 2 * layer_resolution, 4))
    return BackgroundModel(texels=texels, radii=radii, center=grid.center(),
                           brightness=brightness)


def background_radiance(bg: BackgroundModel, origin, direction, t_in: float = 1.0) -> np.ndarray:
    """Light contributed behind a ray that enters the background with transmittance t_in.

    Front-to-back compositing over the layers: each layer is intersected at
    its sphere-exit point, its texture sampled bilinearly in equirectangular
    coordinates (wrapping in longitude), and alpha-blended. A ray that misses
    every layer returns t_in * brightness.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(3) - bg.center
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    acc = np.zeros(3)
    tb = 1.0
    H = bg.layer_resolution
    W = 2 * H
    for layer in range(bg.n_layers):
        r = bg.radii[layer]
        b = float(o @ d)
        c = float(o @ o) - r * r
        disc = b * b - c
        if disc <= 0.0:
            continue
        t = -b + np.sqrt(disc)
        if t <= 0.0:
            continue
        p = o + t * d
        u = p / np.linalg.norm(p)
        phi = np.arctan2(u[1], u[0])
        theta = np.arccos(np.clip(u[2], -1.0, 1.0))
        x = (phi + np.pi) / (2.0 * np.pi) * W - 0.5
        y = theta / np.pi * H - 0.5
        x0 = int(np.floor(x))
        y0 = int(np.floor(y))
        fx = x - x0
        fy = y - y0
        xi0 = x0 % W
        xi1 = (x0 + 1) % W
        yi0 = min(max(y0, 0), H - 1)
        yi1 = min(max(y0 + 1, 0), H - 1)
        w = ((1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx)
        tex = bg.texels[layer]
        vals = (w[0] * tex[yi0, xi0] + w[1] * tex[yi0, xi1]
                + w[2] * tex[yi1, xi0] + w[3] * tex[yi1, xi1])
        sigma = max(vals[3], 0.0)
        alpha = 1.0 - np.exp(-sigma)
        if alpha > 0.0:
            rgb = _sigmoid(vals[:3])
            acc += tb * alpha * rgb
            tb *= 1.0 - alpha
    acc += tb * bg.brightness
    return t_in * acc
