"""Compact on-disk scene container.

Little-endian fixed layout, in order:

    magic "PRFX" (4 bytes)
    u32 version = 1
    u32 resolution[3]
    f32 bounds[6]                  world_min then world_max
    u64 voxel_count
    u8  has_background
    f32 sh_scale[27], f32 sh_offset[27]
    u16 coords[voxel_count][3]     lexicographically sorted, unique
    f32 density[voxel_count]
    u8  sh_q[voxel_count][27]
    background block when has_background:
        u32 n_layers, u32 layer_resolution, f32 brightness,
        f32 radii[n_layers], f32 scale[4], f32 offset[4],
        u8 texels[n_layers][H][2H][4]
    u32 CRC-32 over every preceding byte

SH coefficients are quantized per coefficient index (27 independent affine
ranges); densities stay float32. Files are written atomically (temp +
rename) and the checksum guards truncation.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .grid import BackgroundModel, SparseVoxelGrid, _build_grid

MAGIC = b"PRFX"
VERSION = 1


class ContainerError(Exception):
    """Base class for container format errors."""


class MagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class LengthError(ContainerError):
    pass


@dataclass
class QuantizedBackground:
    n_layers: int
    layer_resolution: int
    brightness: float
    radii: np.ndarray      # f32 (L,)
    scale: np.ndarray      # f32 (4,)
    offset: np.ndarray     # f32 (4,)
    texels_q: np.ndarray   # u8 (L, H, 2H, 4)


@dataclass
class QuantizedScene:
    resolution: tuple[int, int, int]
    world_min: np.ndarray  # f32 (3,)
    world_max: np.ndarray  # f32 (3,)
    coords: np.ndarray     # u16 (S, 3), sorted
    density: np.ndarray    # f32 (S,)
    sh_q: np.ndarray       # u8 (S, 27)
    sh_scale: np.ndarray   # f32 (27,)
    sh_offset: np.ndarray  # f32 (27,)
    background: QuantizedBackground | None = None

    @property
    def voxel_count(self) -> int:
        return self.coords.shape[0]


def _affine_params(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column scale/offset for uint8 quantization; degenerate columns
    get scale 1 so all codes map to the offset exactly."""
    lo = values.min(axis=0) if values.shape[0] else np.zeros(values.shape[1])
    hi = values.max(axis=0) if values.shape[0] else np.zeros(values.shape[1])
    scale = (hi - lo) / 255.0
    scale = np.where(scale > 0.0, scale, 1.0)
    return scale.astype(np.float32), lo.astype(np.float32)


def _quantize_cols(values: np.ndarray, scale: np.ndarray, offset: np.ndarray) -> np.ndarray:
    q = np.rint((values - offset.astype(np.float64)) / scale.astype(np.float64))
    return np.clip(q, 0, 255).astype(np.uint8)


def quantize(grid: SparseVoxelGrid, bg: BackgroundModel | None = None) -> QuantizedScene:
    """Quantize SH to uint8 with per-coefficient affine ranges; densities stay float."""
    scale, offset = _affine_params(grid.sh)
    sh_q = _quantize_cols(grid.sh, scale, offset)
    background = None
    if bg is not None:
        flat = bg.texels.reshape(-1, 4)
        b_scale, b_offset = _affine_params(flat)
        background = QuantizedBackground(
            n_layers=bg.n_layers,
            layer_resolution=bg.layer_resolution,
            brightness=float(bg.brightness),
            radii=bg.radii.astype(np.float32),
            scale=b_scale,
            offset=b_offset,
            texels_q=_quantize_cols(flat, b_scale, b_offset).reshape(bg.texels.shape),
        )
    return QuantizedScene(
        resolution=tuple(grid.resolution),
        world_min=grid.world_min.astype(np.float32),
        world_max=grid.world_max.astype(np.float32),
        coords=grid.coords.astype(np.uint16),
        density=grid.density.astype(np.float32),
        sh_q=sh_q,
        sh_scale=scale,
        sh_offset=offset,
        background=background,
    )


def dequantize(scene: QuantizedScene) -> tuple[SparseVoxelGrid, BackgroundModel | None]:
    """Reconstruct a renderable grid (and background) from the container."""
    sh = (scene.sh_offset.astype(np.float64)
          + scene.sh_scale.astype(np.float64) * scene.sh_q.astype(np.float64))
    grid = _build_grid(scene.resolution,
                       scene.world_min.astype(np.float64),
                       scene.world_max.astype(np.float64),
                       scene.coords.astype(np.int64),
                       scene.density.astype(np.float64), sh)
    bg = None
    if scene.background is not None:
        b = scene.background
        texels = (b.offset.astype(np.float64)
                  + b.scale.astype(np.float64) * b.texels_q.astype(np.float64))
        bg = BackgroundModel(texels=texels,
                             radii=b.radii.astype(np.float64),
                             center=grid.center(),
                             brightness=float(b.brightness))
    return grid, bg


def _pack(scene: QuantizedScene) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    parts.append(np.asarray(scene.resolution, dtype="<u4").tobytes())
    parts.append(np.concatenate([scene.world_min, scene.world_max]).astype("<f4").tobytes())
    parts.append(struct.pack("<Q", scene.voxel_count))
    parts.append(struct.pack("<B", 1 if scene.background is not None else 0))
    parts.append(scene.sh_scale.astype("<f4").tobytes())
    parts.append(scene.sh_offset.astype("<f4").tobytes())
    parts.append(scene.coords.astype("<u2").tobytes())
    parts.append(scene.density.astype("<f4").tobytes())
    parts.append(scene.sh_q.astype("u1").tobytes())
    if scene.background is not None:
        b = scene.background
        parts.append(struct.pack("<II", b.n_layers, b.layer_resolution))
        parts.append(struct.pack("<f", b.brightness))
        parts.append(b.radii.astype("<f4").tobytes())
        parts.append(b.scale.astype("<f4").tobytes())
        parts.append(b.offset.astype("<f4").tobytes())
        parts.append(b.texels_q.astype("u1").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def write(scene: QuantizedScene, path) -> None:
    """Atomic write: temp file in the destination directory, then rename."""
    _validate_shapes(scene)
    data = _pack(scene)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _validate_shapes(scene: QuantizedScene) -> None:
    s = scene.voxel_count
    if scene.density.shape != (s,) or scene.sh_q.shape != (s, 27):
        raise LengthError("array lengths inconsistent with voxel count")
    if scene.sh_scale.shape != (27,) or scene.sh_offset.shape != (27,):
        raise LengthError("quantization parameter lengths must be 27")
    res = np.asarray(scene.resolution, dtype=np.int64)
    if s and (scene.coords.astype(np.int64) >= res).any():
        raise LengthError("coords exceed the declared resolution")
    if s > 1:
        key = (scene.coords[:, 0].astype(np.int64) * res[1]
               + scene.coords[:, 1]) * res[2] + scene.coords[:, 2]
        if (np.diff(key) <= 0).any():
            raise LengthError("coords must be strictly sorted and unique")
    if scene.background is not None:
        b = scene.background
        H = b.layer_resolution
        if b.texels_q.shape != (b.n_layers, H, 2 * H, 4):
            raise LengthError("background texel shape inconsistent with header")
        if b.radii.shape != (b.n_layers,):
            raise LengthError("background radii length mismatch")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise LengthError("file truncated or lengths inconsistent")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, dtype, count):
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def read(path) -> QuantizedScene:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicError("bad magic; not a scene container")
    if len(data) < 8:
        raise LengthError("file truncated before version field")
    crc_stored = struct.unpack("<I", data[-4:])[0] if len(data) >= 8 else None
    payload = data[:-4]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError("checksum mismatch; file corrupt or truncated")
    r = _Reader(payload)
    r.take(4)  # magic
    version = struct.unpack("<I", r.take(4))[0]
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    resolution = tuple(int(x) for x in r.array("<u4", 3))
    bounds = r.array("<f4", 6)
    count = struct.unpack("<Q", r.take(8))[0]
    has_bg = struct.unpack("<B", r.take(1))[0]
    sh_scale = r.array("<f4", 27)
    sh_offset = r.array("<f4", 27)
    coords = r.array("<u2", count * 3).reshape(count, 3)
    density = r.array("<f4", count)
    sh_q = r.array("u1", count * 27).reshape(count, 27)
    background = None
    if has_bg:
        n_layers, layer_res = struct.unpack("<II", r.take(8))
        brightness = struct.unpack("<f", r.take(4))[0]
        radii = r.array("<f4", n_layers)
        scale = r.array("<f4", 4)
        offset = r.array("<f4", 4)
        texels = r.array("u1", n_layers * layer_res * 2 * layer_res * 4)
        background = QuantizedBackground(
            n_layers=n_layers, layer_resolution=layer_res,
            brightness=brightness, radii=radii, scale=scale, offset=offset,
            texels_q=texels.reshape(n_layers, layer_res, 2 * layer_res, 4))
    if r.pos != len(payload):
        raise LengthError("trailing bytes after declared content")
    scene = QuantizedScene(
        resolution=resolution,
        world_min=bounds[:3], world_max=bounds[3:],
        coords=coords, density=density, sh_q=sh_q,
        sh_scale=sh_scale, sh_offset=sh_offset, background=background)
    _validate_shapes(scene)
    return scene


def load_scene(path) -> tuple[SparseVoxelGrid, BackgroundModel | None]:
    return dequantize(read(path))


def storage_report(scene: QuantizedScene) -> dict:
    """Exact byte counts per section plus the dense-float32 baseline ratio.

    The baseline is a dense grid of the same resolution storing 27 SH plus
    one density float per cell (112 bytes).
    """
    s = scene.voxel_count
    header = 4 + 4 + 12 + 24 + 8 + 1 + 27 * 4 * 2
    sections = {
        "header": header,
        "coords": 6 * s,
        "density": 4 * s,
        "sh": 27 * s,
    }
    if scene.background is not None:
        b = scene.background
        sections["background"] = (8 + 4 + 4 * b.n_layers + 32
                                  + b.n_layers * b.layer_resolution
                                  * 2 * b.layer_resolution * 4)
    sections["checksum"] = 4
    total = sum(sections.values())
    n_cells = int(np.prod(scene.resolution))
    dense_baseline = 28 * 4 * n_cells
    return {
        "sections": sections,
        "total_bytes": total,
        "voxel_count": s,
        "dense_float32_baseline_bytes": dense_baseline,
        "ratio_vs_dense": total / dense_baseline if dense_baseline else float("nan"),
    }
