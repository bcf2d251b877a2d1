"""Container quantization, byte-exact round trips, corruption handling."""

import struct
import zlib

import numpy as np
import pytest

from perfield.grid import grid_from_mask
from perfield.serialization import (ChecksumError, LengthError, MagicError,
                                    QuantizedScene, VersionError, dequantize,
                                    quantize, read, storage_report, write)

from conftest import random_background, random_grid


def _scene_pair(rng, resolution=(8, 8, 8), with_bg=True, occupancy=0.5):
    g = random_grid(rng, resolution, sigma_range=(-1.0, 3.0), sh_scale=1.0)
    keep = rng.random(g.slot_count) < occupancy
    from perfield.grid import prune
    g.density[~keep] = -1e9
    g = prune(g, -1e8)
    bg = random_background(rng, g, n_layers=2, layer_resolution=4) if with_bg else None
    return g, bg


class TestQuantize:
    def test_constant_channel_degenerate_range(self, rng):
        g, _ = _scene_pair(rng, with_bg=False)
        g.sh[:, 5] = 0.75
        s = quantize(g)
        assert s.sh_scale[5] == 1.0
        assert s.sh_offset[5] == np.float32(0.75)
        assert (s.sh_q[:, 5] == 0).all()
        back, _ = dequantize(s)
        np.testing.assert_allclose(back.sh[:, 5], np.float32(0.75), atol=0)

    def test_round_trip_error_within_half_step(self, rng):
        g, bg = _scene_pair(rng)
        g.sh[:] = rng.uniform(-1.0, 1.0, g.sh.shape)
        s = quantize(g, bg)
        back, _ = dequantize(s)
        err = np.abs(back.sh - g.sh)
        half_step = s.sh_scale.astype(np.float64) / 2.0
        assert (err <= half_step * (1 + 1e-9) + 1e-12).all()
        assert err.max() <= 2.0 / 255.0 / 2.0 + 1e-7

    def test_density_bit_identical_at_f32(self, rng):
        g, bg = _scene_pair(rng)
        s = quantize(g, bg)
        np.testing.assert_array_equal(s.density, g.density.astype(np.float32))
        back, _ = dequantize(s)
        np.testing.assert_array_equal(back.density.astype(np.float32), s.density)

    def test_pure_function(self, rng):
        g, bg = _scene_pair(rng)
        s1 = quantize(g, bg)
        s2 = quantize(g, bg)
        np.testing.assert_array_equal(s1.sh_q, s2.sh_q)
        np.testing.assert_array_equal(s1.density, s2.density)


class TestFileRoundTrip:
    def test_empty_scene(self, tmp_path):
        mask = np.zeros((4, 4, 4), bool)
        g = grid_from_mask(mask, [0, 0, 0], [1, 1, 1])
        s = quantize(g)
        path = tmp_path / "empty.prfx"
        write(s, path)
        back = read(path)
        assert back.voxel_count == 0
        assert back.background is None
        assert back.resolution == (4, 4, 4)

    def test_random_scene_bitwise(self, rng, tmp_path):
        g, bg = _scene_pair(rng, resolution=(22, 22, 22), occupancy=0.95)
        assert g.slot_count >= 10_000
        s = quantize(g, bg)
        path = tmp_path / "scene.prfx"
        write(s, path)
        back = read(path)
        np.testing.assert_array_equal(back.coords, s.coords)
        np.testing.assert_array_equal(back.density, s.density)
        np.testing.assert_array_equal(back.sh_q, s.sh_q)
        np.testing.assert_array_equal(back.sh_scale, s.sh_scale)
        np.testing.assert_array_equal(back.sh_offset, s.sh_offset)
        np.testing.assert_array_equal(back.world_min, s.world_min)
        b1, b2 = s.background, back.background
        np.testing.assert_array_equal(b2.texels_q, b1.texels_q)
        np.testing.assert_array_equal(b2.radii, b1.radii)
        assert b2.brightness == b1.brightness
        # writing the read scene reproduces the same bytes
        path2 = tmp_path / "scene2.prfx"
        write(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_coords_sorted_lookup_matches_occupancy(self, rng, tmp_path):
        g, _ = _scene_pair(rng, resolution=(16, 16, 16), with_bg=False)
        s = quantize(g)
        nx, ny, nz = s.resolution
        keys = (s.coords[:, 0].astype(np.int64) * ny + s.coords[:, 1]) * nz + s.coords[:, 2]
        assert (np.diff(keys) > 0).all()
        queries = rng.integers(0, 16, (100_000, 3))
        qkeys = (queries[:, 0] * ny + queries[:, 1]) * nz + queries[:, 2]
        pos = np.searchsorted(keys, qkeys)
        found = (pos < keys.size) & (keys[np.minimum(pos, keys.size - 1)] == qkeys)
        slots = np.where(found, pos, -1)
        expected = g.occupancy[queries[:, 0], queries[:, 1], queries[:, 2]]
        np.testing.assert_array_equal(slots, expected)


class TestCorruption:
    def _write(self, rng, tmp_path):
        g, bg = _scene_pair(rng)
        path = tmp_path / "c.prfx"
        write(quantize(g, bg), path)
        return path

    def test_bad_magic(self, rng, tmp_path):
        path = self._write(rng, tmp_path)
        data = bytearray(path.read_bytes())
        data[:4] = b"NOPE"
        path.write_bytes(bytes(data))
        with pytest.raises(MagicError):
            read(path)

    def test_bad_version(self, rng, tmp_path):
        path = self._write(rng, tmp_path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 9)
        # keep the checksum consistent so the version check is what fires
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])) & 0xFFFFFFFF)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionError):
            read(path)

    def test_flipped_byte_fails_checksum(self, rng, tmp_path):
        path = self._write(rng, tmp_path)
        data = bytearray(path.read_bytes())
        data[100] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            read(path)

    def test_truncation_never_crashes(self, rng, tmp_path):
        path = self._write(rng, tmp_path)
        data = path.read_bytes()
        for cut in (2, 5, 12, 60, len(data) // 2, len(data) - 5):
            path.write_bytes(data[:cut])
            with pytest.raises((ChecksumError, LengthError, MagicError)):
                read(path)

    def test_inconsistent_lengths(self, rng, tmp_path):
        path = self._write(rng, tmp_path)
        data = bytearray(path.read_bytes())
        # voxel count sits after magic+version+resolution+bounds = 44 bytes
        count = struct.unpack("<Q", bytes(data[44:52]))[0]
        data[44:52] = struct.pack("<Q", count + 7)
        data[-4:] = struct.pack("<I", zlib.crc32(bytes(data[:-4])) & 0xFFFFFFFF)
        path.write_bytes(bytes(data))
        with pytest.raises(LengthError):
            read(path)


class TestStorageReport:
    def test_report_sums_to_file_size(self, rng, tmp_path):
        g, bg = _scene_pair(rng)
        s = quantize(g, bg)
        path = tmp_path / "r.prfx"
        write(s, path)
        report = storage_report(s)
        assert report["total_bytes"] == path.stat().st_size
        assert report["total_bytes"] == sum(report["sections"].values())

    def test_empty_scene_is_header_plus_checksum(self, tmp_path):
        mask = np.zeros((4, 4, 4), bool)
        g = grid_from_mask(mask, [0, 0, 0], [1, 1, 1])
        s = quantize(g)
        report = storage_report(s)
        assert report["voxel_count"] == 0
        assert report["total_bytes"] == report["sections"]["header"] + 4
        path = tmp_path / "e.prfx"
        write(s, path)
        assert path.stat().st_size == report["total_bytes"]

    def test_sparse_grid_ratio_bound(self, rng):
        # 1% occupancy of a 256^3 grid: 37 bytes/voxel vs 112 bytes/cell dense
        n = 256
        count = int(0.01 * n ** 3)
        lin = rng.choice(n ** 3, size=count, replace=False)
        lin.sort()
        coords = np.stack(np.unravel_index(lin, (n, n, n)), axis=1).astype(np.uint16)
        s = QuantizedScene(
            resolution=(n, n, n),
            world_min=np.zeros(3, np.float32), world_max=np.ones(3, np.float32),
            coords=coords,
            density=np.zeros(count, np.float32),
            sh_q=np.zeros((count, 27), np.uint8),
            sh_scale=np.ones(27, np.float32), sh_offset=np.zeros(27, np.float32))
        report = storage_report(s)
        assert report["ratio_vs_dense"] < 0.04
        assert report["ratio_vs_dense"] < 0.30
