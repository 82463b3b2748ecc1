import gzip
import struct

import numpy as np
import pytest

from atlas4d.volume_io import (
    NiftiError,
    Volume3D,
    Volume4D,
    coord_grid,
    denormalize_intensity,
    load_series,
    normalize_intensity,
    normalize_times,
    read_manifest,
    read_nifti,
    write_manifest,
    write_nifti,
)


def _vol(dims=(2, 2, 2), spacing=(1.0, 1.0, 1.0), seed=0):
    rng = np.random.default_rng(seed)
    return Volume3D(dims, spacing, rng.uniform(0, 1, dims))


def _raw_nifti(dims=(2, 2, 2), datatype=64, dim0=3, scl_slope=0.0, scl_inter=0.0,
               payload=None, magic=b"n+1\x00"):
    """Hand-assembled NIfTI-1 bytes, independent of write_nifti."""
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, dim0, *dims, 1, 1, 1, 1)
    codes = {2: 1, 4: 2, 16: 4, 64: 8}
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, codes[datatype] * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, scl_slope)
    struct.pack_into("<f", hdr, 116, scl_inter)
    struct.pack_into("<4s", hdr, 344, magic)
    if payload is None:
        n = dims[0] * dims[1] * dims[2]
        payload = np.arange(n, dtype=np.float64).tobytes()
    return bytes(hdr) + b"\x00" * 4 + payload


class TestNifti:
    def test_round_trip_identity(self, tmp_path):
        vol = _vol()
        p = tmp_path / "v.nii"
        write_nifti(vol, p)
        back = read_nifti(p)
        assert back.dims == vol.dims
        assert np.allclose(back.spacing, vol.spacing, atol=1e-6)
        # payload is float32 on disk, so compare against the float32 cast
        assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))

    def test_round_trip_large_random(self, tmp_path):
        vol = _vol(dims=(64, 64, 64), seed=3)
        p = tmp_path / "v.nii"
        write_nifti(vol, p)
        back = read_nifti(p)
        diff = np.abs(back.data - vol.data.astype(np.float32).astype(np.float64))
        assert diff.max() == 0.0

    def test_round_trip_gzip(self, tmp_path):
        vol = _vol(dims=(5, 4, 3), seed=1)
        p = tmp_path / "v.nii.gz"
        write_nifti(vol, p)
        assert p.read_bytes()[:2] == b"\x1f\x8b"
        back = read_nifti(p)
        assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))

    def test_gzip_output_is_deterministic(self, tmp_path):
        vol = _vol(dims=(4, 4, 4), seed=2)
        a, b = tmp_path / "a.nii.gz", tmp_path / "b.nii.gz"
        write_nifti(vol, a)
        write_nifti(vol, b)
        assert a.read_bytes() == b.read_bytes()

    def test_scl_slope_applied(self, tmp_path):
        # raw voxel 3 with slope 2, inter 1 must read as 7 (header arithmetic)
        payload = np.array([3.0] * 8, dtype=np.float64).tobytes()
        p = tmp_path / "scaled.nii"
        p.write_bytes(_raw_nifti(scl_slope=2.0, scl_inter=1.0, payload=payload))
        back = read_nifti(p)
        assert np.all(back.data == 7.0)

    def test_zero_slope_means_no_scaling(self, tmp_path):
        payload = np.array([3.0] * 8, dtype=np.float64).tobytes()
        p = tmp_path / "plain.nii"
        p.write_bytes(_raw_nifti(scl_slope=0.0, scl_inter=5.0, payload=payload))
        assert np.all(read_nifti(p).data == 3.0)

    def test_4d_file_rejected(self, tmp_path):
        p = tmp_path / "fourd.nii"
        p.write_bytes(_raw_nifti(dim0=4))
        with pytest.raises(NiftiError, match="unsupported layout"):
            read_nifti(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.nii"
        p.write_bytes(_raw_nifti(magic=b"abc\x00"))
        with pytest.raises(NiftiError, match="not NIfTI-1"):
            read_nifti(p)

    def test_bad_header_size(self, tmp_path):
        blob = bytearray(_raw_nifti())
        struct.pack_into("<i", blob, 0, 999)
        p = tmp_path / "bad.nii"
        p.write_bytes(bytes(blob))
        with pytest.raises(NiftiError, match="not NIfTI-1"):
            read_nifti(p)

    def test_unsupported_datatype(self, tmp_path):
        blob = bytearray(_raw_nifti())
        struct.pack_into("<h", blob, 70, 128)  # RGB, not scalar
        p = tmp_path / "rgb.nii"
        p.write_bytes(bytes(blob))
        with pytest.raises(NiftiError, match="unsupported layout"):
            read_nifti(p)

    def test_truncated_payload(self, tmp_path):
        blob = _raw_nifti()
        p = tmp_path / "short.nii"
        p.write_bytes(blob[:-8])
        with pytest.raises(NiftiError, match="corrupt file"):
            read_nifti(p)

    def test_truncated_header(self, tmp_path):
        p = tmp_path / "stub.nii"
        p.write_bytes(b"\x00" * 100)
        with pytest.raises(NiftiError, match="corrupt file"):
            read_nifti(p)

    def test_big_endian_read(self, tmp_path):
        hdr = bytearray(348)
        struct.pack_into(">i", hdr, 0, 348)
        struct.pack_into(">8h", hdr, 40, 3, 2, 1, 1, 1, 1, 1, 1)
        struct.pack_into(">h", hdr, 70, 16)
        struct.pack_into(">h", hdr, 72, 32)
        struct.pack_into(">8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0)
        struct.pack_into(">f", hdr, 108, 352.0)
        struct.pack_into("<4s", hdr, 344, b"n+1\x00")
        payload = np.array([1.5, -2.0], dtype=">f4").tobytes()
        p = tmp_path / "be.nii"
        p.write_bytes(bytes(hdr) + b"\x00" * 4 + payload)
        back = read_nifti(p)
        assert back.dims == (2, 1, 1)
        assert np.array_equal(back.data.ravel(), [1.5, -2.0])

    def test_zero_sized_dim_rejected(self):
        with pytest.raises(ValueError):
            Volume3D((0, 2, 2), (1, 1, 1), np.zeros((0, 2, 2)))

    def test_disk_order_is_x_fastest(self, tmp_path):
        data = np.arange(24, dtype=np.float64).reshape((2, 3, 4), order="F")
        vol = Volume3D((2, 3, 4), (1, 1, 1), data)
        p = tmp_path / "order.nii"
        write_nifti(vol, p)
        raw = np.frombuffer(p.read_bytes()[352:], dtype="<f4")
        assert np.array_equal(raw, np.arange(24, dtype=np.float32))


class TestSeries:
    def _write_series(self, tmp_path, times, dims=(3, 3, 3)):
        entries = []
        for i, t in enumerate(times):
            p = tmp_path / f"v{i}.nii"
            write_nifti(_vol(dims, seed=i), p)
            entries.append((p, t))
        return entries

    def test_sorted_by_time(self, tmp_path):
        entries = self._write_series(tmp_path, [25.0, 21.0, 23.0])
        series = load_series(entries)
        assert list(series.times) == [21.0, 23.0, 25.0]

    def test_crl_manifest_18_volumes(self, tmp_path):
        weeks = list(range(21, 39))
        entries = self._write_series(tmp_path, [float(w) for w in weeks], dims=(2, 2, 2))
        series = load_series(entries)
        assert list(series.times) == [float(w) for w in weeks]
        assert series.n_times == 18

    def test_duplicate_time_rejected(self, tmp_path):
        entries = self._write_series(tmp_path, [21.0, 21.0])
        with pytest.raises(ValueError, match="duplicate"):
            load_series(entries)

    def test_dim_mismatch_rejected(self, tmp_path):
        p1, p2 = tmp_path / "a.nii", tmp_path / "b.nii"
        write_nifti(_vol((3, 3, 3)), p1)
        write_nifti(_vol((4, 3, 3)), p2)
        with pytest.raises(ValueError, match="mismatch"):
            load_series([(p1, 1.0), (p2, 2.0)])

    def test_too_few_entries(self, tmp_path):
        entries = self._write_series(tmp_path, [21.0])
        with pytest.raises(ValueError, match="at least 2"):
            load_series(entries)

    def test_manifest_round_trip(self, tmp_path):
        entries = self._write_series(tmp_path, [21.0, 22.5, 24.0])
        mp = tmp_path / "series.tsv"
        write_manifest(entries, mp)
        back = read_manifest(mp)
        assert [(p.name, t) for p, t in back] == [(p.name, t) for p, t in entries]
        series = load_series(back)
        assert series.n_times == 3


class TestNormalization:
    def _series(self, arrays, times=None):
        vols = [Volume3D(a.shape, (1, 1, 1), a) for a in arrays]
        if times is None:
            times = list(range(len(arrays)))
        return Volume4D(vols, np.array(times, dtype=float))

    def test_affine_map(self):
        a = np.zeros((2, 2, 2))
        b = np.full((2, 2, 2), 200.0)
        b[0, 0, 0] = 50.0
        a[0, 0, 0] = 0.0
        out = normalize_intensity(self._series([a, b]))
        assert out.intensity_scale == (0.0, 200.0)
        assert out.volumes[1].data[0, 0, 0] == pytest.approx(0.25)

    def test_already_unit_range_unchanged(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1, (3, 3, 3))
        a.flat[0], a.flat[1] = 0.0, 1.0
        out = normalize_intensity(self._series([a, a + 0.0]))
        assert out.intensity_scale == (0.0, 1.0)
        assert np.array_equal(out.volumes[0].data, a)

    def test_constant_series_rejected(self):
        a = np.full((2, 2, 2), 3.0)
        with pytest.raises(ValueError, match="degenerate intensity range"):
            normalize_intensity(self._series([a, a.copy()]))

    def test_round_trip(self):
        rng = np.random.default_rng(1)
        arrays = [rng.uniform(-40, 600, (4, 4, 4)) for _ in range(3)]
        series = self._series(arrays)
        out = normalize_intensity(series)
        for orig, norm in zip(arrays, out.volumes):
            back = denormalize_intensity(norm.data, out.intensity_scale)
            assert np.allclose(back, orig, atol=1e-6)

    def test_output_attains_bounds(self):
        rng = np.random.default_rng(2)
        out = normalize_intensity(
            self._series([rng.uniform(5, 9, (4, 4, 4)) for _ in range(4)])
        )
        lo = min(v.data.min() for v in out.volumes)
        hi = max(v.data.max() for v in out.volumes)
        assert lo == 0.0 and hi == 1.0


class TestCoordGrid:
    def test_corner_and_center(self):
        grid = coord_grid((3, 3, 3))
        assert np.array_equal(grid[0], [-1.0, -1.0, -1.0])
        center = grid[1 + 3 * (1 + 3 * 1)]  # flat index of voxel (1,1,1)
        assert np.array_equal(center, [0.0, 0.0, 0.0])

    def test_degenerate_axis_maps_to_zero(self):
        grid = coord_grid((1, 4, 4))
        assert np.all(grid[:, 0] == 0.0)

    def test_grid_length(self):
        assert coord_grid((4, 5, 6)).shape == (120, 3)

    def test_mirror_symmetry_exact(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            nx, ny, nz = rng.integers(1, 9, 3)
            grid = coord_grid((nx, ny, nz)).reshape((nz, ny, nx, 3))  # z slowest
            flipped = grid[::-1, ::-1, ::-1]
            assert np.array_equal(flipped, -grid)

    def test_order_matches_data_layout(self):
        # second flat entry must step in x, matching Fortran ravel of data
        grid = coord_grid((3, 2, 2))
        assert grid[1][0] == 0.0  # x moved from -1 to 0
        assert grid[1][1] == -1.0 and grid[1][2] == -1.0

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            coord_grid((0, 2, 2))


class TestNormalizeTimes:
    def test_endpoints_and_midpoint(self):
        out = normalize_times([21.0, 29.5, 38.0], (21.0, 38.0))
        assert out[0] == -1.0 and out[2] == 1.0 and out[1] == 0.0

    def test_degenerate_range(self):
        with pytest.raises(ValueError):
            normalize_times([1.0], (2.0, 2.0))
