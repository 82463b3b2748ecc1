"""Volume containers, NIfTI-1 file I/O, and coordinate/intensity normalization.

Disk layout convention: voxel data is stored x-fastest, z-slowest (the usual
NIfTI ordering). In memory a volume is a float64 array of shape (nx, ny, nz)
indexed ``data[x, y, z]``; flattening for files, manifests, and coordinate
grids always uses Fortran order so flat index = x + nx*(y + ny*z).

Only single-file NIfTI-1 (.nii, optionally gzipped) with a scalar 3D payload
is supported; anything else is rejected with an explicit error.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


class NiftiError(ValueError):
    """File is not readable under the supported NIfTI-1 subset."""


# NIfTI-1 datatype codes accepted on read; writing always uses float32.
_NIFTI_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag


@dataclass
class Volume3D:
    """One scalar 3D grid: voxel counts, physical spacing (mm), intensities."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    dtype_tag: str = "float32"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"invalid dims {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def flat(self) -> np.ndarray:
        """Voxel values in disk order (x fastest, z slowest)."""
        return self.data.ravel(order="F")


@dataclass
class LabelVolume:
    """Integer class id per voxel, 0 = background."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray
    n_classes: int = 0  # highest valid class id; 0 means "infer from data"

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"invalid dims {self.dims}")
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError("label data must be integer")
        self.data = self.data.astype(np.int64)
        if self.data.shape != self.dims:
            raise ValueError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if self.data.min(initial=0) < 0:
            raise ValueError("label ids must be >= 0")
        if self.n_classes == 0:
            self.n_classes = int(self.data.max(initial=0))
        elif self.data.max(initial=0) > self.n_classes:
            raise ValueError(
                f"label id {int(self.data.max())} exceeds declared {self.n_classes}"
            )


@dataclass
class Volume4D:
    """Time-ordered series of homogeneous 3D volumes."""

    volumes: list[Volume3D]
    times: np.ndarray
    intensity_scale: tuple[float, float] | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.volumes) != len(self.times):
            raise ValueError("times and volumes disagree in length")
        if len(self.volumes) == 0:
            raise ValueError("empty series")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        ref = self.volumes[0]
        for v in self.volumes[1:]:
            if v.dims != ref.dims:
                raise ValueError("dimension mismatch across series")
            if not np.allclose(v.spacing, ref.spacing, atol=1e-6):
                raise ValueError("spacing mismatch across series")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.volumes[0].dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.volumes[0].spacing

    @property
    def n_times(self) -> int:
        return len(self.volumes)

    @property
    def time_range(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def stack(self) -> np.ndarray:
        """All intensities as (n_times, n_voxels) in disk order."""
        return np.stack([v.flat() for v in self.volumes])


# ---------------------------------------------------------------------------
# NIfTI-1 I/O


def _read_raw(path: Path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def read_nifti(path) -> Volume3D:
    """Read a single-file NIfTI-1 volume (scalar, 3 spatial dims).

    Applies scl_slope/scl_inter when the slope is nonzero and converts the
    payload to float64 working precision.
    """
    path = Path(path)
    raw = _read_raw(path)
    if len(raw) < _HEADER_SIZE:
        raise NiftiError(f"corrupt file: header truncated ({path})")

    # Endianness is detected from sizeof_hdr; both byte orders are readable.
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == _HEADER_SIZE:
        end = "<"
    else:
        (sizeof_be,) = struct.unpack_from(">i", raw, 0)
        if sizeof_be != _HEADER_SIZE:
            raise NiftiError(f"not NIfTI-1: bad header size ({path})")
        end = ">"

    magic = struct.unpack_from("4s", raw, 344)[0]
    if magic == b"ni1\x00":
        raise NiftiError(f"unsupported layout: two-file NIfTI pair ({path})")
    if magic != b"n+1\x00":
        raise NiftiError(f"not NIfTI-1: bad magic {magic!r} ({path})")

    dim = struct.unpack_from(end + "8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"unsupported layout: dim[0]={dim[0]}, need 3 ({path})")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise NiftiError(f"unsupported layout: nonpositive dims {dims} ({path})")

    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    (bitpix,) = struct.unpack_from(end + "h", raw, 72)
    if datatype not in _NIFTI_DTYPES:
        raise NiftiError(f"unsupported layout: datatype code {datatype} ({path})")
    dt = _NIFTI_DTYPES[datatype]
    if bitpix != dt.itemsize * 8:
        raise NiftiError(f"corrupt file: bitpix {bitpix} vs datatype {datatype} ({path})")

    pixdim = struct.unpack_from(end + "8f", raw, 76)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise NiftiError(f"corrupt file: nonpositive pixdim {spacing} ({path})")

    (vox_offset_f,) = struct.unpack_from(end + "f", raw, 108)
    vox_offset = int(vox_offset_f)
    if vox_offset < _HEADER_SIZE:
        raise NiftiError(f"corrupt file: vox_offset {vox_offset} ({path})")
    (scl_slope,) = struct.unpack_from(end + "f", raw, 112)
    (scl_inter,) = struct.unpack_from(end + "f", raw, 116)

    n_vox = dims[0] * dims[1] * dims[2]
    need = vox_offset + n_vox * dt.itemsize
    if len(raw) < need:
        raise NiftiError(f"corrupt file: payload truncated ({path})")

    disk_dt = dt.newbyteorder(end)
    payload = np.frombuffer(raw, dtype=disk_dt, count=n_vox, offset=vox_offset)
    data = payload.astype(np.float64).reshape(dims, order="F")
    if scl_slope != 0.0 and (scl_slope, scl_inter) != (1.0, 0.0):
        data = data * float(scl_slope) + float(scl_inter)

    return Volume3D(dims=dims, spacing=spacing, data=data, dtype_tag=dt.name)


def write_nifti(vol: Volume3D, path) -> None:
    """Write a volume as single-file NIfTI-1 with a float32 payload.

    Gzip compression is selected by a .gz suffix; compressed output embeds
    no timestamp, so identical volumes produce identical bytes.
    """
    path = Path(path)
    nx, ny, nz = vol.dims

    hdr = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, _HEADER_SIZE)
    struct.pack_into("<c", hdr, 38, b"r")
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, 16)  # float32
    struct.pack_into("<h", hdr, 72, 32)
    sx, sy, sz = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 0.0)  # scl_slope 0: no scaling on read
    struct.pack_into("<f", hdr, 116, 0.0)
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    payload = vol.data.astype(np.float32).tobytes(order="F")
    blob = bytes(hdr) + b"\x00\x00\x00\x00" + payload

    if path.suffix == ".gz":
        # filename="" and mtime=0 keep the compressed bytes content-only
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)


def read_label_volume(path, n_classes: int = 0) -> LabelVolume:
    """Read an integer label map stored as a NIfTI volume."""
    vol = read_nifti(path)
    ids = np.rint(vol.data)
    if not np.allclose(vol.data, ids, atol=1e-6):
        raise ValueError(f"non-integer label intensities in {path}")
    return LabelVolume(vol.dims, vol.spacing, ids.astype(np.int64), n_classes)


# ---------------------------------------------------------------------------
# Series assembly


def load_series(manifest: Sequence[tuple], *, label: str = "series") -> Volume4D:
    """Assemble a 4D series from (path, time_in_weeks) entries.

    Entries are sorted by time; at least two distinct time points are
    required and all volumes must share dims and spacing.
    """
    entries = [(Path(p), float(t)) for p, t in manifest]
    if len(entries) < 2:
        raise ValueError(f"{label}: need at least 2 entries")
    times = [t for _, t in entries]
    if len(set(times)) != len(times):
        raise ValueError(f"{label}: duplicate time point")
    entries.sort(key=lambda e: e[1])
    volumes = [read_nifti(p) for p, _ in entries]
    return Volume4D(volumes=volumes, times=np.array([t for _, t in entries]))


def read_manifest(path) -> list[tuple[Path, float]]:
    """Parse a plain-text manifest: one `<path><TAB><time_weeks>` per line.

    Relative paths resolve against the manifest's directory. Blank lines and
    `#` comments are ignored.
    """
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected `path<TAB>time`")
        p = Path(parts[0])
        if not p.is_absolute():
            p = path.parent / p
        entries.append((p, float(parts[1])))
    return entries


def write_manifest(entries: Sequence[tuple], path) -> None:
    path = Path(path)
    lines = []
    for p, t in entries:
        p = Path(p)
        try:
            rel = p.relative_to(path.parent)
        except ValueError:
            rel = p
        lines.append(f"{rel}\t{t:g}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Normalization


def normalize_intensity(series: Volume4D) -> Volume4D:
    """Map all intensities affinely to [0, 1] using the series-global range.

    The original (min, max) is kept in intensity_scale so exported volumes
    can be mapped back. A constant series has no usable range and is an
    error rather than a silent pass-through.
    """
    gmin = min(float(v.data.min()) for v in series.volumes)
    gmax = max(float(v.data.max()) for v in series.volumes)
    if gmax <= gmin:
        raise ValueError("degenerate intensity range: series is constant")
    scale = gmax - gmin
    volumes = [
        replace(v, data=(v.data - gmin) / scale) for v in series.volumes
    ]
    return Volume4D(volumes=volumes, times=series.times.copy(),
                    intensity_scale=(gmin, gmax))


def denormalize_intensity(values: np.ndarray, intensity_scale: tuple[float, float]) -> np.ndarray:
    """Invert normalize_intensity on an array of normalized values."""
    gmin, gmax = intensity_scale
    return values * (gmax - gmin) + gmin


# ---------------------------------------------------------------------------
# Coordinate grids


def _axis_coords(n: int) -> np.ndarray:
    # (2i - (n-1)) / (n-1): integer numerator keeps mirror symmetry exact.
    if n == 1:
        return np.zeros(1)
    return (2.0 * np.arange(n) - (n - 1)) / (n - 1)


def coord_grid(dims: tuple[int, int, int], spacing=None) -> np.ndarray:
    """Normalized voxel-center coordinates, one (x, y, z) row per voxel.

    Each axis is mapped so centers span [-1, 1] (a single-voxel axis maps to
    0). Row order matches the disk/flat data layout. Spacing is accepted for
    interface symmetry and validated, but the normalization is per-axis.
    """
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise ValueError(f"invalid dims {dims}")
    if spacing is not None and any(s <= 0 for s in spacing):
        raise ValueError(f"spacing must be positive, got {spacing}")
    nx, ny, nz = (int(d) for d in dims)
    gx, gy, gz = np.meshgrid(
        _axis_coords(nx), _axis_coords(ny), _axis_coords(nz), indexing="ij"
    )
    return np.stack(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], axis=1
    )


def normalize_times(times, time_range: tuple[float, float]) -> np.ndarray:
    """Map times affinely so [t_min, t_max] spans [-1, 1]."""
    t0, t1 = float(time_range[0]), float(time_range[1])
    if t1 <= t0:
        raise ValueError("time range must have t_max > t_min")
    t = np.asarray(times, dtype=np.float64)
    return (2.0 * t - t0 - t1) / (t1 - t0)
