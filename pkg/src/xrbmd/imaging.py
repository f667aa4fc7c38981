"""Volume and image containers, raw-float file I/O and radiograph preprocessing.

Arrays are stored in numpy's C order with the fastest axis last, so a
volume of dims ``(nx, ny, nz)`` is held as ``data[z, y, x]`` and an image of
dims ``(w, h)`` as ``data[y, x]``. Flattening either gives the x-fastest
value order used by the on-disk payload.

File format: a text header of ``key: value`` lines next to a raw
little-endian float32 payload::

    dims: 64 64 64
    spacing: 2.0 2.0 2.0
    origin: 0.0 0.0 0.0
    unit: HOUNSFIELD
    dtype: f32le
    data: volume.v3r

Images use the same layout without ``origin``.
"""

from __future__ import annotations

import enum
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError

__all__ = [
    "VolumeUnit",
    "ImageUnit",
    "Volume3D",
    "Image2D",
    "atomic_write_bytes",
    "atomic_write_text",
    "read_volume",
    "write_volume",
    "read_image",
    "write_image",
    "split_xray",
    "normalize_to_canvas",
    "quantize_bits",
]

DTYPE_TAG = "f32le"
_DISK_DTYPE = np.dtype("<f4")


class VolumeUnit(str, enum.Enum):
    HOUNSFIELD = "HOUNSFIELD"
    DENSITY_MG_CM3 = "DENSITY_MG_CM3"
    DIMENSIONLESS = "DIMENSIONLESS"


class ImageUnit(str, enum.Enum):
    DIMENSIONLESS = "DIMENSIONLESS"
    AREAL_G_CM2 = "AREAL_G_CM2"


def _frozen_array(values, ndim, name):
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DataError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def _positive_triple(values, n, name):
    vals = tuple(float(v) for v in values)
    if len(vals) != n:
        raise DataError(f"{name} needs {n} components, got {len(vals)}")
    if not all(math.isfinite(v) and v > 0 for v in vals):
        raise DataError(f"{name} must be finite and strictly positive, got {vals}")
    return vals


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable 3D scalar grid.

    ``data`` is indexed ``[z, y, x]``; ``origin`` is the world position (mm)
    of the centre of voxel ``(0, 0, 0)``.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    unit: VolumeUnit = VolumeUnit.DIMENSIONLESS

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_array(self.data, 3, "volume data"))
        object.__setattr__(self, "spacing", _positive_triple(self.spacing, 3, "spacing"))
        origin = tuple(float(v) for v in self.origin)
        if len(origin) != 3 or not all(math.isfinite(v) for v in origin):
            raise DataError(f"origin must be 3 finite values, got {self.origin}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "unit", VolumeUnit(self.unit))

    @property
    def dims(self):
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def center(self):
        """World coordinates (mm) of the geometric centre of the grid."""
        return np.array(
            [o + 0.5 * (n - 1) * s for o, n, s in zip(self.origin, self.dims, self.spacing)]
        )

    @property
    def corners(self):
        """World coordinates of the 8 outer corners of the voxel grid, shape (8, 3)."""
        lo = np.array(self.origin) - 0.5 * np.array(self.spacing)
        hi = lo + np.array(self.dims) * np.array(self.spacing)
        return np.array(
            [[(lo, hi)[i][0], (lo, hi)[j][1], (lo, hi)[k][2]]
             for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        )

    def with_data(self, data, unit=None):
        return Volume3D(data, self.spacing, self.origin, self.unit if unit is None else unit)

    def is_binary(self):
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.origin == other.origin
            and self.unit == other.unit
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True, eq=False)
class Image2D:
    """Immutable 2D scalar image indexed ``[y, x]`` (row-major)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0)
    unit: ImageUnit = ImageUnit.DIMENSIONLESS

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen_array(self.data, 2, "image data"))
        object.__setattr__(self, "spacing", _positive_triple(self.spacing, 2, "spacing"))
        object.__setattr__(self, "unit", ImageUnit(self.unit))

    @property
    def dims(self):
        h, w = self.data.shape
        return (w, h)

    def with_data(self, data, spacing=None, unit=None):
        return Image2D(
            data,
            self.spacing if spacing is None else spacing,
            self.unit if unit is None else unit,
        )

    def is_binary(self):
        return bool(np.all((self.data == 0.0) | (self.data == 1.0)))

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.unit == other.unit
            and np.array_equal(self.data, other.data)
        )


# ---------------------------------------------------------------------------
# atomic file output


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via a temporary file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# header I/O


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


def _parse_header(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("header file not found", path=path)
    fields = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ParseError(f"line {lineno} is not 'key: value'", path=path)
        fields[key.strip()] = value.strip()
    return fields


def _require(fields, key, path):
    if key not in fields:
        raise ParseError("missing required key", key=key, path=path)
    return fields[key]


def _floats(fields, key, n, path):
    raw = _require(fields, key, path).split()
    if len(raw) != n:
        raise ParseError(f"expected {n} values, got {len(raw)}", key=key, path=path)
    try:
        vals = [float(v) for v in raw]
    except ValueError:
        raise ParseError(f"non-numeric value in {raw}", key=key, path=path) from None
    if not all(math.isfinite(v) for v in vals):
        raise ParseError("non-finite value", key=key, path=path)
    return vals


def _ints(fields, key, n, path):
    raw = _require(fields, key, path).split()
    if len(raw) != n:
        raise ParseError(f"expected {n} values, got {len(raw)}", key=key, path=path)
    try:
        vals = [int(v) for v in raw]
    except ValueError:
        raise ParseError(f"non-integer value in {raw}", key=key, path=path) from None
    if any(v < 1 for v in vals):
        raise ParseError("dimensions must be >= 1", key=key, path=path)
    return vals


def _read_payload(fields, path, count):
    dtype = _require(fields, "dtype", path)
    if dtype != DTYPE_TAG:
        raise ParseError(f"unsupported dtype '{dtype}'", key="dtype", path=path)
    data_path = Path(path).parent / _require(fields, "data", path)
    if not data_path.is_file():
        raise ParseError(f"data file {data_path} not found", key="data", path=path)
    raw = data_path.read_bytes()
    if len(raw) != count * _DISK_DTYPE.itemsize:
        raise ParseError(
            f"length mismatch: header declares {count} values, data file holds "
            f"{len(raw) / _DISK_DTYPE.itemsize:g}",
            key="data",
            path=path,
        )
    values = np.frombuffer(raw, dtype=_DISK_DTYPE).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise ParseError("data contains non-finite values", key="data", path=path)
    return values


def _checked(key, path, build):
    try:
        return build()
    except ParseError:
        raise
    except DataError as exc:
        raise ParseError(str(exc), key=key, path=path) from None


def read_volume(path):
    """Read a ``.v3h`` header and its raw payload into a :class:`Volume3D`."""
    fields = _parse_header(path)
    nx, ny, nz = _ints(fields, "dims", 3, path)
    spacing = _floats(fields, "spacing", 3, path)
    _checked("spacing", path, lambda: _positive_triple(spacing, 3, "spacing"))
    origin = _floats(fields, "origin", 3, path)
    unit = fields.get("unit", VolumeUnit.DIMENSIONLESS.value)
    if unit not in VolumeUnit.__members__:
        raise ParseError(f"unknown unit '{unit}'", key="unit", path=path)
    values = _read_payload(fields, path, nx * ny * nz)
    return Volume3D(values.reshape(nz, ny, nx), spacing, origin, VolumeUnit(unit))


def write_volume(volume, path):
    """Write ``volume`` as ``<path>`` (header) plus ``<stem>.v3r`` (payload).

    Values are stored as float32.
    """
    path = Path(path)
    data_name = path.with_suffix(".v3r").name
    header = (
        f"dims: {' '.join(str(d) for d in volume.dims)}\n"
        f"spacing: {_fmt(volume.spacing)}\n"
        f"origin: {_fmt(volume.origin)}\n"
        f"unit: {volume.unit.value}\n"
        f"dtype: {DTYPE_TAG}\n"
        f"data: {data_name}\n"
    )
    atomic_write_bytes(path.parent / data_name, volume.data.astype(_DISK_DTYPE).tobytes())
    atomic_write_text(path, header)


def read_image(path):
    """Read a ``.i2h`` header and its raw payload into an :class:`Image2D`."""
    fields = _parse_header(path)
    w, h = _ints(fields, "dims", 2, path)
    spacing = _floats(fields, "spacing", 2, path)
    _checked("spacing", path, lambda: _positive_triple(spacing, 2, "spacing"))
    unit = fields.get("unit", ImageUnit.DIMENSIONLESS.value)
    if unit not in ImageUnit.__members__:
        raise ParseError(f"unknown unit '{unit}'", key="unit", path=path)
    values = _read_payload(fields, path, w * h)
    return Image2D(values.reshape(h, w), spacing, ImageUnit(unit))


def write_image(image, path):
    path = Path(path)
    data_name = path.with_suffix(".i2r").name
    header = (
        f"dims: {image.dims[0]} {image.dims[1]}\n"
        f"spacing: {_fmt(image.spacing)}\n"
        f"unit: {image.unit.value}\n"
        f"dtype: {DTYPE_TAG}\n"
        f"data: {data_name}\n"
    )
    atomic_write_bytes(path.parent / data_name, image.data.astype(_DISK_DTYPE).tobytes())
    atomic_write_text(path, header)


# ---------------------------------------------------------------------------
# preprocessing


def split_xray(image):
    """Split a bilateral radiograph at the vertical centre line.

    The left half gets columns ``[0, w // 2)``; for odd widths the extra
    column goes to the right half.
    """
    w = image.dims[0]
    if w < 2:
        raise DataError(f"cannot split an image of width {w}")
    mid = w // 2
    return image.with_data(image.data[:, :mid]), image.with_data(image.data[:, mid:])


def _lerp_axis(data, coords, axis):
    """Linear interpolation at fractional indices along ``axis``, clamped to the edges.

    Written as ``a + f * (b - a)`` so constant runs are reproduced exactly.
    """
    n = data.shape[axis]
    c = np.clip(coords, 0.0, n - 1.0)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    f = c - i0
    a = np.take(data, i0, axis=axis)
    b = np.take(data, i1, axis=axis)
    shape = [1] * data.ndim
    shape[axis] = -1
    return a + f.reshape(shape) * (b - a)


def normalize_to_canvas(image, target_w, target_h):
    """Resize to cover a ``target_w`` x ``target_h`` canvas, then centre-crop.

    The scale factor is chosen so the image just covers the canvas (the
    shorter relative edge fits exactly) and the overflow is cropped
    symmetrically. Resampling is bilinear on pixel centres with edge
    clamping.
    """
    if target_w < 1 or target_h < 1:
        raise DataError(f"target size must be >= 1, got {target_w}x{target_h}")
    w, h = image.dims
    scale = max(target_w / w, target_h / h)
    off_x = 0.5 * (w * scale - target_w)
    off_y = 0.5 * (h * scale - target_h)
    xs = (np.arange(target_w) + 0.5 + off_x) / scale - 0.5
    ys = (np.arange(target_h) + 0.5 + off_y) / scale - 0.5
    out = _lerp_axis(_lerp_axis(image.data, xs, axis=1), ys, axis=0)
    spacing = (image.spacing[0] / scale, image.spacing[1] / scale)
    return image.with_data(out, spacing=spacing)


def quantize_bits(image, bits):
    """Quantise intensities in [0, 1] to ``bits`` bits (round half up)."""
    bits = int(bits)
    if not 1 <= bits <= 16:
        raise DataError(f"bits must be in 1..16, got {bits}")
    v = image.data
    if v.min() < 0.0 or v.max() > 1.0:
        raise DataError(
            f"quantize_bits needs values in [0, 1], got [{v.min():g}, {v.max():g}]"
        )
    levels = float(2**bits - 1)
    return image.with_data(np.floor(v * levels + 0.5) / levels)
