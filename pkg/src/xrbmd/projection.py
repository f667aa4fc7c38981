"""Masked ray-casting DRR renderer.

Each detector pixel is rendered by marching a single ray through the
(posed) volume and accumulating ``density * mask * step``. The ray is first
clipped against the outer boundary of the voxel grid and then sampled at
the midpoints of consecutive ``step_mm`` segments; the final segment is
shortened to end exactly at the exit point. Samples use trilinear
interpolation with edge clamping inside the grid; the mask is sampled the
same way and thresholded at 0.5.

Pixels are independent, so rendering is parallelised over blocks of
detector rows. Every pixel is accumulated in the same order regardless of
the block layout, so results are bit-identical for any worker count.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DataError, ParseError
from .imaging import Image2D, ImageUnit, VolumeUnit, atomic_write_text
from .pose import RigidTransform6
from .textconfig import format_kv, get_float, get_floats, get_ints, read_kv

__all__ = [
    "ProjectionMode",
    "ProjectionGeometry",
    "sample_trilinear",
    "render_drr",
    "read_geometry",
    "write_geometry",
    "geometry_from_fields",
    "MG_CM3_MM_TO_G_CM2",
]

# (mg/cm^3) * mm -> g/cm^2
MG_CM3_MM_TO_G_CM2 = 1e-4


class ProjectionMode(str, enum.Enum):
    PARALLEL = "PARALLEL"
    PINHOLE = "PINHOLE"


def _vec3(v, name):
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise DataError(f"{name} must be 3 finite values")
    return tuple(float(x) for x in arr)


@dataclass(frozen=True)
class ProjectionGeometry:
    """Flat detector plus either a parallel ray direction or a point source.

    Pixel ``(row j, column i)`` sits at
    ``detector_center + (i - (w-1)/2) * su * basis_u + (j - (h-1)/2) * sv * basis_v``.
    For ``PINHOLE`` the ray runs from ``source`` to the pixel; for
    ``PARALLEL`` it is the full line through the pixel along ``ray_dir``.
    """

    mode: ProjectionMode
    detector_dims: tuple
    detector_spacing: tuple
    detector_center: tuple
    basis_u: tuple
    basis_v: tuple
    ray_dir: tuple | None = None
    source: tuple | None = None
    step_mm: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mode", ProjectionMode(self.mode))
        dims = tuple(int(d) for d in self.detector_dims)
        if len(dims) != 2 or min(dims) < 1:
            raise DataError(f"detector_dims must be two positive integers, got {self.detector_dims}")
        object.__setattr__(self, "detector_dims", dims)
        sp = tuple(float(s) for s in self.detector_spacing)
        if len(sp) != 2 or not all(math.isfinite(s) and s > 0 for s in sp):
            raise DataError(f"detector_spacing must be two positive values, got {self.detector_spacing}")
        object.__setattr__(self, "detector_spacing", sp)
        for name in ("detector_center", "basis_u", "basis_v"):
            object.__setattr__(self, name, _vec3(getattr(self, name), name))
        u, v = np.array(self.basis_u), np.array(self.basis_v)
        if abs(u @ u - 1) > 1e-9 or abs(v @ v - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise DataError("basis_u and basis_v must be orthonormal within 1e-9")
        step = float(self.step_mm)
        if not (math.isfinite(step) and step > 0):
            raise DataError(f"step_mm must be > 0, got {self.step_mm}")
        object.__setattr__(self, "step_mm", step)
        if self.mode is ProjectionMode.PARALLEL:
            if self.ray_dir is None:
                raise DataError("PARALLEL geometry needs ray_dir")
            d = np.array(_vec3(self.ray_dir, "ray_dir"))
            norm = np.linalg.norm(d)
            if norm == 0:
                raise DataError("ray_dir must be non-zero")
            object.__setattr__(self, "ray_dir", tuple(float(x) for x in d / norm))
            object.__setattr__(self, "source", None)
        else:
            if self.source is None:
                raise DataError("PINHOLE geometry needs source")
            s = np.array(_vec3(self.source, "source"))
            normal = np.cross(u, v)
            if abs((s - np.array(self.detector_center)) @ normal) < 1e-9:
                raise DataError("PINHOLE source lies on the detector plane")
            object.__setattr__(self, "source", tuple(float(x) for x in s))
            object.__setattr__(self, "ray_dir", None)

    @property
    def shape(self):
        w, h = self.detector_dims
        return (h, w)

    def pixel_positions(self):
        """World coordinates of pixel centres, shape (h, w, 3)."""
        w, h = self.detector_dims
        su, sv = self.detector_spacing
        iu = (np.arange(w) - 0.5 * (w - 1)) * su
        jv = (np.arange(h) - 0.5 * (h - 1)) * sv
        return (
            np.array(self.detector_center)[None, None, :]
            + iu[None, :, None] * np.array(self.basis_u)[None, None, :]
            + jv[:, None, None] * np.array(self.basis_v)[None, None, :]
        )

    def with_step(self, step_mm):
        return ProjectionGeometry(
            self.mode, self.detector_dims, self.detector_spacing, self.detector_center,
            self.basis_u, self.basis_v, self.ray_dir, self.source, step_mm,
        )


# ---------------------------------------------------------------------------
# geometry text files


def geometry_from_fields(fields, path=None):
    mode = fields.get("mode", "").upper()
    if mode not in ProjectionMode.__members__:
        raise ParseError(f"mode must be PARALLEL or PINHOLE, got '{mode}'", key="mode", path=path)
    kwargs = dict(
        mode=mode,
        detector_dims=get_ints(fields, "detector_dims", 2, path),
        detector_spacing=get_floats(fields, "detector_spacing", 2, path),
        detector_center=get_floats(fields, "detector_center", 3, path),
        basis_u=get_floats(fields, "basis_u", 3, path),
        basis_v=get_floats(fields, "basis_v", 3, path),
        step_mm=get_float(fields, "step_mm", path=path),
    )
    if mode == "PARALLEL":
        kwargs["ray_dir"] = get_floats(fields, "ray_dir", 3, path)
    else:
        kwargs["source"] = get_floats(fields, "source", 3, path)
    return ProjectionGeometry(**kwargs)


def geometry_items(geom):
    def f(vals):
        return " ".join(repr(float(v)) for v in vals)

    items = [
        ("mode", geom.mode.value),
        ("detector_dims", f"{geom.detector_dims[0]} {geom.detector_dims[1]}"),
        ("detector_spacing", f(geom.detector_spacing)),
        ("detector_center", f(geom.detector_center)),
        ("basis_u", f(geom.basis_u)),
        ("basis_v", f(geom.basis_v)),
    ]
    if geom.mode is ProjectionMode.PARALLEL:
        items.append(("ray_dir", f(geom.ray_dir)))
    else:
        items.append(("source", f(geom.source)))
    items.append(("step_mm", repr(geom.step_mm)))
    return items


def read_geometry(path):
    return geometry_from_fields(read_kv(path), path=path)


def write_geometry(geom, path):
    atomic_write_text(path, format_kv(geometry_items(geom)))


# ---------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _trilinear_idx(vol, fx, fy, fz):
    """Trilinear sample at continuous index (fx, fy, fz), clamped to the grid."""
    nz, ny, nx = vol.shape
    fx = min(max(fx, 0.0), nx - 1.0)
    fy = min(max(fy, 0.0), ny - 1.0)
    fz = min(max(fz, 0.0), nz - 1.0)
    ix = min(int(math.floor(fx)), max(nx - 2, 0))
    iy = min(int(math.floor(fy)), max(ny - 2, 0))
    iz = min(int(math.floor(fz)), max(nz - 2, 0))
    ax = fx - ix
    ay = fy - iy
    az = fz - iz
    jx = min(ix + 1, nx - 1)
    jy = min(iy + 1, ny - 1)
    jz = min(iz + 1, nz - 1)
    c00 = vol[iz, iy, ix] * (1.0 - ax) + vol[iz, iy, jx] * ax
    c10 = vol[iz, jy, ix] * (1.0 - ax) + vol[iz, jy, jx] * ax
    c01 = vol[jz, iy, ix] * (1.0 - ax) + vol[jz, iy, jx] * ax
    c11 = vol[jz, jy, ix] * (1.0 - ax) + vol[jz, jy, jx] * ax
    c0 = c00 * (1.0 - ay) + c10 * ay
    c1 = c01 * (1.0 - ay) + c11 * ay
    return c0 * (1.0 - az) + c1 * az


@njit(cache=True, nogil=True)
def _render_rows(vol, mask, use_mask, origin, inv_spacing, lo, hi,
                 ray_o, ray_d, t_lim, step, row0, row1, out):
    nz, ny, nx = vol.shape
    w = out.shape[1]
    for j in range(row0, row1):
        for i in range(w):
            ox = ray_o[j, i, 0]
            oy = ray_o[j, i, 1]
            oz = ray_o[j, i, 2]
            dx = ray_d[j, i, 0]
            dy = ray_d[j, i, 1]
            dz = ray_d[j, i, 2]
            t0 = t_lim[j, i, 0]
            t1 = t_lim[j, i, 1]
            # slab clipping against the voxel-grid box
            hit = True
            for a in range(3):
                o = ox if a == 0 else (oy if a == 1 else oz)
                d = dx if a == 0 else (dy if a == 1 else dz)
                if d == 0.0:
                    if o < lo[a] or o > hi[a]:
                        hit = False
                else:
                    ta = (lo[a] - o) / d
                    tb = (hi[a] - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if not hit or t1 <= t0:
                out[j, i] = 0.0
                continue
            length = t1 - t0
            n = int(math.ceil(length / step))
            if n < 1:
                n = 1
            acc = 0.0
            for k in range(n):
                seg0 = t0 + k * step
                seg1 = seg0 + step
                if seg1 > t1:
                    seg1 = t1
                dl = seg1 - seg0
                if dl <= 0.0:
                    break
                t = 0.5 * (seg0 + seg1)
                fx = (ox + t * dx - origin[0]) * inv_spacing[0]
                fy = (oy + t * dy - origin[1]) * inv_spacing[1]
                fz = (oz + t * dz - origin[2]) * inv_spacing[2]
                if use_mask:
                    if _trilinear_idx(mask, fx, fy, fz) < 0.5:
                        continue
                acc += _trilinear_idx(vol, fx, fy, fz) * dl
            out[j, i] = acc


def sample_trilinear(volume, point_mm):
    """Trilinearly interpolate ``volume`` at a world point (mm).

    Points outside the outer boundary of the voxel grid return 0; inside the
    half-voxel border the nearest edge samples are used.
    """
    p = np.asarray(point_mm, dtype=np.float64)
    f = (p - np.array(volume.origin)) / np.array(volume.spacing)
    dims = np.array(volume.dims)
    if np.any(f < -0.5) or np.any(f > dims - 0.5):
        return 0.0
    return float(_trilinear_idx(volume.data, f[0], f[1], f[2]))


def _rays(geometry, volume, pose):
    """Ray origins/directions in the volume frame plus allowed parameter ranges."""
    pix = geometry.pixel_positions()
    h, w = geometry.shape
    if geometry.mode is ProjectionMode.PARALLEL:
        origins = pix
        dirs = np.broadcast_to(np.array(geometry.ray_dir), (h, w, 3))
        t_lim = np.empty((h, w, 2))
        t_lim[..., 0] = -np.inf
        t_lim[..., 1] = np.inf
    else:
        src = np.array(geometry.source)
        delta = pix - src
        dist = np.linalg.norm(delta, axis=-1)
        origins = np.broadcast_to(src, (h, w, 3))
        dirs = delta / dist[..., None]
        t_lim = np.stack([np.zeros_like(dist), dist], axis=-1)
    if pose is not None:
        rot = pose.rotation
        c = volume.center
        # world -> volume frame: R^T (x - c - t) + c ; row vectors so multiply by R
        origins = (origins - c - pose.translation) @ rot + c
        dirs = dirs @ rot
    return (
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t_lim, dtype=np.float64),
    )


def render_drr(volume, mask, geometry, pose=None, workers=1):
    """Render a digitally reconstructed radiograph.

    Parameters
    ----------
    volume : Volume3D
        Density volume (mg/cm^3). Other units are integrated the same way
        but the result is then labelled dimensionless.
    mask : Volume3D or None
        Binary region mask on the same grid; voxels outside it are ignored.
    geometry : ProjectionGeometry
    pose : RigidTransform6, optional
        Rigid motion applied to the volume about its centre.
    workers : int
        Number of threads; detector rows are split into contiguous blocks.

    Returns
    -------
    Image2D
        Line integrals in g/cm^2 with the detector pixel spacing.
    """
    if mask is not None:
        if mask.data.shape != volume.data.shape:
            raise DataError(f"mask dims {mask.dims} do not match volume dims {volume.dims}")
        mask_arr = mask.data
        use_mask = True
    else:
        mask_arr = np.zeros((1, 1, 1))
        use_mask = False
    if pose is None:
        pose = RigidTransform6()
    origins, dirs, t_lim = _rays(geometry, volume, pose)
    spacing = np.array(volume.spacing)
    origin = np.array(volume.origin)
    lo = origin - 0.5 * spacing
    hi = lo + np.array(volume.dims) * spacing
    h, w = geometry.shape
    out = np.zeros((h, w))
    args = (volume.data, mask_arr, use_mask, origin, 1.0 / spacing, lo, hi,
            origins, dirs, t_lim, geometry.step_mm)
    workers = max(1, int(workers))
    if workers == 1 or h == 1:
        _render_rows(*args, 0, h, out)
    else:
        bounds = np.linspace(0, h, min(workers, h) + 1).astype(int)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_render_rows, *args, int(a), int(b), out)
                for a, b in zip(bounds[:-1], bounds[1:])
            ]
            for fut in futures:
                fut.result()
    out *= MG_CM3_MM_TO_G_CM2
    unit = ImageUnit.AREAL_G_CM2 if volume.unit == VolumeUnit.DENSITY_MG_CM3 else ImageUnit.DIMENSIONLESS
    return Image2D(out, geometry.detector_spacing, unit)
