"""Synthetic hip phantoms with analytically known density and projections.

A phantom is a soft-tissue ellipsoid containing a femur analogue (a
spherical head joined to a cylindrical neck, each with a cortical shell and
a trabecular core) plus a row of calibration rods running along z below
the body. Densities are voxelised with 2x2x2 supersampling so boundary
voxels carry partial-volume values; masks use the voxel-centre test.

All world coordinates are in mm with the volume centred on the origin.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError
from .imaging import Image2D, ImageUnit, Volume3D, VolumeUnit
from .pose import RigidTransform6
from .projection import MG_CM3_MM_TO_G_CM2, ProjectionGeometry

__all__ = [
    "PhantomSpec",
    "SyntheticCase",
    "POSE_NAMES",
    "DEFAULT_POSE_OFFSETS",
    "generate_phantom",
    "generate_cohort",
    "cohort_case_specs",
    "analytic_areal_map",
    "analytic_bone_volumes",
    "standard_geometry",
    "voxelize",
    "sub_seed",
]

POSE_NAMES = ("standing", "supine", "abduction", "adduction")

DEFAULT_POSE_OFFSETS = {
    "standing": RigidTransform6(),
    "supine": RigidTransform6(rz=4.0, tz=-3.0),
    "abduction": RigidTransform6(ry=8.0, tx=2.0),
    "adduction": RigidTransform6(ry=-8.0, tx=-2.0),
}

MAX_POSE_DEG = 10.0
MAX_POSE_MM = 15.0


def sub_seed(seed, *names):
    """Deterministic child seed for a named consumer of the run seed."""
    key = tuple(zlib.crc32(str(n).encode()) for n in names)
    return int(np.random.SeedSequence(int(seed), spawn_key=key).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, densities and noise of one synthetic phantom.

    Densities are in mg/cm^3 and lengths in mm. The neck cylinder starts
    at the head centre and runs ``neck_length`` along ``neck_axis``. The
    proximal-femur region is the femur padded by ``pf_margin`` of soft
    tissue, restricted to points whose coordinate along the neck axis
    (measured from the head centre) lies in ``pf_axial_range``. The padding
    keeps the binary region boundary off the bone surface, where
    partial-volume voxels would otherwise bias region means.
    """

    dims: tuple = (64, 64, 64)
    spacing: tuple = (2.0, 2.0, 2.0)
    tissue_center: tuple = (0.0, 0.0, 0.0)
    tissue_radii: tuple = (55.0, 40.0, 60.0)
    tissue_density: float = 30.0
    head_center: tuple = (-14.0, 0.0, 18.0)
    head_radius: float = 17.0
    neck_axis: tuple = (0.8, 0.0, -0.6)
    neck_radius: float = 10.0
    neck_length: float = 44.0
    shell_thickness: float = 3.0
    cortical_density: float = 800.0
    trabecular_density: float = 250.0
    pf_axial_range: tuple = (-20.0, 30.0)
    pf_margin: float = 3.0
    rod_centers_xy: tuple = ((-40.0, -52.0), (-20.0, -52.0), (0.0, -52.0), (20.0, -52.0), (40.0, -52.0))
    rod_radius: float = 5.0
    rod_densities: tuple = (0.0, 50.0, 100.0, 150.0, 200.0)
    ref_slope: float = 0.8
    ref_intercept: float = 0.0
    noise_sigma_hu: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise DataError(f"dims must be 3 integers >= 2, got {self.dims}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError("spacing must be 3 positive values")
        axis = np.asarray(self.neck_axis, dtype=np.float64)
        if np.linalg.norm(axis) == 0:
            raise DataError("neck_axis must be non-zero")
        object.__setattr__(self, "neck_axis", tuple(float(v) for v in axis / np.linalg.norm(axis)))
        dens = [self.tissue_density, self.cortical_density, self.trabecular_density, *self.rod_densities]
        if min(dens) < 0:
            raise DataError("densities must be >= 0")
        if not 0 < self.shell_thickness < min(self.head_radius, self.neck_radius):
            raise DataError("shell_thickness must be positive and thinner than head and neck radii")
        if not self.neck_radius < self.head_radius <= self.neck_length:
            raise DataError("need neck_radius < head_radius <= neck_length")
        if self.pf_margin < 0:
            raise DataError("pf_margin must be >= 0")
        if len(self.rod_centers_xy) != len(self.rod_densities):
            raise DataError("one density per rod is required")
        if self.ref_slope == 0:
            raise DataError("ref_slope must be non-zero")
        if self.noise_sigma_hu < 0:
            raise DataError("noise_sigma_hu must be >= 0")
        half = 0.5 * np.array(self.dims) * np.array(self.spacing)
        hc, r = np.array(self.head_center), self.head_radius
        tip = hc + self.neck_length * np.array(self.neck_axis)
        tissue_lo = np.array(self.tissue_center) - np.array(self.tissue_radii)
        tissue_hi = np.array(self.tissue_center) + np.array(self.tissue_radii)
        pad = self.pf_margin
        pts = [hc - r - pad, hc + r + pad, tip - self.neck_radius - pad, tip + self.neck_radius + pad]
        if any(np.any(np.abs(p) > half) for p in pts + [tissue_lo, tissue_hi]):
            raise DataError("phantom shapes must lie inside the volume")
        if not all(_in_ellipsoid(np.asarray(p, dtype=np.float64), self.tissue_center, self.tissue_radii)
                   for p in pts):
            raise DataError("padded femur must lie inside the soft-tissue ellipsoid")
        rods = np.array(self.rod_centers_xy, dtype=np.float64).reshape(-1, 2)
        if np.any(np.abs(rods) + self.rod_radius > half[:2]):
            raise DataError("rods must lie inside the volume")
        for i in range(len(rods)):
            for j in range(i + 1, len(rods)):
                if np.linalg.norm(rods[i] - rods[j]) < 2 * self.rod_radius:
                    raise DataError("calibration rods overlap")

    @property
    def origin(self):
        return tuple(-0.5 * (n - 1) * s for n, s in zip(self.dims, self.spacing))


@dataclass
class SyntheticCase:
    spec: PhantomSpec
    hu: Volume3D
    density: Volume3D
    mask_bone: Volume3D
    mask_pf: Volume3D
    poses: dict
    true_vbmd: float
    rod_hu_means: np.ndarray
    rod_densities: np.ndarray
    geometry: ProjectionGeometry
    true_areal_map: Image2D
    case_id: str = "case_0000"
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shape predicates on (..., 3) point arrays


def _in_ellipsoid(p, center, radii):
    q = (p - np.asarray(center)) / np.asarray(radii)
    return np.sum(q * q, axis=-1) <= 1.0


def _in_femur(p, spec, shrink):
    hc = np.asarray(spec.head_center)
    axis = np.asarray(spec.neck_axis)
    d = p - hc
    head = np.sum(d * d, axis=-1) <= (spec.head_radius - shrink) ** 2
    s = d @ axis
    radial2 = np.sum(d * d, axis=-1) - s * s
    neck = (s >= 0) & (s <= spec.neck_length - shrink) & (radial2 <= (spec.neck_radius - shrink) ** 2)
    return head | neck


def _axial(p, spec):
    return (p - np.asarray(spec.head_center)) @ np.asarray(spec.neck_axis)


def _in_pf_slab(p, spec):
    s = _axial(p, spec)
    lo, hi = spec.pf_axial_range
    return (s >= lo) & (s <= hi)


def _rod_index(p, spec):
    """Index of the rod containing each point, -1 outside all rods."""
    idx = np.full(p.shape[:-1], -1, dtype=np.int64)
    for i, (cx, cy) in enumerate(spec.rod_centers_xy):
        inside = (p[..., 0] - cx) ** 2 + (p[..., 1] - cy) ** 2 <= spec.rod_radius**2
        idx[inside] = i
    return idx


def _density_at(p, spec):
    rho = np.zeros(p.shape[:-1])
    rho[_in_ellipsoid(p, spec.tissue_center, spec.tissue_radii)] = spec.tissue_density
    rho[_in_femur(p, spec, 0.0)] = spec.cortical_density
    rho[_in_femur(p, spec, spec.shell_thickness)] = spec.trabecular_density
    rods = _rod_index(p, spec)
    dens = np.asarray(spec.rod_densities, dtype=np.float64)
    rho[rods >= 0] = dens[rods[rods >= 0]]
    return rho


def _voxel_centers(spec, z_slice=slice(None)):
    nx, ny, nz = spec.dims
    ox, oy, oz = spec.origin
    sx, sy, sz = spec.spacing
    zs = (oz + np.arange(nz) * sz)[z_slice]
    ys = oy + np.arange(ny) * sy
    xs = ox + np.arange(nx) * sx
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    return np.stack([xx, yy, zz], axis=-1)


def voxelize(fn, spec, supersample=2):
    """Average ``fn`` over ``supersample**3`` sub-points per voxel, shape (nz, ny, nx)."""
    k = int(supersample)
    offs = (np.arange(k) + 0.5) / k - 0.5
    sp = np.asarray(spec.spacing)
    out = np.zeros(tuple(reversed(spec.dims)))
    nz = spec.dims[2]
    chunk = max(1, 2_000_000 // (spec.dims[0] * spec.dims[1] * k**3))
    for z0 in range(0, nz, chunk):
        centers = _voxel_centers(spec, slice(z0, z0 + chunk))
        acc = np.zeros(centers.shape[:-1])
        for dz in offs:
            for dy in offs:
                for dx in offs:
                    acc += fn(centers + sp * np.array([dx, dy, dz]))
        out[z0:z0 + chunk] = acc / k**3
    return out


def analytic_bone_volumes(spec):
    """Closed-form volumes (mm^3) of the padded femur, the femur and its core.

    The region mean density over a proximal-femur range covering the
    whole padded femur is then
    ``(tissue*(padded-bone) + cortical*(bone-core) + trabecular*core) / padded``.
    """

    def union(r, a, length):
        s_star = math.sqrt(r * r - a * a)
        overlap = math.pi * a * a * s_star + math.pi * (r * r * (r - s_star) - (r**3 - s_star**3) / 3.0)
        return 4.0 / 3.0 * math.pi * r**3 + math.pi * a * a * length - overlap

    t, m = spec.shell_thickness, spec.pf_margin
    padded = union(spec.head_radius + m, spec.neck_radius + m, spec.neck_length + m)
    bone = union(spec.head_radius, spec.neck_radius, spec.neck_length)
    core = union(spec.head_radius - t, spec.neck_radius - t, spec.neck_length - t)
    return padded, bone, core


# ---------------------------------------------------------------------------
# analytic projection


def _sphere_interval(o, d, c, r):
    oc = o - c
    b = np.sum(oc * d, axis=-1)
    disc = b * b - (np.sum(oc * oc, axis=-1) - r * r)
    root = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - root, -b + root
    miss = disc <= 0
    t0[miss], t1[miss] = np.inf, -np.inf
    return t0, t1


def _cylinder_interval(o, d, base, axis, r, length):
    """Ray interval inside the finite cylinder ``base + s*axis``, 0 <= s <= length."""
    ob = o - base
    da = d @ axis
    oa = ob @ axis
    dp = d - da[..., None] * axis
    op = ob - oa[..., None] * axis
    a = np.sum(dp * dp, axis=-1)
    b = np.sum(dp * op, axis=-1)
    c = np.sum(op * op, axis=-1) - r * r
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = np.where(a > 0, (-b - root) / a, np.where(c <= 0, -np.inf, np.inf))
        t1 = np.where(a > 0, (-b + root) / a, np.where(c <= 0, np.inf, -np.inf))
        t0 = np.where((a > 0) & (disc <= 0), np.inf, t0)
        t1 = np.where((a > 0) & (disc <= 0), -np.inf, t1)
        c0, c1 = _slab_interval(oa, da, 0.0, length)
    return np.maximum(t0, c0), np.minimum(t1, c1)


def _slab_interval(coord0, rate, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (lo - coord0) / rate
        tb = (hi - coord0) / rate
    t0 = np.minimum(ta, tb)
    t1 = np.maximum(ta, tb)
    flat = rate == 0
    inside = (coord0 >= lo) & (coord0 <= hi)
    t0 = np.where(flat, np.where(inside, -np.inf, np.inf), t0)
    t1 = np.where(flat, np.where(inside, np.inf, -np.inf), t1)
    return t0, t1


def _union_length(a0, a1, b0, b1, lo, hi):
    """Length of ([a0,a1] U [b0,b1]) intersected with [lo, hi]."""
    a0, a1 = np.maximum(a0, lo), np.minimum(a1, hi)
    b0, b1 = np.maximum(b0, lo), np.minimum(b1, hi)
    la = np.maximum(a1 - a0, 0.0)
    lb = np.maximum(b1 - b0, 0.0)
    inter = np.maximum(np.minimum(a1, b1) - np.maximum(a0, b0), 0.0)
    inter = np.where((la > 0) & (lb > 0), inter, 0.0)
    return la + lb - inter


def _analytic_point_map(spec, geometry, pose):
    from .projection import _rays

    dummy = Volume3D(np.zeros((1, 1, 1)), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0))
    o, d, t_lim = _rays(geometry, dummy, pose)
    hc = np.asarray(spec.head_center)
    axis = np.asarray(spec.neck_axis)
    s_lo, s_hi = _slab_interval((o - hc) @ axis, d @ axis, *spec.pf_axial_range)
    lo = np.maximum(t_lim[..., 0], s_lo)
    hi = np.minimum(t_lim[..., 1], s_hi)

    def femur_length(shrink):
        h0, h1 = _sphere_interval(o, d, hc, spec.head_radius - shrink)
        n0, n1 = _cylinder_interval(o, d, hc, axis, spec.neck_radius - shrink, spec.neck_length - shrink)
        return _union_length(h0, h1, n0, n1, lo, hi)

    padded = femur_length(-spec.pf_margin)
    bone = femur_length(0.0)
    core = femur_length(spec.shell_thickness)
    return (
        spec.tissue_density * padded
        + (spec.cortical_density - spec.tissue_density) * bone
        + (spec.trabecular_density - spec.cortical_density) * core
    )


def analytic_areal_map(spec, geometry, pose=None, supersample=4):
    """Exact projection (g/cm^2) of the continuous proximal-femur region.

    Each pixel holds the mean over ``supersample**2`` evenly spaced rays
    across its footprint, so the map integrates to the region mass even
    where chord lengths change quickly.
    """
    k = int(supersample)
    w, h = geometry.detector_dims
    fine = replace(
        geometry,
        detector_dims=(w * k, h * k),
        detector_spacing=(geometry.detector_spacing[0] / k, geometry.detector_spacing[1] / k),
    )
    areal = _analytic_point_map(spec, fine, pose).reshape(h, k, w, k).mean(axis=(1, 3))
    return Image2D(areal * MG_CM3_MM_TO_G_CM2, geometry.detector_spacing, ImageUnit.AREAL_G_CM2)


def standard_geometry(spec, mode="PARALLEL", step_mm=None, source_distance=400.0,
                      detector_distance=200.0, detector_dims=None, detector_spacing=None):
    """Antero-posterior view along +y through the volume centre.

    The detector spans x (columns) and z (rows). For ``PINHOLE`` the source
    sits ``source_distance`` before the centre and the detector
    ``detector_distance`` behind it.
    """
    nx, _, nz = spec.dims
    sx, _, sz = spec.spacing
    dims = detector_dims or (nx, nz)
    if detector_spacing is None:
        detector_spacing = (sx, sz)
        if mode == "PINHOLE":
            mag = (source_distance + detector_distance) / source_distance
            detector_spacing = (sx * mag, sz * mag)
    step = step_mm if step_mm is not None else 0.5 * min(spec.spacing)
    if mode == "PARALLEL":
        return ProjectionGeometry("PARALLEL", dims, detector_spacing, (0.0, detector_distance, 0.0),
                                  (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), ray_dir=(0.0, 1.0, 0.0), step_mm=step)
    return ProjectionGeometry("PINHOLE", dims, detector_spacing, (0.0, detector_distance, 0.0),
                              (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), source=(0.0, -source_distance, 0.0),
                              step_mm=step)


# ---------------------------------------------------------------------------
# generators


def _rod_roi_means(hu, spec):
    """Mean HU over voxels lying entirely inside each rod."""
    centers = _voxel_centers(spec)
    half_diag = 0.5 * math.hypot(spec.spacing[0], spec.spacing[1])
    means = []
    for cx, cy in spec.rod_centers_xy:
        r2 = (centers[..., 0] - cx) ** 2 + (centers[..., 1] - cy) ** 2
        roi = r2 <= (spec.rod_radius - half_diag) ** 2
        if not roi.any():
            raise DataError("rod is too thin to hold a full-voxel ROI")
        means.append(float(hu[roi].mean()))
    return np.array(means)


def generate_phantom(spec, poses=None, geometry=None, case_id="case_0000"):
    """Voxelise ``spec`` into a :class:`SyntheticCase`.

    ``poses`` maps pose names to :class:`RigidTransform6`; by default every
    name in :data:`POSE_NAMES` gets the identity pose.
    """
    density = voxelize(lambda p: _density_at(p, spec), spec)
    centers = _voxel_centers(spec)
    bone = _in_femur(centers, spec, 0.0)
    pf = _in_femur(centers, spec, -spec.pf_margin) & _in_pf_slab(centers, spec)
    if not pf.any():
        raise DataError("proximal-femur region is empty")
    hu = (density - spec.ref_intercept) / spec.ref_slope
    if spec.noise_sigma_hu > 0:
        rng = np.random.Generator(np.random.PCG64(sub_seed(spec.seed, "synth", "noise")))
        hu = hu + rng.normal(0.0, spec.noise_sigma_hu, size=hu.shape)
    kw = dict(spacing=spec.spacing, origin=spec.origin)
    true_vbmd = float(np.sum(density * pf) / np.sum(pf))
    geometry = geometry or standard_geometry(spec)
    if poses is None:
        poses = {name: RigidTransform6() for name in POSE_NAMES}
    return SyntheticCase(
        spec=spec,
        hu=Volume3D(hu, unit=VolumeUnit.HOUNSFIELD, **kw),
        density=Volume3D(density, unit=VolumeUnit.DENSITY_MG_CM3, **kw),
        mask_bone=Volume3D(bone.astype(np.float64), **kw),
        mask_pf=Volume3D(pf.astype(np.float64), **kw),
        poses=dict(poses),
        true_vbmd=true_vbmd,
        rod_hu_means=_rod_roi_means(hu, spec),
        rod_densities=np.asarray(spec.rod_densities, dtype=np.float64),
        geometry=geometry,
        true_areal_map=analytic_areal_map(spec, geometry),
        case_id=case_id,
    )


def _check_pose_bounds(pose):
    a = pose.as_array()
    if np.any(np.abs(a[:3]) > MAX_POSE_DEG + 1e-9) or np.any(np.abs(a[3:]) > MAX_POSE_MM + 1e-9):
        raise DataError(f"pose offset {a} exceeds +-{MAX_POSE_DEG} deg / +-{MAX_POSE_MM} mm")


def cohort_case_specs(n_cases, density_range, seed, base=None, pose_offsets=None,
                      pose_jitter=(0.0, 0.0)):
    """Per-case phantom specs and pose sets, without voxelising anything."""
    if n_cases < 1:
        raise DataError("n_cases must be >= 1")
    lo, hi = (float(v) for v in density_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or hi < lo:
        raise DataError(f"invalid density range {density_range}")
    base = base or PhantomSpec()
    offsets = DEFAULT_POSE_OFFSETS if pose_offsets is None else pose_offsets
    for p in offsets.values():
        _check_pose_bounds(p)
    jit_deg, jit_mm = (float(v) for v in pose_jitter)
    rng = np.random.Generator(np.random.PCG64(sub_seed(seed, "synth", "cohort")))
    densities = rng.uniform(lo, hi, size=n_cases)
    out = []
    for i in range(n_cases):
        case_seed = sub_seed(seed, "synth", "case", i)
        poses = {}
        jr = np.random.Generator(np.random.PCG64(sub_seed(case_seed, "poses")))
        for name, off in offsets.items():
            jitter = np.concatenate([jr.uniform(-jit_deg, jit_deg, 3), jr.uniform(-jit_mm, jit_mm, 3)])
            a = off.as_array() + jitter
            a[:3] = np.clip(a[:3], -MAX_POSE_DEG, MAX_POSE_DEG)
            a[3:] = np.clip(a[3:], -MAX_POSE_MM, MAX_POSE_MM)
            poses[name] = RigidTransform6.from_array(a)
        spec = replace(base, trabecular_density=float(densities[i]), seed=case_seed)
        out.append((f"case_{i:04d}", spec, poses))
    return out


def generate_cohort(n_cases, density_range=(100.0, 300.0), pose_offsets=None, seed=0,
                    base=None, pose_jitter=(0.0, 0.0), geometry=None):
    """Cohort of phantoms whose trabecular density is drawn uniformly in ``density_range``.

    Each case receives every pose in ``pose_offsets`` (default
    :data:`DEFAULT_POSE_OFFSETS`) plus a uniform per-case jitter of up to
    ``pose_jitter = (deg, mm)``, clipped to +-10 deg / +-15 mm.
    """
    specs = cohort_case_specs(n_cases, density_range, seed, base, pose_offsets, pose_jitter)
    return [generate_phantom(spec, poses, geometry, case_id) for case_id, spec, poses in specs]
