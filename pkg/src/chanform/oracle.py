"""Deterministic propagation oracle.

Large-scale labels come from free-space loss, Deygout knife-edge diffraction
over the raster height profile, vegetation attenuation and an optional
spatially correlated shadowing field. Multipath comes from a voxel ray
launcher with specular reflections.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .env import MaterialSpec, RasterEnv, VoxelEnv
from .errors import (
    DegenerateLinkError,
    InvalidEndpointError,
    NoPathError,
    OutOfBoundsError,
    ValidationError,
)

C = 299_792_458.0
EPS0 = 8.8541878128e-12
FSPL_CONST_DB = 147.55


@dataclass(frozen=True)
class Link:
    tx: tuple
    rx: tuple
    frequency: float

    def __post_init__(self):
        if self.frequency <= 0:
            raise ValidationError("frequency must be > 0")
        if len(self.tx) != 3 or len(self.rx) != 3:
            raise ValidationError("link endpoints must be 3D points")
        if tuple(self.tx) == tuple(self.rx):
            raise DegenerateLinkError("tx and rx coincide")

    @property
    def wavelength(self) -> float:
        return C / self.frequency

    @property
    def distance(self) -> float:
        return math.dist(self.tx, self.rx)

    @property
    def ground_distance(self) -> float:
        return math.hypot(self.rx[0] - self.tx[0], self.rx[1] - self.tx[1])


class Obstruction(NamedTuple):
    distance: float  # along-track from TX, m
    excess: float  # height above the TX-RX line, m
    height: float  # absolute obstacle height, m


@dataclass(frozen=True)
class PathComponent:
    delay: float
    power_gain: float  # dB relative to free space at 1 m
    interaction_count: int
    geometry: tuple = ()  # reflection points


@dataclass(frozen=True)
class ChannelSample:
    path_loss: float
    los: bool
    paths: tuple = ()
    pdp: tuple = ()  # ((delay_bin_s, power_db), ...)
    rms_delay_spread: float = 0.0
    effective_path_count: int = 0

    def to_dict(self) -> dict:
        return {
            "path_loss_db": self.path_loss,
            "los": bool(self.los),
            "rms_delay_spread_s": self.rms_delay_spread,
            "effective_path_count": int(self.effective_path_count),
            "pdp": [list(p) for p in self.pdp],
            "paths": [
                {
                    "delay_s": p.delay,
                    "power_gain_db": p.power_gain,
                    "interaction_count": p.interaction_count,
                    "geometry": [list(q) for q in p.geometry],
                }
                for p in self.paths
            ],
        }


@dataclass(frozen=True)
class OracleConfig:
    shadowing_sigma_db: float = 0.0
    shadowing_corr_m: float = 50.0
    vegetation_db_per_m: float | None = None  # None: use the raster's per-cell rates
    seed: int = 0
    deygout_depth: int = 3
    nu_cutoff: float = -0.78


def fspl_db(distance, frequency):
    """Friis free-space loss in dB, ``distance`` in m and ``frequency`` in Hz."""
    return 20 * np.log10(distance) + 20 * np.log10(frequency) - FSPL_CONST_DB


def knife_edge_j(nu):
    """Single knife-edge loss J(nu) in dB; zero for nu <= -0.78."""
    nu = np.asarray(nu, float)
    val = 6.9 + 20 * np.log10(np.sqrt((nu - 0.1) ** 2 + 1) + nu - 0.1)
    out = np.where(nu > -0.78, val, 0.0)
    return float(out) if out.ndim == 0 else out


def fresnel_radius(d1, d2, wavelength):
    return np.sqrt(wavelength * d1 * d2 / (d1 + d2))


def diffraction_nu(excess, d1, d2, wavelength):
    return excess * np.sqrt(2 * (d1 + d2) / (wavelength * d1 * d2))


# --------------------------------------------------------------------------
# raster profile


@dataclass(frozen=True)
class Profile:
    """Cells crossed by the ground track of a link, in walk order."""

    iy: np.ndarray
    ix: np.ndarray
    d0: np.ndarray  # entry distance along track, m
    d1: np.ndarray  # exit distance along track, m
    total: float  # ground distance, m

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.d0 + self.d1)

    @property
    def length(self) -> np.ndarray:
        return self.d1 - self.d0


def grid_walk(raster: RasterEnv, p0, p1) -> Profile:
    """Cells traversed by the segment ``p0 -> p1`` (2D), with entry/exit distances.

    Equivalent to incremental (Amanatides-Woo) traversal: every x- and
    y-grid-line crossing is a step boundary.
    """
    g = raster.resolution
    ox, oy = raster.origin
    ny, nx = raster.shape
    u0, v0 = (p0[0] - ox) / g, (p0[1] - oy) / g
    u1, v1 = (p1[0] - ox) / g, (p1[1] - oy) / g
    du, dv = u1 - u0, v1 - v0
    total = g * math.hypot(du, dv)
    ts = [np.array([0.0, 1.0])]
    if du != 0.0:
        ks = np.arange(math.floor(min(u0, u1)) + 1, math.ceil(max(u0, u1)))
        ts.append((ks - u0) / du)
    if dv != 0.0:
        ks = np.arange(math.floor(min(v0, v1)) + 1, math.ceil(max(v0, v1)))
        ts.append((ks - v0) / dv)
    t = np.unique(np.clip(np.concatenate(ts), 0.0, 1.0))
    if t.size < 2:
        t = np.array([0.0, 1.0])
    tm = 0.5 * (t[:-1] + t[1:])
    ix = np.clip(np.floor(u0 + tm * du).astype(int), 0, nx - 1)
    iy = np.clip(np.floor(v0 + tm * dv).astype(int), 0, ny - 1)
    return Profile(iy, ix, t[:-1] * total, t[1:] * total, total)


def _check_bounds(raster: RasterEnv, link: Link):
    for p in (link.tx, link.rx):
        if not raster.contains(p[0], p[1]):
            raise OutOfBoundsError(f"endpoint {p} outside raster bounds {raster.bounds}")


def _line_height(link: Link, d, total):
    if total == 0:
        return np.full_like(np.asarray(d, float), min(link.tx[2], link.rx[2]))
    return link.tx[2] + (link.rx[2] - link.tx[2]) * np.asarray(d) / total


def profile_of(raster: RasterEnv, link: Link) -> Profile:
    _check_bounds(raster, link)
    return grid_walk(raster, link.tx[:2], link.rx[:2])


def los_test(raster: RasterEnv, link: Link, profile: Profile | None = None):
    """Return ``(los, obstructions)``.

    A crossed cell blocks the link when its height exceeds the TX-RX line at
    the cell's along-track midpoint. Runs of consecutive blocking cells form
    one obstruction, reported at its peak excess.
    """
    prof = profile if profile is not None else profile_of(raster, link)
    h = raster.height[prof.iy, prof.ix]
    mid = prof.mid
    excess = h - _line_height(link, mid, prof.total)
    blocked = excess > 0
    obstructions = []
    if blocked.any():
        idx = np.flatnonzero(blocked)
        breaks = np.flatnonzero(np.diff(idx) > 1)
        for run in np.split(idx, breaks + 1):
            k = run[np.argmax(excess[run])]
            obstructions.append(Obstruction(float(mid[k]), float(excess[k]), float(h[k])))
    return (not obstructions), obstructions


def fresnel_clearance(raster: RasterEnv, link: Link, profile: Profile | None = None) -> float:
    """Worst first-Fresnel-zone clearance ratio over obstacle cells, clamped to [-1, 1].

    Only cells with non-zero height count as obstacles; the flat ground is not
    an obstruction.
    """
    prof = profile if profile is not None else profile_of(raster, link)
    h = raster.height[prof.iy, prof.ix]
    occ = h > 0
    if not occ.any() or prof.total == 0:
        return 1.0
    d = prof.mid[occ]
    D = prof.total
    r1 = np.maximum(fresnel_radius(d, np.maximum(D - d, 0.0), link.wavelength), 1e-12)
    ratio = (_line_height(link, d, D) - h[occ]) / r1
    return float(np.clip(ratio.min(), -1.0, 1.0))


def _deygout(edges, total, h_start, h_end, wavelength, depth, cutoff):
    if depth <= 0 or not edges or total <= 0:
        return 0.0
    best = None
    for i, (d, h) in enumerate(edges):
        d1 = max(d, 1e-3)
        d2 = max(total - d, 1e-3)
        ex = h - (h_start + (h_end - h_start) * d / total)
        nu = ex * math.sqrt(2 * (d1 + d2) / (wavelength * d1 * d2))
        if best is None or nu > best[0]:
            best = (nu, i)
    nu, i = best
    if nu <= cutoff:
        return 0.0
    d_e, h_e = edges[i]
    left = edges[:i]
    right = [(d - d_e, h) for d, h in edges[i + 1:]]
    return (
        knife_edge_j(nu)
        + _deygout(left, d_e, h_start, h_e, wavelength, depth - 1, cutoff)
        + _deygout(right, total - d_e, h_e, h_end, wavelength, depth - 1, cutoff)
    )


def knife_edge_loss(obstructions: Sequence[Obstruction], link: Link, depth: int = 3, nu_cutoff: float = -0.78) -> float:
    """Deygout multi-edge diffraction loss (dB), recursion limited to ``depth`` levels."""
    if not obstructions:
        return 0.0
    edges = sorted((o.distance, o.height) for o in obstructions)
    return float(_deygout(edges, link.ground_distance, link.tx[2], link.rx[2], link.wavelength, depth, nu_cutoff))


def dominant_nu(raster: RasterEnv, link: Link, profile: Profile | None = None, floor: float = -5.0) -> float:
    """Largest diffraction parameter over obstacle cells (``floor`` when there are none)."""
    prof = profile if profile is not None else profile_of(raster, link)
    h = raster.height[prof.iy, prof.ix]
    occ = h > 0
    if not occ.any() or prof.total == 0:
        return floor
    d = prof.mid[occ]
    D = prof.total
    d1 = np.maximum(d, 1e-3)
    d2 = np.maximum(D - d, 1e-3)
    ex = h[occ] - _line_height(link, d, D)
    return float(max(diffraction_nu(ex, d1, d2, link.wavelength).max(), floor))


def vegetation_loss(raster: RasterEnv, link: Link, rate_db_per_m: float | None = None,
                    profile: Profile | None = None) -> float:
    prof = profile if profile is not None else profile_of(raster, link)
    if rate_db_per_m is None:
        density = raster.vegetation_db_per_m[prof.iy, prof.ix]
    else:
        density = raster.vegetation[prof.iy, prof.ix] * rate_db_per_m
    return float(np.sum(prof.length * density))


# --------------------------------------------------------------------------
# shadowing


@functools.lru_cache(maxsize=64)
def _shadow_grid(bounds, tx_key, sigma, corr, seed, step):
    xmin, ymin, xmax, ymax = bounds
    pad = int(math.ceil(3 * corr / step))
    nx = int(math.ceil((xmax - xmin) / step)) + 2 + pad
    ny = int(math.ceil((ymax - ymin) / step)) + 2 + pad
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *tx_key])
    white = np.random.default_rng(ss).standard_normal((ny, nx))
    kx = np.fft.fftfreq(nx, d=step) * 2 * np.pi
    ky = np.fft.fftfreq(ny, d=step) * 2 * np.pi
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    # spectral density of the 2D exponential covariance exp(-r / corr)
    spec = 1.0 / (1.0 + k2 * corr ** 2) ** 1.5
    filt = np.sqrt(spec / spec.mean())
    field_ = np.real(np.fft.ifft2(filt * np.fft.fft2(white)))
    out = sigma * field_[: ny - pad, : nx - pad]
    out.setflags(write=False)
    return out


def shadowing_db(bounds, tx, rx_xy, sigma: float, corr: float, seed: int) -> float:
    """Zero-mean Gaussian shadowing (dB) with exponential spatial correlation, bilinear in RX."""
    if sigma == 0:
        return 0.0
    step = max(corr / 5.0, 1.0)
    tx_key = tuple(int(round(c * 1000)) & 0xFFFFFFFF for c in tx)
    grid = _shadow_grid(tuple(float(b) for b in bounds), tx_key, float(sigma), float(corr), int(seed), step)
    u = (rx_xy[0] - bounds[0]) / step
    v = (rx_xy[1] - bounds[1]) / step
    i0, j0 = int(math.floor(u)), int(math.floor(v))
    fu, fv = u - i0, v - j0
    g = grid
    return float(
        (1 - fu) * (1 - fv) * g[j0, i0] + fu * (1 - fv) * g[j0, i0 + 1]
        + (1 - fu) * fv * g[j0 + 1, i0] + fu * fv * g[j0 + 1, i0 + 1]
    )


@dataclass(frozen=True)
class LargeScale:
    """Intermediate quantities of one large-scale oracle evaluation."""

    fspl: float
    diffraction: float
    vegetation: float
    shadowing: float
    los: bool
    obstructions: tuple

    @property
    def total(self) -> float:
        return self.fspl + self.diffraction + self.vegetation + self.shadowing


def large_scale_terms(raster: RasterEnv, link: Link, config: OracleConfig = OracleConfig(),
                      profile: Profile | None = None) -> LargeScale:
    d = link.distance
    if d == 0:
        raise DegenerateLinkError("zero-length link")
    prof = profile if profile is not None else profile_of(raster, link)
    los, obs = los_test(raster, link, prof)
    return LargeScale(
        fspl=float(fspl_db(d, link.frequency)),
        diffraction=knife_edge_loss(obs, link, config.deygout_depth, config.nu_cutoff),
        vegetation=vegetation_loss(raster, link, config.vegetation_db_per_m, prof),
        shadowing=shadowing_db(raster.bounds, link.tx, link.rx[:2], config.shadowing_sigma_db,
                               config.shadowing_corr_m, config.seed),
        los=los,
        obstructions=tuple(obs),
    )


def path_loss(raster: RasterEnv, link: Link, config: OracleConfig = OracleConfig()) -> ChannelSample:
    """Large-scale oracle sample for one link.

    The returned sample carries a single equivalent path (delay ``d/c``) so
    that the delay spread is 0 and the effective path count is 1.
    """
    terms = large_scale_terms(raster, link, config)
    pl = terms.total
    d = link.distance
    gain = -(pl - float(fspl_db(1.0, link.frequency)))
    path = PathComponent(d / C, gain, 0, ())
    return ChannelSample(
        path_loss=pl,
        los=terms.los,
        paths=(path,),
        pdp=((d / C, gain),),
        rms_delay_spread=0.0,
        effective_path_count=1,
    )


# --------------------------------------------------------------------------
# reflection


def complex_permittivity(material: MaterialSpec, frequency: float) -> complex:
    return complex(material.relative_permittivity, -material.conductivity / (2 * math.pi * frequency * EPS0))


def reflection_magnitude(material: MaterialSpec, cos_incidence, frequency: float):
    """Polarization-averaged Fresnel reflection magnitude ``(|G_perp| + |G_par|) / 2``.

    ``cos_incidence`` is measured from the surface normal.
    """
    cos_t = np.clip(np.abs(np.asarray(cos_incidence, float)), 0.0, 1.0)
    if material.perfect_conductor:
        out = np.ones_like(cos_t)
    else:
        eps = complex_permittivity(material, frequency)
        sin2 = 1.0 - cos_t ** 2
        root = np.sqrt(eps - sin2 + 0j)
        g_perp = (cos_t - root) / (cos_t + root)
        g_par = (eps * cos_t - root) / (eps * cos_t + root)
        out = 0.5 * (np.abs(g_perp) + np.abs(g_par))
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# voxel ray marching


def march(voxels: VoxelEnv, origins, directions, max_len=None, start_cells=None):
    """Advance rays voxel by voxel until they hit an occupied voxel or leave the grid.

    Returns a dict of arrays: ``t`` (travelled length), ``hit`` (bool),
    ``axis`` and ``sign`` of the outward face normal at the hit, ``cell``
    (last free voxel) and ``hit_cell``. Rays reaching ``max_len`` stop with
    ``hit = False`` and ``t = max_len``.
    """
    o = np.atleast_2d(np.asarray(origins, float))
    d = np.atleast_2d(np.asarray(directions, float))
    n = len(d)
    if len(o) == 1 and n > 1:
        o = np.repeat(o, n, axis=0)
    v = voxels.voxel_size
    org = np.asarray(voxels.origin)
    shape = np.asarray(voxels.shape)
    occ = voxels.occupancy
    limit = np.full(n, np.inf) if max_len is None else np.broadcast_to(np.asarray(max_len, float), (n,)).copy()

    if start_cells is None:
        cell = np.floor((o - org) / v).astype(np.int64)
    else:
        cell = np.asarray(start_cells, np.int64).copy()
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
        boundary = org + (cell + (step > 0)) * v
        t_max = np.where(d != 0, (boundary - o) * inv, np.inf)
        t_delta = np.where(d != 0, v * np.abs(inv), np.inf)
    t_max = np.maximum(t_max, 0.0)

    t_out = np.zeros(n)
    hit = np.zeros(n, bool)
    axis_out = np.full(n, -1)
    sign_out = np.zeros(n, int)
    last_cell = cell.copy()
    hit_cell = np.full((n, 3), -1, np.int64)

    inside0 = np.all((cell >= 0) & (cell < shape), axis=1)
    active = inside0.copy()
    t_out[~inside0] = 0.0
    while active.any():
        a = np.flatnonzero(active)
        tm = t_max[a]
        ax = np.argmin(tm, axis=1)
        t_hit = tm[np.arange(len(a)), ax]
        reached = t_hit >= limit[a]
        if reached.any():
            r = a[reached]
            t_out[r] = limit[r]
            last_cell[r] = cell[r]
            active[r] = False
            a, ax, t_hit = a[~reached], ax[~reached], t_hit[~reached]
            if not len(a):
                break
        new = cell[a].copy()
        new[np.arange(len(a)), ax] += step[a, ax]
        inside = np.all((new >= 0) & (new < shape), axis=1)
        # leaving the grid
        gone = a[~inside]
        t_out[gone] = t_hit[~inside]
        last_cell[gone] = cell[gone]
        active[gone] = False
        a_in, new_in, ax_in, t_in = a[inside], new[inside], ax[inside], t_hit[inside]
        occ_hit = occ[new_in[:, 0], new_in[:, 1], new_in[:, 2]]
        h = a_in[occ_hit]
        t_out[h] = t_in[occ_hit]
        hit[h] = True
        axis_out[h] = ax_in[occ_hit]
        sign_out[h] = -step[h, ax_in[occ_hit]]
        last_cell[h] = cell[h]
        hit_cell[h] = new_in[occ_hit]
        active[h] = False
        mv = a_in[~occ_hit]
        mv_ax = ax_in[~occ_hit]
        cell[mv] = new_in[~occ_hit]
        t_max[mv, mv_ax] += t_delta[mv, mv_ax]
    return {"t": t_out, "hit": hit, "axis": axis_out, "sign": sign_out, "cell": last_cell, "hit_cell": hit_cell}


@dataclass(frozen=True)
class RayConfig:
    n_azimuth: int = 180
    n_elevation: int = 45
    elevation_range: tuple = (-70.0, 20.0)  # degrees
    max_reflections: int = 3
    capture_radius: float = 0.0  # m; fixed floor on the reception sphere
    adaptive_capture: bool = True  # add angular_spacing * L / sqrt(3)
    normals: str = "face"  # "face": axis-aligned voxel faces, "smoothed": occupancy-gradient normals
    merge_distance: float = 0.0  # m; merge captured paths whose reflection points all lie this close

    def __post_init__(self):
        if self.normals not in ("face", "smoothed"):
            raise ValidationError("normals must be 'face' or 'smoothed'")
        if self.merge_distance < 0:
            raise ValidationError("merge_distance must be >= 0")
        if not 0 <= self.max_reflections <= 3:
            raise ValidationError("max_reflections must be in [0, 3]")
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise ValidationError("ray counts must be >= 1")
        if self.capture_radius <= 0 and not self.adaptive_capture:
            raise ValidationError("capture radius must be > 0 without adaptive capture")

    @property
    def angular_spacing(self) -> float:
        lo, hi = self.elevation_range
        d_el = math.radians(hi - lo) / max(self.n_elevation - 1, 1) if self.n_elevation > 1 else 0.0
        d_az = 2 * math.pi / self.n_azimuth
        return max(d_az, d_el)

    def directions(self) -> np.ndarray:
        az = (np.arange(self.n_azimuth) + 0.5) * 2 * np.pi / self.n_azimuth
        lo, hi = np.radians(self.elevation_range)
        el = np.linspace(lo, hi, self.n_elevation) if self.n_elevation > 1 else np.array([0.5 * (lo + hi)])
        A, E = np.meshgrid(az, el, indexing="ij")
        A, E = A.ravel(), E.ravel()
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=1)


@dataclass(frozen=True, eq=False)
class RayTree:
    """Segments of every launched ray, grouped by bounce level.

    ``levels[k]`` holds the segments that start after ``k`` reflections:
    ``ray`` (index into the fan), ``start``, ``dir``, ``length``,
    ``cum`` (path length before the segment), ``amp`` (product of
    reflection amplitudes so far), ``keys`` (``(n, k)`` face-plane codes) and
    ``points`` (``(n, k, 3)`` reflection points).
    """

    tx: tuple
    frequency: float
    config: RayConfig
    levels: list = field(default_factory=list)


def _plane_code(axis, sign, plane_index):
    return (axis * 2 + (sign > 0)) * 1_000_003 + plane_index


def launch_rays(voxels: VoxelEnv, tx, frequency: float, config: RayConfig = RayConfig()) -> RayTree:
    """Launch the configured ray fan from ``tx`` and follow up to ``max_reflections`` bounces."""
    if not voxels.is_free(tx):
        raise InvalidEndpointError(f"tx {tx} inside an occupied voxel")
    dirs = config.directions()
    n = len(dirs)
    origins = np.repeat(np.asarray(tx, float)[None, :], n, axis=0)
    ray = np.arange(n)
    cum = np.zeros(n)
    amp = np.ones(n)
    keys = np.zeros((n, 0), np.int64)
    points = np.zeros((n, 0, 3))
    start_cells = None
    v = voxels.voxel_size
    org = np.asarray(voxels.origin)
    mat_ids = voxels.material_id
    mats = voxels.materials
    tree = RayTree(tuple(map(float, tx)), float(frequency), config)
    for level in range(config.max_reflections + 1):
        if not len(ray):
            break
        res = march(voxels, origins, dirs, start_cells=start_cells)
        tree.levels.append({
            "ray": ray, "start": origins, "dir": dirs, "length": res["t"], "cum": cum,
            "amp": amp, "keys": keys, "points": points,
        })
        if level == config.max_reflections:
            break
        h = res["hit"]
        if not h.any():
            break
        ax = res["axis"][h]
        sg = res["sign"][h]
        hc = res["hit_cell"][h]
        d = dirs[h]
        p = origins[h] + res["t"][h][:, None] * d
        # snap the hit coordinate onto the face plane
        face = org[ax] + (hc[np.arange(len(ax)), ax] + (sg > 0)) * v
        p[np.arange(len(ax)), ax] = face
        rows = np.arange(len(ax))
        cos_i = np.abs(d[rows, ax])
        new_dir = d.copy()
        new_dir[rows, ax] *= -1
        if config.normals == "smoothed":
            nrm = voxels.surface_normals(hc)
            face_n = np.zeros_like(nrm)
            face_n[rows, ax] = sg
            dn = np.einsum("ij,ij->i", d, nrm)
            refl = d - 2 * dn[:, None] * nrm
            # fall back to the face normal where the estimate is unusable
            good = (np.einsum("ij,ij->i", nrm, face_n) > 0.3) & (dn < 0) & (refl[rows, ax] * sg > 0)
            new_dir[good] = refl[good]
            cos_i[good] = -dn[good]
        mid = mat_ids[hc[:, 0], hc[:, 1], hc[:, 2]]
        gamma = np.empty(len(ax))
        for m in np.unique(mid):
            sel = mid == m
            spec = mats[int(m)]
            gamma[sel] = reflection_magnitude(spec, cos_i[sel], frequency) * (1.0 - spec.scattering_coefficient)
        plane_index = hc[np.arange(len(ax)), ax] + (sg > 0)
        code = _plane_code(ax, sg, plane_index)
        keep = gamma > 0
        ray = ray[h][keep]
        cum = (cum[h] + res["t"][h])[keep]
        amp = (amp[h] * gamma)[keep]
        keys = np.concatenate([keys[h], code[:, None]], axis=1)[keep]
        points = np.concatenate([points[h], p[:, None, :]], axis=1)[keep]
        origins = p[keep]
        dirs = new_dir[keep]
        start_cells = res["cell"][h][keep]
    return tree


def _direct_clear(voxels: VoxelEnv, tx, rx) -> bool:
    tx = np.asarray(tx, float)
    rx = np.asarray(rx, float)
    L = float(np.linalg.norm(rx - tx))
    res = march(voxels, tx, (rx - tx) / L, max_len=L)
    return not bool(res["hit"][0])


def capture_paths(tree: RayTree, rx, voxels: VoxelEnv | None = None) -> list:
    """Reflected paths of ``tree`` passing through the reception sphere at ``rx``.

    Duplicates (same ordered sequence of reflecting face planes) collapse to
    the ray with the smallest miss distance. The direct path is tested
    separately when ``voxels`` is given.
    """
    rx = np.asarray(rx, float)
    tx = np.asarray(tree.tx, float)
    cfg = tree.config
    out = []
    if voxels is not None and _direct_clear(voxels, tx, rx):
        d = float(np.linalg.norm(rx - tx))
        out.append(PathComponent(d / C, -20 * math.log10(d), 0, ()))
    for k, lv in enumerate(tree.levels):
        if k == 0 or not len(lv["ray"]):
            continue
        w = rx[None, :] - lv["start"]
        t_star = np.einsum("ij,ij->i", w, lv["dir"])
        ok = (t_star >= 0) & (t_star <= lv["length"])
        if not ok.any():
            continue
        idx = np.flatnonzero(ok)
        closest = lv["start"][idx] + t_star[idx, None] * lv["dir"][idx]
        miss = np.linalg.norm(closest - rx[None, :], axis=1)
        L = lv["cum"][idx] + t_star[idx]
        radius = cfg.capture_radius + (cfg.angular_spacing * L / math.sqrt(3) if cfg.adaptive_capture else 0.0)
        cap = miss <= radius
        if not cap.any():
            continue
        best = {}
        for j, m in zip(idx[cap], miss[cap]):
            key = tuple(lv["keys"][j])
            if key not in best or m < best[key][1]:
                best[key] = (j, m)
        chosen = [best[key] for key in sorted(best)]
        if cfg.merge_distance > 0:
            chosen = _merge_close(chosen, lv["points"], cfg.merge_distance)
        for j, _ in chosen:
            pts = lv["points"][j]
            chain = np.vstack([tx[None, :], pts, rx[None, :]])
            length = float(np.sum(np.linalg.norm(np.diff(chain, axis=0), axis=1)))
            a = float(lv["amp"][j])
            out.append(PathComponent(length / C, 20 * math.log10(a) - 20 * math.log10(length), k,
                                     tuple(tuple(map(float, q)) for q in pts)))
    out.sort(key=lambda p: (p.delay, -p.power_gain, p.interaction_count))
    return out


def _merge_close(candidates, points, tol):
    """Greedy merge by smallest miss: drop a path whose every reflection point is within ``tol`` of a kept one."""
    kept = []
    for j, m in sorted(candidates, key=lambda c: (c[1], c[0])):
        p = points[j]
        if any(np.all(np.linalg.norm(points[k] - p, axis=1) <= tol) for k, _ in kept):
            continue
        kept.append((j, m))
    return kept


def ray_launch(voxels: VoxelEnv, link: Link, config: RayConfig = RayConfig(), tree: RayTree | None = None) -> list:
    """Multipath components for one link: direct path (if clear) plus captured reflections."""
    if not voxels.is_free(link.rx):
        raise InvalidEndpointError(f"rx {link.rx} inside an occupied voxel")
    if tree is None:
        tree = launch_rays(voxels, link.tx, link.frequency, config)
    return capture_paths(tree, link.rx, voxels)


def synth_pdp(paths: Sequence[PathComponent], bin_width: float = 1 / 30e6, effective_threshold: float = 25.0):
    """Bin path powers (linear domain) into a PDP and compute RMS delay spread and effective count.

    Returns ``(pdp, rms_delay_spread, effective_path_count)`` where ``pdp`` is a
    tuple of ``(bin_start_s, power_db)`` for non-empty bins.
    """
    if not paths:
        raise NoPathError("no paths to build a PDP from")
    tau = np.array([p.delay for p in paths])
    pw = 10 ** (np.array([p.power_gain for p in paths]) / 10)
    bins = np.floor(tau / bin_width).astype(np.int64)
    acc = {}
    for b, w in zip(bins, pw):
        acc[int(b)] = acc.get(int(b), 0.0) + w
    pdp = tuple((b * bin_width, 10 * math.log10(acc[b])) for b in sorted(acc))
    wts = pw / pw.sum()
    m1 = float(np.sum(wts * tau))
    m2 = float(np.sum(wts * tau ** 2))
    rms = math.sqrt(max(m2 - m1 * m1, 0.0))
    strongest = max(p.power_gain for p in paths)
    count = sum(1 for p in paths if p.power_gain >= strongest - effective_threshold)
    return pdp, rms, count


def multipath_sample(paths: Sequence[PathComponent], frequency: float, bin_width: float = 1 / 30e6,
                     effective_threshold: float = 25.0) -> ChannelSample:
    """Combine ray-launch paths into a sample whose path loss is the total received power."""
    pdp, rms, count = synth_pdp(paths, bin_width, effective_threshold)
    total = 10 * math.log10(sum(10 ** (p.power_gain / 10) for p in paths))
    return ChannelSample(
        path_loss=float(fspl_db(1.0, frequency)) - total,
        los=any(p.interaction_count == 0 for p in paths),
        paths=tuple(paths),
        pdp=pdp,
        rms_delay_spread=rms,
        effective_path_count=count,
    )


# --------------------------------------------------------------------------
# radio maps


@dataclass(frozen=True)
class MapConfig:
    resolution: float = 5.0
    rx_height: float = 1.5
    oracle: OracleConfig = OracleConfig()


@dataclass(frozen=True, eq=False)
class RadioMapGrid:
    origin: tuple
    resolution: float
    path_loss: np.ndarray  # (ny, nx) dB
    los: np.ndarray  # (ny, nx) bool
    inside_building: np.ndarray  # (ny, nx) bool; excluded from metrics
    tx: tuple
    frequency: float
    rx_height: float

    @property
    def shape(self):
        return self.path_loss.shape

    def cell_centers(self):
        ny, nx = self.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.resolution
        return xs, ys

    def header(self) -> dict:
        return {
            "origin": list(self.origin),
            "resolution": self.resolution,
            "tx": list(self.tx),
            "frequency": self.frequency,
            "rx_height": self.rx_height,
        }

    def channels(self) -> dict:
        return {
            "path_loss_db": self.path_loss,
            "los": self.los.astype(float),
            "inside_building": self.inside_building.astype(float),
        }

    def to_dict(self) -> dict:
        return {**self.header(), "shape": list(self.shape),
                **{k: v.tolist() for k, v in self.channels().items()}}


def map_links(raster: RasterEnv, tx, frequency: float, config: MapConfig):
    xmin, ymin, xmax, ymax = raster.bounds
    nx = max(1, int(math.ceil((xmax - xmin) / config.resolution - 1e-9)))
    ny = max(1, int(math.ceil((ymax - ymin) / config.resolution - 1e-9)))
    xs = xmin + (np.arange(nx) + 0.5) * config.resolution
    ys = ymin + (np.arange(ny) + 0.5) * config.resolution
    xs = np.minimum(xs, xmax)
    ys = np.minimum(ys, ymax)
    return xs, ys


def map_rx(tx, x, y, rx_height):
    """RX for a map cell; nudged 1 mm when it would coincide with the TX."""
    rx = (float(x), float(y), float(rx_height))
    if math.isclose(x, tx[0]) and math.isclose(y, tx[1]) and math.isclose(rx_height, tx[2]):
        rx = (rx[0] + 1e-3, rx[1], rx[2])
    return rx


def _map_row(raster, tx, frequency, config, xs, y):
    pl, los, inside = [], [], []
    for x in xs:
        inside.append(raster.building[raster.cell_of(x, y)] >= 0.5)
        s = path_loss(raster, Link(tuple(map(float, tx)), map_rx(tx, x, y, config.rx_height), frequency),
                      config.oracle)
        pl.append(s.path_loss)
        los.append(s.los)
    return pl, los, inside


def map_rows(fn, ys, args, workers: int = 1) -> list:
    """Evaluate ``fn(*args, y)`` per map row, optionally in worker processes (row order preserved)."""
    if workers <= 1:
        return [fn(*args, y) for y in ys]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, *([a] * len(ys) for a in args), ys))


def radio_map(raster: RasterEnv, tx, frequency: float, config: MapConfig = MapConfig(), workers: int = 1
              ) -> RadioMapGrid:
    """Oracle path loss at every map cell center (fixed RX height)."""
    if not raster.contains(tx[0], tx[1]):
        raise OutOfBoundsError("tx outside raster bounds")
    xs, ys = map_links(raster, tx, frequency, config)
    rows = map_rows(_map_row, ys, (raster, tx, frequency, config, xs), workers)
    pl = np.array([r[0] for r in rows], float).reshape(len(ys), len(xs))
    los = np.array([r[1] for r in rows], bool).reshape(len(ys), len(xs))
    inside = np.array([r[2] for r in rows], bool).reshape(len(ys), len(xs))
    return RadioMapGrid((raster.bounds[0], raster.bounds[1]), config.resolution, pl, los, inside,
                        tuple(map(float, tx)), float(frequency), config.rx_height)

