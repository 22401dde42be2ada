"""Environment models: vector scenarios, 2D rasters and 3D voxel grids.

Coordinates are meters. Rasters are indexed ``[iy, ix]`` with cell ``(0, 0)``
touching the lower-left corner of the scenario bounds; voxel grids are
indexed ``[ix, iy, iz]`` with the ground at ``z = 0``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable, Sequence

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon
from shapely.geometry.polygon import orient

from . import io as gridio
from .errors import GridTooLargeError, PlacementError, ValidationError

FORMAT_VERSION = 1
DEFAULT_MAX_CELLS = 4_000_000
DEFAULT_MAX_VOXELS = 30_000_000
SEMANTIC_CLASSES = ("building", "road", "vegetation", "open")


@dataclass(frozen=True)
class MaterialSpec:
    id: str
    relative_permittivity: float
    conductivity: float
    scattering_coefficient: float = 0.0
    perfect_conductor: bool = False

    def __post_init__(self):
        if self.relative_permittivity < 1:
            raise ValidationError(f"material {self.id}: relative permittivity must be >= 1")
        if self.conductivity < 0:
            raise ValidationError(f"material {self.id}: conductivity must be >= 0")
        if not 0.0 <= self.scattering_coefficient <= 1.0:
            raise ValidationError(f"material {self.id}: scattering coefficient outside [0, 1]")


# Implementation defaults, configurable through the scenario file.
DEFAULT_MATERIALS = {
    "concrete": MaterialSpec("concrete", 5.31, 0.48, 0.2),
    "brick": MaterialSpec("brick", 3.91, 0.02, 0.3),
    "metal": MaterialSpec("metal", 1.0, 1e7, 0.05, perfect_conductor=True),
    "glass": MaterialSpec("glass", 6.27, 0.004, 0.05),
    "wood": MaterialSpec("wood", 1.99, 0.01, 0.4),
}


@dataclass(frozen=True)
class Building:
    footprint: tuple  # ((x, y), ...) counterclockwise, not closed
    height: float
    material: str

    def polygon(self) -> Polygon:
        return Polygon(self.footprint)

    @property
    def volume(self) -> float:
        return self.polygon().area * self.height


@dataclass(frozen=True)
class Road:
    centerline: tuple  # ((x, y), ...)
    width: float

    def polygon(self) -> Polygon:
        return LineString(self.centerline).buffer(self.width / 2, cap_style="flat")


@dataclass(frozen=True)
class VegetationPatch:
    polygon_coords: tuple
    attenuation_db_per_m: float

    def polygon(self) -> Polygon:
        return Polygon(self.polygon_coords)


@dataclass(frozen=True)
class TxSite:
    position: tuple  # (x, y, z)
    frequency: float


@dataclass(frozen=True)
class Scenario:
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    buildings: tuple = ()
    roads: tuple = ()
    vegetation: tuple = ()
    materials: dict = field(default_factory=lambda: dict(DEFAULT_MATERIALS))
    tx_sites: tuple = ()
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        validate_scenario(self)

    @property
    def width(self) -> float:
        return self.bounds[2] - self.bounds[0]

    @property
    def depth(self) -> float:
        return self.bounds[3] - self.bounds[1]

    def building_volume(self) -> float:
        return sum(b.volume for b in self.buildings)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "seed": int(self.seed),
            "bounds": [float(v) for v in self.bounds],
            "materials": [
                {
                    "id": m.id,
                    "relative_permittivity": m.relative_permittivity,
                    "conductivity": m.conductivity,
                    "scattering_coefficient": m.scattering_coefficient,
                    "perfect_conductor": m.perfect_conductor,
                }
                for m in sorted(self.materials.values(), key=lambda m: m.id)
            ],
            "buildings": [
                {"footprint": [list(p) for p in b.footprint], "height": b.height, "material": b.material}
                for b in self.buildings
            ],
            "roads": [{"centerline": [list(p) for p in r.centerline], "width": r.width} for r in self.roads],
            "vegetation": [
                {"polygon": [list(p) for p in v.polygon_coords], "attenuation_db_per_m": v.attenuation_db_per_m}
                for v in self.vegetation
            ],
            "tx_sites": [{"position": list(t.position), "frequency": t.frequency} for t in self.tx_sites],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        validate_scenario_document(data)
        materials = {
            m["id"]: MaterialSpec(
                m["id"],
                float(m["relative_permittivity"]),
                float(m["conductivity"]),
                float(m.get("scattering_coefficient", 0.0)),
                bool(m.get("perfect_conductor", False)),
            )
            for m in data.get("materials", [])
        } or dict(DEFAULT_MATERIALS)
        return cls(
            bounds=tuple(float(v) for v in data["bounds"]),
            buildings=tuple(
                Building(tuple(tuple(map(float, p)) for p in b["footprint"]), float(b["height"]), b["material"])
                for b in data.get("buildings", [])
            ),
            roads=tuple(
                Road(tuple(tuple(map(float, p)) for p in r["centerline"]), float(r["width"]))
                for r in data.get("roads", [])
            ),
            vegetation=tuple(
                VegetationPatch(tuple(tuple(map(float, p)) for p in v["polygon"]), float(v["attenuation_db_per_m"]))
                for v in data.get("vegetation", [])
            ),
            materials=materials,
            tx_sites=tuple(
                TxSite(tuple(map(float, t["position"])), float(t["frequency"])) for t in data.get("tx_sites", [])
            ),
            seed=int(data.get("seed", 0)),
            name=data.get("name", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path) as fh:
            return cls.from_json(fh.read())


def scenario_json_schema() -> dict:
    text = resources.files("chanform").joinpath("schemas/scenario.schema.json").read_text()
    return json.loads(text)


def validate_scenario_document(data: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(data, scenario_json_schema())
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"scenario document invalid: {exc.message}") from exc
    if data["format_version"] != FORMAT_VERSION:
        raise ValidationError(f"unsupported scenario format_version {data['format_version']}")


def validate_scenario(sc: Scenario) -> None:
    xmin, ymin, xmax, ymax = sc.bounds
    if not (xmax > xmin and ymax > ymin):
        raise ValidationError("scenario bounds must have positive extent")
    box = shapely.box(xmin, ymin, xmax, ymax)
    for b in sc.buildings:
        poly = b.polygon()
        if not poly.is_valid or not poly.exterior.is_simple:
            raise ValidationError("building footprint must be a simple polygon")
        if b.height <= 0:
            raise ValidationError("building height must be > 0")
        if b.material not in sc.materials:
            raise ValidationError(f"unknown material {b.material!r}")
        if not box.buffer(1e-9).covers(poly):
            raise ValidationError("building outside scenario bounds")
    for r in sc.roads:
        if r.width <= 0:
            raise ValidationError("road width must be > 0")
        if not box.buffer(1e-9).covers(LineString(r.centerline)):
            raise ValidationError("road outside scenario bounds")
    for v in sc.vegetation:
        if v.attenuation_db_per_m < 0:
            raise ValidationError("vegetation attenuation must be >= 0")
        if not box.buffer(1e-9).covers(v.polygon()):
            raise ValidationError("vegetation outside scenario bounds")
    for t in sc.tx_sites:
        if t.frequency <= 0:
            raise ValidationError("TX frequency must be > 0")
        x, y, z = t.position
        if not (xmin <= x <= xmax and ymin <= y <= ymax) or z < 0:
            raise ValidationError("TX site outside scenario bounds")


# --------------------------------------------------------------------------
# procedural generator


@dataclass(frozen=True)
class ScenarioConfig:
    size: tuple = (500.0, 500.0)
    n_buildings: int = 10
    building_size: tuple = (12.0, 40.0)
    building_height: tuple = (8.0, 40.0)
    rotation_deg: tuple = (0.0, 0.0)
    min_gap: float = 4.0
    n_roads: int = 4
    road_width: tuple = (8.0, 14.0)
    n_vegetation: int = 3
    vegetation_size: tuple = (10.0, 30.0)
    vegetation_attenuation: tuple = (0.05, 0.2)
    material_choices: tuple = ("concrete", "brick", "metal", "glass", "wood")
    n_tx: int = 1
    tx_height: tuple = (10.0, 15.0)
    frequency: float = 5.9e9
    max_attempts: int = 500

    def __post_init__(self):
        for name in ("building_size", "building_height", "road_width", "vegetation_size", "tx_height"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"config range {name} must satisfy 0 < lo <= hi")
        if self.n_buildings < 0 or self.n_roads < 0 or self.n_vegetation < 0:
            raise ValidationError("counts must be >= 0")
        if self.n_tx < 1:
            raise ValidationError("at least one TX site is required")
        if min(self.size) <= 0 or self.frequency <= 0:
            raise ValidationError("size and frequency must be positive")


def _rect(cx, cy, w, h, angle):
    c, s = math.cos(angle), math.sin(angle)
    pts = []
    for dx, dy in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        pts.append((cx + c * dx - s * dy, cy + s * dx + c * dy))
    return orient(Polygon(pts), sign=1.0)


def _coords(poly: Polygon) -> tuple:
    return tuple((float(x), float(y)) for x, y in list(poly.exterior.coords)[:-1])


def generate_scenario(seed: int, config: ScenarioConfig | None = None) -> Scenario:
    """Procedurally place roads, buildings, vegetation and TX sites.

    Deterministic in ``(seed, config)``. Raises :class:`PlacementError` when the
    requested building count cannot be placed within ``config.max_attempts``
    draws per building.
    """
    cfg = config or ScenarioConfig()
    rng = np.random.default_rng(seed)
    W, H = cfg.size
    bounds = (0.0, 0.0, float(W), float(H))

    roads = []
    for k in range(cfg.n_roads):
        width = float(rng.uniform(*cfg.road_width))
        if k % 2 == 0:
            y = float(rng.uniform(0.15, 0.85) * H)
            roads.append(Road(((0.0, y), (float(W), y)), width))
        else:
            x = float(rng.uniform(0.15, 0.85) * W)
            roads.append(Road(((x, 0.0), (x, float(H))), width))
    road_polys = [r.polygon() for r in roads]
    road_union = shapely.union_all(road_polys) if road_polys else Polygon()

    rot_lo, rot_hi = (math.radians(a) for a in cfg.rotation_deg)
    buildings = []
    placed = []
    for _ in range(cfg.n_buildings):
        for _attempt in range(cfg.max_attempts):
            w, h = rng.uniform(*cfg.building_size, size=2)
            ang = float(rng.uniform(rot_lo, rot_hi)) if rot_hi > rot_lo else rot_lo
            r = 0.5 * math.hypot(w, h) + 1.0
            cx = float(rng.uniform(r, W - r)) if W > 2 * r else W / 2
            cy = float(rng.uniform(r, H - r)) if H > 2 * r else H / 2
            poly = _rect(cx, cy, w, h, ang)
            grown = poly.buffer(cfg.min_gap / 2, join_style="mitre")
            if grown.intersects(road_union):
                continue
            if any(grown.intersects(p) for p in placed):
                continue
            height = float(rng.uniform(*cfg.building_height))
            material = str(cfg.material_choices[int(rng.integers(len(cfg.material_choices)))])
            buildings.append(Building(_coords(poly), height, material))
            placed.append(poly.buffer(cfg.min_gap / 2, join_style="mitre"))
            break
        else:
            raise PlacementError(
                f"could not place building {len(buildings) + 1} of {cfg.n_buildings} "
                f"after {cfg.max_attempts} attempts"
            )

    occupied = shapely.union_all(placed + road_polys) if (placed or road_polys) else Polygon()
    vegetation = []
    for _ in range(cfg.n_vegetation):
        for _attempt in range(cfg.max_attempts):
            w, h = rng.uniform(*cfg.vegetation_size, size=2)
            cx = float(rng.uniform(w / 2, W - w / 2))
            cy = float(rng.uniform(h / 2, H - h / 2))
            poly = _rect(cx, cy, w, h, 0.0)
            if poly.intersects(occupied):
                continue
            vegetation.append(VegetationPatch(_coords(poly), float(rng.uniform(*cfg.vegetation_attenuation))))
            occupied = occupied.union(poly)
            break
        # vegetation is optional decoration: silently skip when the map is full

    building_union = shapely.union_all([b.polygon() for b in buildings]) if buildings else Polygon()
    tx_sites = []
    for _ in range(cfg.n_tx):
        for _attempt in range(cfg.max_attempts):
            if roads:
                road = roads[int(rng.integers(len(roads)))]
                (x0, y0), (x1, y1) = road.centerline[0], road.centerline[-1]
                t = float(rng.uniform(0.1, 0.9))
                x, y = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
            else:
                x, y = float(rng.uniform(0.1 * W, 0.9 * W)), float(rng.uniform(0.1 * H, 0.9 * H))
            if building_union.buffer(1.0).contains(shapely.Point(x, y)):
                continue
            tx_sites.append(TxSite((x, y, float(rng.uniform(*cfg.tx_height))), float(cfg.frequency)))
            break
        else:
            raise PlacementError("could not place TX site in free space")

    return Scenario(
        bounds=bounds,
        buildings=tuple(buildings),
        roads=tuple(roads),
        vegetation=tuple(vegetation),
        materials=dict(DEFAULT_MATERIALS),
        tx_sites=tuple(tx_sites),
        seed=int(seed),
        name=f"synthetic-{seed}",
    )


# --------------------------------------------------------------------------
# 2D rasters


@dataclass(frozen=True, eq=False)
class RasterEnv:
    """Gridded 2D environment at granularity ``resolution`` (m/cell).

    ``building``, ``road`` and ``vegetation`` hold fractional cell coverage;
    ``vegetation_db_per_m`` is the coverage-weighted specific attenuation,
    so the vegetation loss of a ground segment is its integral along the path.
    """

    origin: tuple
    resolution: float
    building: np.ndarray
    road: np.ndarray
    vegetation: np.ndarray
    height: np.ndarray
    texture: np.ndarray
    vegetation_db_per_m: np.ndarray
    bounds: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        shapes = {a.shape for a in (self.building, self.road, self.vegetation, self.height,
                                    self.texture, self.vegetation_db_per_m)}
        if len(shapes) != 1:
            raise ValidationError("raster channels must share grid dimensions")
        if self.resolution <= 0:
            raise ValidationError("resolution must be > 0")
        total = self.building + self.road + self.vegetation
        if np.any(total > 1 + 1e-9):
            raise ValidationError("semantic fractions exceed 1 in some cell")
        if np.any(self.height < 0):
            raise ValidationError("negative height in raster")
        for a in (self.building, self.road, self.vegetation, self.height, self.texture, self.vegetation_db_per_m):
            a.setflags(write=False)

    @property
    def shape(self) -> tuple:
        return self.building.shape

    @property
    def open(self) -> np.ndarray:
        return np.clip(1.0 - self.building - self.road - self.vegetation, 0.0, 1.0)

    @property
    def semantic(self) -> np.ndarray:
        """Stacked ``(4, ny, nx)`` channels in :data:`SEMANTIC_CLASSES` order."""
        return np.stack([self.building, self.road, self.vegetation, self.open])

    def cell_centers(self):
        ny, nx = self.shape
        g = self.resolution
        xs = self.origin[0] + (np.arange(nx) + 0.5) * g
        ys = self.origin[1] + (np.arange(ny) + 0.5) * g
        return xs, ys

    def contains(self, x, y) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax

    def cell_of(self, x, y):
        ny, nx = self.shape
        ix = min(max(int(math.floor((x - self.origin[0]) / self.resolution)), 0), nx - 1)
        iy = min(max(int(math.floor((y - self.origin[1]) / self.resolution)), 0), ny - 1)
        return iy, ix

    def channels(self) -> dict:
        return {
            "building": self.building,
            "road": self.road,
            "vegetation": self.vegetation,
            "open": self.open,
            "height": self.height,
            "texture": self.texture,
            "vegetation_db_per_m": self.vegetation_db_per_m,
        }

    def with_channels(self, **arrays) -> "RasterEnv":
        return replace(self, _cache={}, **arrays)


def _grid_dims(extent: float, step: float) -> int:
    return max(1, int(math.ceil(extent / step - 1e-9)))


def rasterize(scenario: Scenario, resolution: float, max_cells: int = DEFAULT_MAX_CELLS) -> RasterEnv:
    """Sample the scenario at cell centers; a cell is a building iff its center lies inside a footprint."""
    xmin, ymin, xmax, ymax = scenario.bounds
    if resolution <= 0 or resolution > min(xmax - xmin, ymax - ymin):
        raise ValidationError("resolution must be in (0, min bounds extent]")
    nx, ny = _grid_dims(xmax - xmin, resolution), _grid_dims(ymax - ymin, resolution)
    if nx * ny > max_cells:
        raise GridTooLargeError(f"{nx}x{ny} cells exceeds cap {max_cells}")
    xs = xmin + (np.arange(nx) + 0.5) * resolution
    ys = ymin + (np.arange(ny) + 0.5) * resolution

    building = np.zeros((ny, nx))
    height = np.zeros((ny, nx))
    road = np.zeros((ny, nx))
    veg = np.zeros((ny, nx))
    veg_rate = np.zeros((ny, nx))

    def stamp(poly):
        bx0, by0, bx1, by1 = poly.bounds
        i0, i1 = np.searchsorted(xs, bx0), np.searchsorted(xs, bx1, side="right")
        j0, j1 = np.searchsorted(ys, by0), np.searchsorted(ys, by1, side="right")
        if i1 <= i0 or j1 <= j0:
            return None
        X, Y = np.meshgrid(xs[i0:i1], ys[j0:j1])
        return (slice(j0, j1), slice(i0, i1)), shapely.contains_xy(poly, X, Y)

    for b in scenario.buildings:
        hit = stamp(b.polygon())
        if hit is None:
            continue
        sl, mask = hit
        building[sl][mask] = 1.0
        height[sl] = np.where(mask, np.maximum(height[sl], b.height), height[sl])
    for r in scenario.roads:
        hit = stamp(r.polygon())
        if hit is None:
            continue
        sl, mask = hit
        road[sl][mask & (building[sl] == 0)] = 1.0
    for v in scenario.vegetation:
        hit = stamp(v.polygon())
        if hit is None:
            continue
        sl, mask = hit
        m = mask & (building[sl] == 0) & (road[sl] == 0)
        veg[sl][m] = 1.0
        veg_rate[sl] = np.where(m, np.maximum(veg_rate[sl], v.attenuation_db_per_m), veg_rate[sl])

    return RasterEnv(
        origin=(xmin, ymin),
        resolution=float(resolution),
        building=building,
        road=road,
        vegetation=veg,
        height=height,
        texture=np.zeros((ny, nx)),
        vegetation_db_per_m=veg * veg_rate,
        bounds=tuple(scenario.bounds),
    )


def power_law_amplitude(a_ref: float = 1.0, g_ref: float = 2.0, exponent: float = 1.0) -> Callable[[float], float]:
    """Texture std that grows as the grid gets finer: ``a_ref * (g_ref / g) ** exponent``."""

    def amplitude(g: float) -> float:
        return a_ref * (g_ref / g) ** exponent

    return amplitude


def add_texture_noise(raster: RasterEnv, seed: int, amplitude_at_resolution: Callable[[float], float]) -> RasterEnv:
    """Overwrite the texture channel with seeded white noise of std ``amplitude_at_resolution(g)``."""
    amp = float(amplitude_at_resolution(raster.resolution))
    if amp < 0 or not math.isfinite(amp):
        raise ValidationError("texture amplitude must be finite and >= 0")
    if amp == 0.0:
        tex = np.zeros(raster.shape)
    else:
        tex = amp * np.random.default_rng(seed).standard_normal(raster.shape)
    return raster.with_channels(texture=tex)


def observed_surface(raster: RasterEnv) -> RasterEnv:
    """Height map as an imaging sensor would see it.

    Texture is confined to roofs and canopy (cells with building or vegetation
    cover), mimicking tiles and foliage picked up by a surface model.
    """
    cover = np.clip(raster.building + raster.vegetation, 0.0, 1.0)
    return raster.with_channels(height=np.maximum(raster.height + raster.texture * cover, 0.0))


def _overlap_matrix(n_new, g_new, n_old, g_old):
    """``(n_new, n_old)`` matrix of 1D overlap lengths between new and old cells."""
    new_edges = np.arange(n_new + 1) * g_new
    old_edges = np.arange(n_old + 1) * g_old
    lo = np.maximum(new_edges[:-1, None], old_edges[None, :-1])
    hi = np.minimum(new_edges[1:, None], old_edges[None, 1:])
    return np.clip(hi - lo, 0.0, None)


def _support(overlap, g):
    """Contiguous ``[start, stop)`` ranges of source cells touched by each new cell."""
    touched = overlap > 1e-12 * g
    starts = touched.argmax(axis=1)
    stops = overlap.shape[1] - touched[:, ::-1].argmax(axis=1)
    return list(zip(starts, stops))


def resample(raster: RasterEnv, new_resolution: float, max_cells: int = DEFAULT_MAX_CELLS) -> RasterEnv:
    """Regrid to ``new_resolution``.

    Fractions, texture and vegetation loss density are area-averaged. Heights
    are max-pooled when coarsening and copied from the containing cell when
    refining.
    """
    if new_resolution <= 0:
        raise ValidationError("new_resolution must be > 0")
    g = raster.resolution
    if abs(new_resolution - g) <= 1e-12 * g:
        return raster
    xmin, ymin, xmax, ymax = raster.bounds
    ny_old, nx_old = raster.shape
    nx, ny = _grid_dims(xmax - xmin, new_resolution), _grid_dims(ymax - ymin, new_resolution)
    if nx * ny > max_cells:
        raise GridTooLargeError(f"{nx}x{ny} cells exceeds cap {max_cells}")
    Ax = _overlap_matrix(nx, new_resolution, nx_old, g)
    Ay = _overlap_matrix(ny, new_resolution, ny_old, g)
    norm = Ay.sum(1)[:, None] * Ax.sum(1)[None, :]
    norm[norm == 0] = 1.0

    def average(a):
        return (Ay @ a @ Ax.T) / norm

    if new_resolution > g:
        tmp = np.zeros((ny_old, nx))
        for i, (s, e) in enumerate(_support(Ax, g)):
            tmp[:, i] = raster.height[:, s:e].max(axis=1)
        height = np.zeros((ny, nx))
        for j, (s, e) in enumerate(_support(Ay, g)):
            height[j] = tmp[s:e].max(axis=0)
    else:
        xs = (np.arange(nx) + 0.5) * new_resolution
        ys = (np.arange(ny) + 0.5) * new_resolution
        ix = np.minimum((xs / g).astype(int), nx_old - 1)
        iy = np.minimum((ys / g).astype(int), ny_old - 1)
        height = raster.height[np.ix_(iy, ix)]

    b, r, v = average(raster.building), average(raster.road), average(raster.vegetation)
    total = b + r + v
    over = total > 1.0
    if np.any(over):
        b, r, v = (np.where(over, a / total, a) for a in (b, r, v))
    return RasterEnv(
        origin=raster.origin,
        resolution=float(new_resolution),
        building=b,
        road=r,
        vegetation=v,
        height=height,
        texture=average(raster.texture),
        vegetation_db_per_m=average(raster.vegetation_db_per_m),
        bounds=raster.bounds,
    )


# --------------------------------------------------------------------------
# 3D voxels

_AXIS_NORMALS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)


@dataclass(frozen=True, eq=False)
class VoxelEnv:
    origin: tuple  # (x0, y0, 0)
    voxel_size: float
    occupancy: np.ndarray  # bool (nx, ny, nz)
    material_id: np.ndarray  # int16, -1 where free
    materials: tuple  # MaterialSpec indexed by material_id
    bounds: tuple
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ValidationError("voxel_size must be > 0")
        if self.occupancy.shape != self.material_id.shape:
            raise ValidationError("occupancy and material grids differ in shape")
        used = self.material_id[self.occupancy]
        if used.size and (used.min() < 0 or used.max() >= len(self.materials)):
            raise ValidationError("invalid material id in occupied voxel")
        self.occupancy.setflags(write=False)
        self.material_id.setflags(write=False)

    @property
    def shape(self) -> tuple:
        return self.occupancy.shape

    @property
    def occupied_volume(self) -> float:
        return float(self.occupancy.sum()) * self.voxel_size ** 3

    def index_of(self, point) -> tuple:
        p = (np.asarray(point, float) - np.asarray(self.origin)) / self.voxel_size
        return tuple(int(math.floor(c)) for c in p)

    def is_free(self, point) -> bool:
        idx = self.index_of(point)
        if any(i < 0 or i >= n for i, n in zip(idx, self.shape)):
            return True
        return not bool(self.occupancy[idx])

    def exposed_faces(self):
        """Occupied-voxel faces bordering free space.

        Returns ``(indices, normals)`` with ``indices`` of shape ``(M, 3)`` and
        outward unit ``normals`` of shape ``(M, 3)``. Faces against the ground
        plane are not exposed.
        """
        if "faces" in self._cache:
            return self._cache["faces"]
        occ = self.occupancy
        padded = np.pad(occ, 1, constant_values=False)
        idx_all, nrm_all = [], []
        for k, n in enumerate(_AXIS_NORMALS.astype(int)):
            nb = padded[
                1 + n[0]: 1 + n[0] + occ.shape[0],
                1 + n[1]: 1 + n[1] + occ.shape[1],
                1 + n[2]: 1 + n[2] + occ.shape[2],
            ]
            exposed = occ & ~nb
            if n[2] == -1:
                exposed[:, :, 0] = False
            idx = np.argwhere(exposed)
            idx_all.append(idx)
            nrm_all.append(np.repeat(_AXIS_NORMALS[k][None, :], len(idx), axis=0))
        out = (np.concatenate(idx_all), np.concatenate(nrm_all))
        self._cache["faces"] = out
        return out

    def surface_normals(self, cells, radius: int = 2) -> np.ndarray:
        """Outward unit normals at occupied ``cells`` from a Gaussian-weighted occupancy gradient.

        Unlike the axis-aligned face normals this follows the orientation of
        slanted walls, and it sharpens as voxels shrink. Grid edges are
        extended by replication so the ground does not tilt wall normals.
        Rows with no usable gradient come back as zeros.
        """
        cells = np.atleast_2d(np.asarray(cells, np.int64))
        r = np.arange(-radius, radius + 1)
        off = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        w = np.exp(-0.5 * (off ** 2).sum(axis=1))
        hi = np.asarray(self.shape) - 1
        acc = np.zeros((len(cells), 3))
        for o, wk in zip(off, w):
            if not o.any():
                continue
            nb = np.clip(cells + o, 0, hi)
            occ = self.occupancy[nb[:, 0], nb[:, 1], nb[:, 2]]
            acc -= wk * occ[:, None] * o[None, :]
        norm = np.linalg.norm(acc, axis=1)
        return np.where(norm[:, None] > 1e-9, acc / np.where(norm > 1e-9, norm, 1.0)[:, None], 0.0)


def voxelize(
    scenario: Scenario,
    voxel_size: float,
    max_voxels: int = DEFAULT_MAX_VOXELS,
    headroom: float = 2.0,
) -> VoxelEnv:
    """Voxel ``(i, j, k)`` is occupied iff its center is inside an extruded footprint."""
    if voxel_size <= 0:
        raise ValidationError("voxel_size must be > 0")
    xmin, ymin, xmax, ymax = scenario.bounds
    top = max((b.height for b in scenario.buildings), default=0.0) + headroom
    nx, ny = _grid_dims(xmax - xmin, voxel_size), _grid_dims(ymax - ymin, voxel_size)
    nz = _grid_dims(top, voxel_size)
    if nx * ny * nz > max_voxels:
        raise GridTooLargeError(f"{nx}x{ny}x{nz} voxels exceeds cap {max_voxels}")
    xs = xmin + (np.arange(nx) + 0.5) * voxel_size
    ys = ymin + (np.arange(ny) + 0.5) * voxel_size
    zs = (np.arange(nz) + 0.5) * voxel_size

    mat_ids = sorted(scenario.materials)
    mat_index = {m: i for i, m in enumerate(mat_ids)}
    occ = np.zeros((nx, ny, nz), bool)
    mid = np.full((nx, ny, nz), -1, np.int16)
    for b in scenario.buildings:
        poly = b.polygon()
        bx0, by0, bx1, by1 = poly.bounds
        i0, i1 = np.searchsorted(xs, bx0), np.searchsorted(xs, bx1, side="right")
        j0, j1 = np.searchsorted(ys, by0), np.searchsorted(ys, by1, side="right")
        if i1 <= i0 or j1 <= j0:
            continue
        X, Y = np.meshgrid(xs[i0:i1], ys[j0:j1], indexing="ij")
        foot = shapely.contains_xy(poly, X, Y)
        kz = int(np.searchsorted(zs, b.height))  # zs[k] < height for k < kz
        cols = foot[:, :, None] & (np.arange(nz) < kz)[None, None, :]
        occ[i0:i1, j0:j1] |= cols
        mid[i0:i1, j0:j1][cols] = mat_index[b.material]
    return VoxelEnv(
        origin=(xmin, ymin, 0.0),
        voxel_size=float(voxel_size),
        occupancy=occ,
        material_id=mid,
        materials=tuple(scenario.materials[m] for m in mat_ids),
        bounds=(xmin, ymin, 0.0, xmax, ymax, nz * voxel_size),
    )


def empty_scenario(size: Sequence[float] = (200.0, 200.0), tx_sites=()) -> Scenario:
    return Scenario(bounds=(0.0, 0.0, float(size[0]), float(size[1])), tx_sites=tuple(tx_sites))


# --------------------------------------------------------------------------
# grid export

RASTER_CHANNELS = ("building", "road", "vegetation", "height", "texture", "vegetation_db_per_m")


def save_raster(raster: RasterEnv, stem, fmt: str = "bin") -> None:
    """Flat binary + JSON header (``fmt="bin"``) or one CSV row per cell (``fmt="csv"``)."""
    chans = {k: raster.channels()[k] for k in RASTER_CHANNELS}
    if fmt == "csv":
        gridio.write_grid_csv(f"{stem}.csv", {**chans, "open": raster.open})
        return
    if fmt != "bin":
        raise ValidationError(f"unknown raster format {fmt!r}")
    gridio.write_grid(stem, chans, kind="raster", origin=list(raster.origin), resolution=raster.resolution,
                      bounds=list(raster.bounds), layout="row-major [iy, ix]")


def load_raster(stem) -> RasterEnv:
    header, a = gridio.read_grid(stem)
    if header.get("kind") != "raster":
        raise ValidationError("not a raster export")
    return RasterEnv(tuple(header["origin"]), float(header["resolution"]), *(a[k].copy() for k in RASTER_CHANNELS),
                     tuple(header["bounds"]))


def save_voxels(voxels: VoxelEnv, stem, fmt: str = "bin") -> None:
    chans = {"occupancy": voxels.occupancy.astype(float), "material_id": voxels.material_id.astype(float)}
    if fmt == "csv":
        gridio.write_grid_csv(f"{stem}.csv", chans)
        return
    if fmt != "bin":
        raise ValidationError(f"unknown voxel format {fmt!r}")
    gridio.write_grid(stem, chans, kind="voxels", origin=list(voxels.origin), voxel_size=voxels.voxel_size,
                      bounds=list(voxels.bounds), layout="[ix, iy, iz]",
                      materials=[vars(m).copy() for m in voxels.materials])


def load_voxels(stem) -> VoxelEnv:
    header, a = gridio.read_grid(stem)
    if header.get("kind") != "voxels":
        raise ValidationError("not a voxel export")
    mats = tuple(MaterialSpec(**m) for m in header["materials"])
    return VoxelEnv(tuple(header["origin"]), float(header["voxel_size"]), a["occupancy"] > 0.5,
                    a["material_id"].astype(np.int16), mats, tuple(header["bounds"]))
