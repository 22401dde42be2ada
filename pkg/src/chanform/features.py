"""Per-link feature extraction and dataset construction.

Features are grouped so that modality ablations reduce to column-group
selection. Every dataset keeps raw feature values; ``normalize`` adds the
z-scored matrix and the statistics that reproduce it.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage, signal

from . import oracle
from .env import RasterEnv, Scenario, VoxelEnv, add_texture_noise, observed_surface, rasterize, resample, voxelize
from .errors import MissingModalityError, PlacementError, SchemaMismatchError, ValidationError
from .io import array_digest

GROUPS = (
    "geometric",
    "semantic_building",
    "semantic_road",
    "semantic_vegetation",
    "physics",
    "material",
    "normal",
    "texture",
)
VOXEL_GROUPS = ("material", "normal")
SEMANTIC_GROUPS = ("semantic_building", "semantic_road", "semantic_vegetation")
DATASET_FORMAT_VERSION = 1
LABELS = ("path_loss", "los", "rms_delay_spread", "effective_path_count")


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple
    groups: tuple
    ring_radii: tuple = (10.0, 25.0, 50.0)
    fan_size: int = 16
    fan_range: float = 60.0

    def __post_init__(self):
        if len(self.names) != len(self.groups):
            raise ValidationError("names and groups must align")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("feature names must be unique")
        bad = set(self.groups) - set(GROUPS)
        if bad:
            raise ValidationError(f"unknown feature groups {sorted(bad)}")

    def __len__(self):
        return len(self.names)

    @property
    def fingerprint(self) -> str:
        payload = json.dumps([self.names, self.groups, self.ring_radii, self.fan_size, self.fan_range])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def group_set(self) -> tuple:
        return tuple(g for g in GROUPS if g in self.groups)

    def columns(self, groups: Iterable[str]) -> np.ndarray:
        groups = set(groups)
        return np.array([i for i, g in enumerate(self.groups) if g in groups], int)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, groups: Iterable[str]) -> "FeatureSchema":
        cols = self.columns(groups)
        return replace(self, names=tuple(self.names[i] for i in cols), groups=tuple(self.groups[i] for i in cols))

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "groups": list(self.groups),
            "ring_radii": list(self.ring_radii),
            "fan_size": self.fan_size,
            "fan_range": self.fan_range,
            "fingerprint": self.fingerprint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(d["names"]), tuple(d["groups"]), tuple(d["ring_radii"]), int(d["fan_size"]),
                   float(d["fan_range"]))


def make_schema(groups: Sequence[str] = GROUPS, ring_radii=(10.0, 25.0, 50.0), fan_size: int = 16,
                fan_range: float = 60.0) -> FeatureSchema:
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValidationError(f"unknown feature groups {sorted(unknown)}")
    names, tags = [], []

    def add(group, *cols):
        if group in groups:
            names.extend(cols)
            tags.extend([group] * len(cols))

    add("geometric", "distance", "log10_distance", "frequency_ghz", "tx_height", "rx_height")
    for g, label in zip(SEMANTIC_GROUPS, ("building", "road", "vegetation")):
        add(g, *[f"{label}_ring_{int(r)}" for r in ring_radii], f"{label}_corridor")
    add("physics", "los", "fresnel_clearance", "dominant_nu", "obstruction_depth", "obstruction_count",
        "knife_edge_db")
    add("material", "mat_gamma", "mat_scattering", "mat_log_permittivity", "mat_log_conductivity",
        "mat_hit_fraction", "mat_shared_gamma_db", "mat_shared_fraction")
    add("normal", "normal_cos_incidence", "normal_x_fraction")
    add("texture", "texture_corridor", "texture_ring")
    return FeatureSchema(tuple(names), tuple(tags), tuple(float(r) for r in ring_radii), fan_size, fan_range)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema: FeatureSchema
    link: oracle.Link

    def __post_init__(self):
        if len(self.values) != len(self.schema):
            raise ValidationError("feature vector length does not match schema")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("non-finite feature value")

    def as_dict(self) -> dict:
        return dict(zip(self.schema.names, map(float, self.values)))


# --------------------------------------------------------------------------
# extraction helpers


def ring_mean_map(raster: RasterEnv, channel: str, radius: float) -> np.ndarray:
    """Mean of ``channel`` over cells whose centers lie within ``radius`` of each cell center."""
    key = ("ring", channel, radius)
    if key in raster._cache:
        return raster._cache[key]
    g = raster.resolution
    r = int(math.floor(radius / g))
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    disc = ((xx * g) ** 2 + (yy * g) ** 2 <= radius ** 2).astype(float)
    data = raster.channels()[channel]
    num = signal.fftconvolve(data, disc, mode="same")
    den = signal.fftconvolve(np.ones_like(data), disc, mode="same")
    out = num / np.maximum(den, 1e-12)
    # fft round-off on exact zeros
    out[np.abs(out) < 1e-12] = 0.0
    raster._cache[key] = out
    return out


def corridor_cells(raster: RasterEnv, link: oracle.Link) -> tuple:
    """Unique cells in a band of half-width r1 (first Fresnel radius at midpoint) around the ground track."""
    D = link.ground_distance
    prof = oracle.grid_walk(raster, link.tx[:2], link.rx[:2])
    cells = [np.stack([prof.iy, prof.ix], 1)]
    r1 = float(oracle.fresnel_radius(D / 2, D / 2, link.wavelength)) if D > 0 else 0.0
    if D > 0 and r1 >= raster.resolution / 4:
        nx_, ny_ = -(link.rx[1] - link.tx[1]) / D, (link.rx[0] - link.tx[0]) / D
        xmin, ymin, xmax, ymax = raster.bounds
        for s in (-r1, r1):
            p0 = (min(max(link.tx[0] + s * nx_, xmin), xmax), min(max(link.tx[1] + s * ny_, ymin), ymax))
            p1 = (min(max(link.rx[0] + s * nx_, xmin), xmax), min(max(link.rx[1] + s * ny_, ymin), ymax))
            off = oracle.grid_walk(raster, p0, p1)
            cells.append(np.stack([off.iy, off.ix], 1))
    uniq = np.unique(np.concatenate(cells), axis=0)
    return uniq[:, 0], uniq[:, 1]


SHARED_FLOOR_DB = -40.0


def _material_fan(voxels: VoxelEnv, link: oracle.Link, n: int, reach: float) -> dict:
    az = (np.arange(n) + 0.5) * 2 * np.pi / n
    dirs = np.stack([np.cos(az), np.sin(az), np.zeros(n)], 1)
    res = oracle.march(voxels, np.asarray(link.rx, float), dirs, max_len=reach)
    hit = res["hit"]
    out = dict(mat_gamma=0.0, mat_scattering=0.0, mat_log_permittivity=0.0, mat_log_conductivity=0.0,
               mat_hit_fraction=float(hit.mean()), mat_shared_gamma_db=SHARED_FLOOR_DB, mat_shared_fraction=0.0,
               normal_cos_incidence=0.0, normal_x_fraction=0.0)
    if not hit.any():
        return out
    hc = res["hit_cell"][hit]
    ax = res["axis"][hit]
    cos_i = np.abs(dirs[hit][np.arange(len(ax)), ax])
    mids = voxels.material_id[hc[:, 0], hc[:, 1], hc[:, 2]]
    gam, sca, eps, sig = [], [], [], []
    for m, c in zip(mids, cos_i):
        spec = voxels.materials[int(m)]
        gam.append(oracle.reflection_magnitude(spec, c, link.frequency))
        sca.append(spec.scattering_coefficient)
        eps.append(math.log10(spec.relative_permittivity))
        sig.append(math.log10(spec.conductivity + 1e-6))
    # walls the TX also sees carry the single-bounce paths
    pts = np.asarray(link.rx, float) + res["t"][hit][:, None] * dirs[hit]
    to_tx = np.asarray(link.tx, float) - pts
    dist = np.linalg.norm(to_tx, axis=1)
    back = oracle.march(voxels, pts, to_tx / dist[:, None], max_len=dist, start_cells=res["cell"][hit])
    shared = ~back["hit"]
    eff = np.array(gam) * (1.0 - np.array(sca))
    if shared.any():
        out.update(mat_shared_gamma_db=max(20 * math.log10(max(float(eff[shared].mean()), 1e-12)), SHARED_FLOOR_DB),
                   mat_shared_fraction=float(shared.sum() / n))
    out.update(
        mat_gamma=float(np.mean(gam)),
        mat_scattering=float(np.mean(sca)),
        mat_log_permittivity=float(np.mean(eps)),
        mat_log_conductivity=float(np.mean(sig)),
        normal_cos_incidence=float(np.mean(cos_i)),
        normal_x_fraction=float(np.mean(ax == 0)),
    )
    return out


def _feature_dict(raster, voxels, link, schema, oracle_config):
    groups = set(schema.groups)
    f = {}
    if "geometric" in groups:
        d = link.distance
        f.update(distance=d, log10_distance=math.log10(d), frequency_ghz=link.frequency / 1e9,
                 tx_height=link.tx[2], rx_height=link.rx[2])
    rx_cell = raster.cell_of(link.rx[0], link.rx[1])
    if groups & set(SEMANTIC_GROUPS) or "texture" in groups:
        cy, cx = corridor_cells(raster, link)
    for g, label in zip(SEMANTIC_GROUPS, ("building", "road", "vegetation")):
        if g in groups:
            for r in schema.ring_radii:
                f[f"{label}_ring_{int(r)}"] = float(ring_mean_map(raster, label, r)[rx_cell])
            f[f"{label}_corridor"] = float(raster.channels()[label][cy, cx].mean())
    if "physics" in groups:
        prof = oracle.profile_of(raster, link)
        los, obs = oracle.los_test(raster, link, prof)
        h = raster.height[prof.iy, prof.ix]
        blocked = h - oracle._line_height(link, prof.mid, prof.total) > 0
        f.update(
            los=float(los),
            fresnel_clearance=oracle.fresnel_clearance(raster, link, prof),
            dominant_nu=min(oracle.dominant_nu(raster, link, prof), 50.0),
            obstruction_depth=float(prof.length[blocked].sum()),
            obstruction_count=float(len(obs)),
            knife_edge_db=oracle.knife_edge_loss(obs, link, oracle_config.deygout_depth, oracle_config.nu_cutoff),
        )
    if groups & set(VOXEL_GROUPS):
        if voxels is None:
            raise MissingModalityError("material/normal features need a voxel environment")
        f.update(_material_fan(voxels, link, schema.fan_size, schema.fan_range))
    if "texture" in groups:
        f["texture_corridor"] = float(raster.texture[cy, cx].mean())
        f["texture_ring"] = float(ring_mean_map(raster, "texture", schema.ring_radii[0])[rx_cell])
    return f


def extract_link_features(raster: RasterEnv, voxels: VoxelEnv | None, link: oracle.Link, schema: FeatureSchema,
                          oracle_config: oracle.OracleConfig = oracle.OracleConfig()) -> FeatureVector:
    oracle._check_bounds(raster, link)
    f = _feature_dict(raster, voxels, link, schema, oracle_config)
    return FeatureVector(np.array([f[n] for n in schema.names], float), schema, link)


def extract_matrix(raster, voxels, links, schema, oracle_config=oracle.OracleConfig()) -> np.ndarray:
    if not len(links):
        return np.zeros((0, len(schema)))
    return np.stack([extract_link_features(raster, voxels, lk, schema, oracle_config).values for lk in links])


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # bool; std clamped to 1

    def apply(self, X):
        return (X - self.mean) / self.std

    def invert(self, Z):
        return Z * self.std + self.mean

    def subset(self, cols) -> "NormStats":
        return NormStats(self.mean[cols], self.std[cols], self.constant[cols])

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], float), np.array(d["std"], float), np.array(d["constant"], bool))


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: FeatureSchema
    X: np.ndarray  # raw features (n, D)
    labels: dict  # name -> (n,) arrays, see LABELS
    tx: np.ndarray  # (n, 3)
    rx: np.ndarray  # (n, 3)
    frequency: np.ndarray  # (n,)
    scenario_index: np.ndarray  # (n,) int
    provenance: dict = field(default_factory=dict)
    stats: NormStats | None = None
    Xn: np.ndarray | None = None
    context: tuple = field(default=(), repr=False)  # per-scenario environments, not serialized

    def __post_init__(self):
        n = len(self.X)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.schema):
            raise ValidationError("feature matrix does not match schema")
        for k in LABELS:
            if len(self.labels[k]) != n:
                raise ValidationError(f"label {k} length mismatch")
        if len(self.tx) != n or len(self.rx) != n or len(self.frequency) != n:
            raise ValidationError("link arrays length mismatch")

    def __len__(self):
        return len(self.X)

    @property
    def distance(self) -> np.ndarray:
        return np.linalg.norm(self.rx - self.tx, axis=1)

    @property
    def normalized(self) -> np.ndarray:
        if self.Xn is None:
            raise ValidationError("dataset is not normalized")
        return self.Xn

    def links(self) -> list:
        return [oracle.Link(tuple(t), tuple(r), float(f)) for t, r, f in zip(self.tx, self.rx, self.frequency)]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp)
        return replace(
            self,
            X=self.X[idx],
            Xn=None if self.Xn is None else self.Xn[idx],
            labels={k: v[idx] for k, v in self.labels.items()},
            tx=self.tx[idx],
            rx=self.rx[idx],
            frequency=self.frequency[idx],
            scenario_index=self.scenario_index[idx],
        )

    def digest(self) -> str:
        return array_digest(self.X, *(self.labels[k] for k in LABELS), self.tx, self.rx, self.frequency,
                            self.scenario_index)

    # serialization -----------------------------------------------------

    def header(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "schema": self.schema.to_dict(),
            "n_rows": len(self),
            "stats": None if self.stats is None else self.stats.to_dict(),
            "provenance": self.provenance,
            "columns": self._columns(),
            "dtype": "<f8",
            "digest": self.digest(),
        }

    def _columns(self):
        return (list(self.schema.names) + [f"label:{k}" for k in LABELS]
                + ["tx_x", "tx_y", "tx_z", "rx_x", "rx_y", "rx_z", "frequency", "scenario_index"])

    def _matrix(self):
        return np.column_stack([self.X] + [self.labels[k] for k in LABELS]
                               + [self.tx, self.rx, self.frequency, self.scenario_index.astype(float)])

    def save(self, stem, fmt: str = "bin") -> None:
        from pathlib import Path

        stem = Path(stem)
        header = self.header()
        header["matrix_file"] = stem.name + (".bin" if fmt == "bin" else ".csv")
        M = self._matrix()
        if fmt == "bin":
            np.ascontiguousarray(M, "<f8").tofile(stem.with_suffix(".bin"))
        elif fmt == "csv":
            np.savetxt(stem.with_suffix(".csv"), M, delimiter=",", header=",".join(header["columns"]), comments="",
                       fmt="%.17g")
        else:
            raise ValidationError(f"unknown dataset format {fmt!r}")
        with open(stem.with_suffix(".json"), "w") as fh:
            json.dump(header, fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, stem) -> "Dataset":
        from pathlib import Path

        stem = Path(stem)
        if stem.suffix in (".json", ".bin", ".csv"):
            stem = stem.with_suffix("")
        with open(stem.with_suffix(".json")) as fh:
            header = json.load(fh)
        if header.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValidationError("unsupported dataset format_version")
        mfile = stem.parent / header["matrix_file"]
        ncol = len(header["columns"])
        if mfile.suffix == ".bin":
            M = np.fromfile(mfile, "<f8").reshape(header["n_rows"], ncol)
        else:
            M = np.loadtxt(mfile, delimiter=",", skiprows=1, ndmin=2).reshape(header["n_rows"], ncol)
        schema = FeatureSchema.from_dict(header["schema"])
        D = len(schema)
        labels = {k: M[:, D + i].copy() for i, k in enumerate(LABELS)}
        o = D + len(LABELS)
        stats = None if header["stats"] is None else NormStats.from_dict(header["stats"])
        ds = cls(schema, M[:, :D].copy(), labels, M[:, o:o + 3].copy(), M[:, o + 3:o + 6].copy(),
                 M[:, o + 6].copy(), M[:, o + 7].astype(int), header["provenance"], stats,
                 None if stats is None else stats.apply(M[:, :D]))
        if ds.digest() != header["digest"]:
            raise ValidationError("dataset digest mismatch; file corrupted")
        return ds


@dataclass(frozen=True)
class LinkSampler:
    links_per_scenario: int = 100
    rx_height: float = 1.5
    distance_range: tuple = (10.0, 400.0)
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        lo, hi = self.distance_range
        if not 0 < lo < hi or self.links_per_scenario < 1:
            raise ValidationError("invalid link sampler ranges")


@dataclass(frozen=True)
class EnvConfig:
    """How environments are derived from each scenario for labels and features."""

    label_resolution: float = 1.0
    feature_resolution: float | None = None  # None: same raster as labels
    texture_amplitude: Callable | None = None
    texture_seed: int = 0
    perceived_surface: bool = False  # features see heights with texture added on roofs/canopy
    voxel_size: float | None = None  # needed for material/normal groups and ray labels
    label_source: str = "large_scale"  # large_scale | rays | hybrid
    ray_config: oracle.RayConfig = oracle.RayConfig()
    pdp_bin: float = 1 / 30e6
    effective_threshold: float = 25.0

    def __post_init__(self):
        if self.label_source not in ("large_scale", "rays", "hybrid"):
            raise ValidationError(f"unknown label_source {self.label_source!r}")
        if self.label_source != "large_scale" and self.voxel_size is None:
            raise ValidationError("ray labels need voxel_size")


def prepare_environments(scenario: Scenario, env: EnvConfig, index: int = 0) -> dict:
    label_raster = rasterize(scenario, env.label_resolution)
    feat = label_raster
    if env.feature_resolution is not None and env.feature_resolution != env.label_resolution:
        feat = rasterize(scenario, env.feature_resolution)
    if env.texture_amplitude is not None:
        feat = add_texture_noise(feat, env.texture_seed + 7919 * index, env.texture_amplitude)
        if env.perceived_surface:
            feat = observed_surface(feat)
    voxels = voxelize(scenario, env.voxel_size) if env.voxel_size else None
    return {"scenario": scenario, "label_raster": label_raster, "feature_raster": feat, "voxels": voxels}


def _sample_rx(rng, ctx, tx, sampler):
    raster = ctx["label_raster"]
    voxels = ctx["voxels"]
    xmin, ymin, xmax, ymax = raster.bounds
    lo, hi = sampler.distance_range
    for _ in range(sampler.max_attempts):
        # uniform over the annulus area
        r = math.sqrt(rng.uniform(lo * lo, hi * hi))
        a = rng.uniform(0, 2 * math.pi)
        x, y = tx[0] + r * math.cos(a), tx[1] + r * math.sin(a)
        if not (xmin < x < xmax and ymin < y < ymax):
            continue
        if raster.building[raster.cell_of(x, y)] > 0:
            continue
        rx = (float(x), float(y), float(sampler.rx_height))
        if voxels is not None and not voxels.is_free(rx):
            continue
        return rx
    return None


def build_dataset(scenarios: Sequence[Scenario], sampler: LinkSampler, schema: FeatureSchema,
                  oracle_config: oracle.OracleConfig = oracle.OracleConfig(), env: EnvConfig = EnvConfig()
                  ) -> Dataset:
    """Sample links in free space around each TX site and label them with the oracle."""
    if not scenarios:
        raise ValidationError("need at least one scenario")
    if set(schema.groups) & set(VOXEL_GROUPS) and env.voxel_size is None:
        raise MissingModalityError("schema needs voxel features but env has no voxel_size")
    rng = np.random.default_rng(sampler.seed)
    rows, labels, txs, rxs, freqs, sidx = [], {k: [] for k in LABELS}, [], [], [], []
    contexts = []
    rejected = 0
    for si, sc in enumerate(scenarios):
        if not sc.tx_sites:
            raise ValidationError(f"scenario {si} has no TX sites")
        ctx = prepare_environments(sc, env, si)
        contexts.append(ctx)
        trees = {}
        placed = 0
        attempts = 0
        while placed < sampler.links_per_scenario:
            attempts += 1
            if attempts > sampler.links_per_scenario * 20 + 100:
                raise PlacementError(f"scenario {si}: could only place {placed} links")
            site = sc.tx_sites[placed % len(sc.tx_sites)]
            rx = _sample_rx(rng, ctx, site.position, sampler)
            if rx is None:
                raise PlacementError(f"scenario {si}: no free RX position found in distance range")
            link = oracle.Link(tuple(site.position), rx, site.frequency)
            lab = _label(ctx, link, oracle_config, env, trees)
            if lab is None:
                rejected += 1
                continue
            rows.append(extract_link_features(ctx["feature_raster"], ctx["voxels"], link, schema,
                                              oracle_config).values)
            for k in LABELS:
                labels[k].append(lab[k])
            txs.append(link.tx)
            rxs.append(link.rx)
            freqs.append(link.frequency)
            sidx.append(si)
            placed += 1
    provenance = {
        "scenarios": [sc.name or f"scenario-{i}" for i, sc in enumerate(scenarios)],
        "scenario_seeds": [int(sc.seed) for sc in scenarios],
        "sampler": {"links_per_scenario": sampler.links_per_scenario, "rx_height": sampler.rx_height,
                    "distance_range": list(sampler.distance_range), "seed": sampler.seed},
        "oracle": {k: getattr(oracle_config, k) for k in oracle_config.__dataclass_fields__},
        "env": {"label_resolution": env.label_resolution, "feature_resolution": env.feature_resolution,
                "texture_seed": env.texture_seed, "perceived_surface": env.perceived_surface,
                "voxel_size": env.voxel_size, "label_source": env.label_source},
        "rejected_links": rejected,
    }
    return Dataset(
        schema=schema,
        X=np.array(rows, float).reshape(len(rows), len(schema)),
        labels={k: np.array(v, float) for k, v in labels.items()},
        tx=np.array(txs, float),
        rx=np.array(rxs, float),
        frequency=np.array(freqs, float),
        scenario_index=np.array(sidx, int),
        provenance=provenance,
        context=tuple(contexts),
    )


def _label(ctx, link, oracle_config, env, trees):
    out = {}
    if env.label_source in ("rays", "hybrid"):
        key = (link.tx, link.frequency)
        if key not in trees:
            trees[key] = oracle.launch_rays(ctx["voxels"], link.tx, link.frequency, env.ray_config)
        paths = oracle.capture_paths(trees[key], link.rx, ctx["voxels"])
        if paths:
            ms = oracle.multipath_sample(paths, link.frequency, env.pdp_bin, env.effective_threshold)
            out.update(rms_delay_spread=ms.rms_delay_spread, effective_path_count=ms.effective_path_count)
            if env.label_source == "rays":
                out.update(path_loss=ms.path_loss, los=float(ms.los))
        elif env.label_source == "rays":
            return None
        else:
            # only the diffracted large-scale path reaches the receiver
            out.update(rms_delay_spread=0.0, effective_path_count=1)
    if env.label_source in ("large_scale", "hybrid"):
        s = oracle.path_loss(ctx["label_raster"], link, oracle_config)
        out.update(path_loss=s.path_loss, los=float(s.los))
        if env.label_source == "large_scale":
            out.update(rms_delay_spread=s.rms_delay_spread, effective_path_count=s.effective_path_count)
    return out


def relabel(dataset: Dataset, oracle_config: oracle.OracleConfig) -> dict:
    """Recompute large-scale labels for the stored links (independent re-evaluation)."""
    pl, los = [], []
    for link, si in zip(dataset.links(), dataset.scenario_index):
        s = oracle.path_loss(dataset.context[si]["label_raster"], link, oracle_config)
        pl.append(s.path_loss)
        los.append(float(s.los))
    return {"path_loss": np.array(pl), "los": np.array(los)}


def normalize(dataset: Dataset, stats: NormStats | None = None) -> Dataset:
    """Z-score every feature; constant features get std 1 and a warning flag."""
    if stats is None:
        if len(dataset) < 2:
            raise ValidationError("normalize needs at least 2 rows")
        mean = dataset.X.mean(axis=0)
        std = dataset.X.std(axis=0)
        constant = std < 1e-12
        if constant.any():
            names = [n for n, c in zip(dataset.schema.names, constant) if c]
            warnings.warn(f"constant features clamped to unit std: {names}", stacklevel=2)
        std = np.where(constant, 1.0, std)
        # exact zeros for constant columns rather than mean round-off
        mean = np.where(constant, dataset.X[0], mean)
        stats = NormStats(mean, std, constant)
    elif len(stats.mean) != len(dataset.schema):
        raise SchemaMismatchError("normalization stats do not match schema")
    return replace(dataset, stats=stats, Xn=stats.apply(dataset.X))


def denormalize(dataset: Dataset) -> np.ndarray:
    return dataset.stats.invert(dataset.normalized)


def select_groups(dataset: Dataset, groups: Iterable[str]) -> Dataset:
    groups = tuple(groups)
    if not groups:
        raise ValidationError("select at least one group")
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValidationError(f"unknown groups {sorted(unknown)}")
    cols = dataset.schema.columns(groups)
    return replace(
        dataset,
        schema=dataset.schema.subset(groups),
        X=dataset.X[:, cols],
        Xn=None if dataset.Xn is None else dataset.Xn[:, cols],
        stats=None if dataset.stats is None else dataset.stats.subset(cols),
    )


def shift_raster(raster: RasterEnv, dx: float, dy: float) -> RasterEnv:
    """Translate raster content by ``(dx, dy)`` meters; vacated cells become open ground."""
    g = raster.resolution
    sh = (dy / g, dx / g)

    def mv(a, order):
        return ndimage.shift(np.asarray(a), sh, order=order, mode="constant", cval=0.0, prefilter=False)

    b, r, v = (np.clip(mv(a, 1), 0, 1) for a in (raster.building, raster.road, raster.vegetation))
    tot = b + r + v
    over = tot > 1
    if over.any():
        b, r, v = (np.where(over, a / tot, a) for a in (b, r, v))
    return raster.with_channels(
        building=b, road=r, vegetation=v,
        height=np.maximum(mv(raster.height, 0), 0.0),
        texture=mv(raster.texture, 1),
        vegetation_db_per_m=np.maximum(mv(raster.vegetation_db_per_m, 1), 0.0),
    )


def misalign(dataset: Dataset, group: str, shift: float, seed: int = 0, max_fraction: float = 0.25) -> Dataset:
    """Recompute one group's columns from a rigidly translated copy of the feature raster."""
    if group not in dataset.schema.groups:
        raise ValidationError(f"group {group!r} not in schema")
    if group in VOXEL_GROUPS:
        raise ValidationError("misalignment applies to raster-derived groups")
    if not dataset.context:
        raise ValidationError("dataset has no environment context; rebuild it in this session")
    if shift == 0:
        return dataset
    angle = np.random.default_rng(seed).uniform(0, 2 * math.pi)
    dx, dy = shift * math.cos(angle), shift * math.sin(angle)
    cols = dataset.schema.columns([group])
    sub = dataset.schema.subset([group])
    X = dataset.X.copy()
    for si, ctx in enumerate(dataset.context):
        r = ctx["feature_raster"]
        if abs(shift) > max_fraction * min(r.bounds[2] - r.bounds[0], r.bounds[3] - r.bounds[1]):
            raise ValidationError("shift exceeds the bounds margin")
        shifted = shift_raster(r, dx, dy)
        rows = np.flatnonzero(dataset.scenario_index == si)
        for i in rows:
            link = oracle.Link(tuple(dataset.tx[i]), tuple(dataset.rx[i]), float(dataset.frequency[i]))
            X[i, cols] = extract_link_features(shifted, None, link, sub).values
    out = replace(dataset, X=X, Xn=None, stats=None,
                  provenance={**dataset.provenance, "misalign": {"group": group, "shift": shift, "seed": seed}})
    return normalize(out) if dataset.stats is not None else out


def split(dataset: Dataset, test_fraction: float = 0.2, seed: int = 0, by_scenario: bool = False):
    """Random (or held-out-scenario) train/test split; returns ``(train, test, split_digest)``."""
    n = len(dataset)
    if by_scenario:
        scen = np.unique(dataset.scenario_index)
        rng = np.random.default_rng(seed)
        k = max(1, int(round(test_fraction * len(scen))))
        test_s = rng.permutation(scen)[:k]
        mask = np.isin(dataset.scenario_index, test_s)
    else:
        perm = np.random.default_rng(seed).permutation(n)
        mask = np.zeros(n, bool)
        mask[perm[: max(1, int(round(test_fraction * n)))]] = True
    tr, te = np.flatnonzero(~mask), np.flatnonzero(mask)
    return dataset.take(tr), dataset.take(te), array_digest(tr, te)
