import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chanform import env as envmod
from chanform import features, oracle
from chanform.env import ScenarioConfig
from chanform.errors import MissingModalityError, PlacementError, ValidationError
from chanform.oracle import Link

from conftest import box, scenario_with

F = 5.9e9


def test_free_space_link_features():
    r = envmod.rasterize(envmod.empty_scenario((200, 200)), 1.0)
    schema = features.make_schema(("geometric", "physics"))
    link = Link((20.0, 30.0, 10.0), (150.0, 120.0, 1.5), F)
    fv = features.extract_link_features(r, None, link, schema).as_dict()
    assert fv["los"] == 1.0 and fv["fresnel_clearance"] == 1.0 and fv["obstruction_depth"] == 0.0
    assert fv["distance"] == math.dist(link.tx, link.rx)
    assert fv["log10_distance"] == pytest.approx(math.log10(fv["distance"]))
    assert fv["frequency_ghz"] == 5.9 and fv["tx_height"] == 10.0 and fv["rx_height"] == 1.5


def test_corridor_building_fraction_half():
    sc = scenario_with([(box(100, 60, 190, 140), 12)], size=(200, 200))
    r = envmod.rasterize(sc, 1.0)
    link = Link((20.0, 100.0, 10.0), (180.0, 100.0, 1.5), F)
    fv = features.extract_link_features(r, None, link, features.make_schema(("semantic_building",))).as_dict()
    # explicit count: the track spans x in [20, 180]; the building covers x in [100, 180]
    xs = np.arange(20, 180) + 0.5
    expected = np.mean(xs > 100)
    assert expected == 0.5
    assert fv["building_corridor"] == pytest.approx(expected, abs=0.03)


def test_missing_voxels_raise():
    r = envmod.rasterize(envmod.empty_scenario((50, 50)), 1.0)
    with pytest.raises(MissingModalityError):
        features.extract_link_features(r, None, Link((5.0, 5.0, 5.0), (40.0, 40.0, 1.5), F),
                                       features.make_schema(("geometric", "material")))


def test_physics_features_agree_with_oracle(small_suite):
    sc = small_suite[0]
    r = envmod.rasterize(sc, 1.0)
    schema = features.make_schema(("physics",))
    rng = np.random.default_rng(1)
    tx = sc.tx_sites[0].position
    for _ in range(20):
        rx = (float(rng.uniform(1, 199)), float(rng.uniform(1, 199)), 1.5)
        link = Link(tx, rx, F)
        fv = features.extract_link_features(r, None, link, schema).as_dict()
        los, obs = oracle.los_test(r, link)
        assert fv["los"] == float(los)
        assert fv["obstruction_count"] == len(obs)
        assert fv["fresnel_clearance"] == oracle.fresnel_clearance(r, link)
        assert fv["knife_edge_db"] == oracle.knife_edge_loss(obs, link)


def test_material_features_see_walls():
    sc = scenario_with([(box(40, 0, 50, 100), 20, "metal")], size=(100, 100), tx=((20.0, 50.0, 10.0),))
    v = envmod.voxelize(sc, 1.0)
    r = envmod.rasterize(sc, 1.0)
    fv = features.extract_link_features(r, v, Link((20.0, 50.0, 10.0), (30.0, 60.0, 1.5), F),
                                        features.make_schema(("material", "normal"))).as_dict()
    assert fv["mat_gamma"] == pytest.approx(1.0)
    assert 0 < fv["mat_hit_fraction"] <= 1
    assert fv["mat_shared_fraction"] > 0
    assert fv["normal_x_fraction"] == 1.0


# --------------------------------------------------------------------------
# datasets


def test_build_counts_determinism_and_labels(small_suite):
    schema = features.make_schema(("geometric", "physics"))
    sampler = features.LinkSampler(100, 1.5, (10.0, 150.0), 4)
    a = features.build_dataset(small_suite[:2], sampler, schema)
    b = features.build_dataset(small_suite[:2], sampler, schema)
    assert len(a) == 200
    assert a.digest() == b.digest()
    re = features.relabel(a, oracle.OracleConfig())
    assert np.array_equal(re["path_loss"], a.labels["path_loss"])
    assert np.array_equal(re["los"], a.labels["los"])
    # the range bounds ground distance
    d = np.hypot(*(a.rx - a.tx)[:, :2].T)
    assert np.all((d >= 10.0) & (d <= 150.0))
    assert np.all(a.distance >= d)
    # links start from free RX positions
    for (x, y, _), si in zip(a.rx[:30], a.scenario_index[:30]):
        lr = a.context[si]["label_raster"]
        assert lr.building[lr.cell_of(x, y)] == 0


def test_relabel_is_independent_of_stored_labels(small_suite):
    # an oracle config change must change the recomputed labels
    schema = features.make_schema(("geometric",))
    ds = features.build_dataset(small_suite[:1], features.LinkSampler(30, 1.5, (10.0, 150.0), 0), schema)
    shifted = features.relabel(ds, oracle.OracleConfig(shadowing_sigma_db=5.0, seed=1))
    assert not np.array_equal(shifted["path_loss"], ds.labels["path_loss"])


def test_placement_error_without_free_space():
    sc = scenario_with([(box(0, 0, 100, 100), 10)], size=(100, 100), tx=((1.0, 1.0, 20.0),))
    with pytest.raises(PlacementError):
        features.build_dataset([sc], features.LinkSampler(5, 1.5, (10.0, 50.0), 0),
                               features.make_schema(("geometric",)))


def test_normalize_contract(small_dataset):
    Z = small_dataset.normalized
    live = ~small_dataset.stats.constant
    assert np.all(np.abs(Z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(Z[:, live].std(axis=0) - 1) < 1e-9)
    assert np.max(np.abs(features.denormalize(small_dataset) - small_dataset.X)) < 1e-9


def test_constant_feature_flagged(small_dataset):
    idx = small_dataset.schema.index("frequency_ghz")
    assert small_dataset.stats.constant[idx]
    assert np.all(small_dataset.normalized[:, idx] == 0)
    with pytest.warns(UserWarning):
        features.normalize(small_dataset)


def test_dataset_round_trip(tmp_path, small_dataset):
    for fmt in ("bin", "csv"):
        small_dataset.save(tmp_path / f"d_{fmt}", fmt)
        back = features.Dataset.load(tmp_path / f"d_{fmt}")
        assert back.digest() == small_dataset.digest()
        assert np.array_equal(back.X, small_dataset.X)
        assert np.max(np.abs(back.normalized - small_dataset.normalized)) < 1e-9


def test_corrupted_dataset_detected(tmp_path, small_dataset):
    small_dataset.save(tmp_path / "d", "bin")
    raw = np.fromfile(tmp_path / "d.bin", "<f8")
    raw[3] += 1.0
    raw.tofile(tmp_path / "d.bin")
    with pytest.raises(ValidationError):
        features.Dataset.load(tmp_path / "d")


def test_select_groups(small_dataset):
    allg = features.select_groups(small_dataset, small_dataset.schema.group_set())
    assert np.array_equal(allg.X, small_dataset.X) and allg.schema == small_dataset.schema
    geo = features.select_groups(small_dataset, ["geometric"])
    assert geo.X.shape[1] == 5
    again = features.select_groups(geo, ["geometric"])
    assert np.array_equal(again.X, geo.X) and again.schema == geo.schema
    assert again.labels is small_dataset.labels
    with pytest.raises(ValidationError):
        features.select_groups(small_dataset, ["bogus"])


def test_misalign_identity_and_isolation(small_dataset):
    assert features.misalign(small_dataset, "semantic_building", 0.0) is small_dataset
    moved = features.misalign(small_dataset, "semantic_building", 5.0, seed=1)
    cols = small_dataset.schema.columns(["semantic_building"])
    other = np.setdiff1d(np.arange(len(small_dataset.schema)), cols)
    assert np.array_equal(moved.X[:, other], small_dataset.X[:, other])
    assert not np.array_equal(moved.X[:, cols], small_dataset.X[:, cols])
    with pytest.raises(ValidationError):
        features.misalign(small_dataset, "semantic_building", 500.0)


def test_misalignment_decorrelates_building_features():
    cfg = ScenarioConfig(size=(200.0, 200.0), n_buildings=14, building_size=(12.0, 30.0), n_roads=2, n_vegetation=0)
    scs = [envmod.generate_scenario(s, cfg) for s in range(4)]
    ds = features.build_dataset(scs, features.LinkSampler(150, 1.5, (10.0, 150.0), 0),
                                features.make_schema(("semantic_building",)))
    moved = features.misalign(ds, "semantic_building", 5.0, seed=0)
    j = ds.schema.index("building_corridor")
    before = abs(np.corrcoef(ds.X[:, j], ds.labels["los"])[0, 1])
    after = abs(np.corrcoef(moved.X[:, j], ds.labels["los"])[0, 1])
    assert after < before


def test_ray_labels(small_suite):
    schema = features.make_schema(("geometric", "material"))
    env = features.EnvConfig(voxel_size=2.0, label_source="rays", ray_config=oracle.RayConfig(120, 30))
    ds = features.build_dataset(small_suite[:1], features.LinkSampler(20, 1.5, (10.0, 100.0), 0), schema,
                                env=env)
    assert len(ds) == 20
    assert np.all(ds.labels["effective_path_count"] >= 1)
    assert np.all(ds.labels["rms_delay_spread"] >= 0)
    # path loss from the summed ray powers never beats free space by more than the reflected energy allows
    fs = oracle.fspl_db(ds.distance, F)
    assert np.all(ds.labels["path_loss"] >= fs - 10 * math.log10(1 + 3 * 4))


def test_env_config_validation():
    with pytest.raises(ValidationError):
        features.EnvConfig(label_source="rays")
    with pytest.raises(ValidationError):
        features.EnvConfig(label_source="magic", voxel_size=1.0)


# --------------------------------------------------------------------------
# properties


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.floats(0, 1))
def test_extraction_is_pure(seed, u, w):
    sc = envmod.generate_scenario(seed % 20, ScenarioConfig(size=(150.0, 150.0), n_buildings=4))
    r = envmod.rasterize(sc, 2.0)
    tx = sc.tx_sites[0].position
    rx = (1 + 148 * u, 1 + 148 * w, 1.5)
    schema = features.make_schema(tuple(g for g in features.GROUPS if g not in features.VOXEL_GROUPS))
    a = features.extract_link_features(r, None, Link(tx, rx, F), schema).values
    b = features.extract_link_features(envmod.rasterize(sc, 2.0), None, Link(tx, rx, F), schema).values
    assert np.array_equal(a, b) and np.all(np.isfinite(a))


def test_corridor_fraction_converges_with_resolution():
    cfg = ScenarioConfig(size=(200.0, 200.0), n_buildings=10, n_roads=2, n_vegetation=2, rotation_deg=(0.0, 45.0))
    rng = np.random.default_rng(0)
    schema = features.make_schema(("semantic_building",))
    diffs = []
    for g in (8.0, 4.0, 2.0, 1.0):
        per = []
        for s in range(3):
            sc = envmod.generate_scenario(s, cfg)
            coarse, fine = envmod.rasterize(sc, g), envmod.rasterize(sc, g / 2)
            tx = sc.tx_sites[0].position
            for rx in np.random.default_rng(s).uniform(5, 195, (25, 2)):
                link = Link(tx, (float(rx[0]), float(rx[1]), 1.5), F)
                j = schema.index("building_corridor")
                a = features.extract_link_features(coarse, None, link, schema).values[j]
                b = features.extract_link_features(fine, None, link, schema).values[j]
                per.append(abs(a - b))
        diffs.append(np.mean(per))
    assert all(x > y for x, y in zip(diffs, diffs[1:]))


@settings(max_examples=6, deadline=None)
@given(st.sampled_from(["semantic_building", "semantic_road", "semantic_vegetation", "physics"]),
       st.floats(1.0, 10.0), st.integers(0, 100))
def test_misalign_touches_only_named_group(small_dataset, group, shift, seed):
    moved = features.misalign(small_dataset, group, shift, seed)
    other = np.setdiff1d(np.arange(len(small_dataset.schema)), small_dataset.schema.columns([group]))
    assert np.array_equal(moved.X[:, other], small_dataset.X[:, other])
