import json

import numpy as np
import pytest

from chanform import env as envmod
from chanform import experiments as ex
from chanform import oracle, predictor
from chanform.errors import ValidationError
from chanform.predictor import ArchConfig, TrainConfig


TINY_SUITE = ex.SuiteConfig(n_scenarios=2, links_per_scenario=60, distance_range=(10.0, 120.0),
                            scenario=envmod.ScenarioConfig(size=(150.0, 150.0), n_buildings=6, n_roads=2,
                                                           n_vegetation=2))
TINY_MODEL = ex.ModelConfig(ArchConfig((8,), (4,)), TrainConfig(epochs=3, lambda_expl=0.0))


def tiny_configs():
    return {
        "granularity_2d": ex.Granularity2DConfig(
            suite=ex.SuiteConfig(n_scenarios=2, links_per_scenario=40, distance_range=(10.0, 100.0),
                                 scenario=envmod.ScenarioConfig(size=(120.0, 120.0), n_buildings=4)),
            resolutions=(1.0, 4.0, 8.0), truth_resolution=1.0, seeds=(0,), model=TINY_MODEL),
        "granularity_3d": ex.Granularity3DConfig(
            scenario=envmod.ScenarioConfig(size=(60.0, 60.0), n_buildings=2, building_size=(8.0, 15.0),
                                           n_roads=0, n_vegetation=0, n_tx=1),
            voxel_sizes=(8.0, 4.0, 2.0, 1.0), n_rx=10, rays=oracle.RayConfig(n_azimuth=60, n_elevation=15)),
        "semantic_ablation": ex.SemanticConfig(suite=TINY_SUITE, seeds=(0,), model=TINY_MODEL),
        "physics_ablation": ex.PhysicsConfig(
            suite=ex.SuiteConfig(n_scenarios=1, links_per_scenario=30, distance_range=(10.0, 60.0),
                                 scenario=envmod.ScenarioConfig(size=(80.0, 80.0), n_buildings=3, n_roads=0,
                                                                n_vegetation=0)),
            voxel_size=4.0, rays=oracle.RayConfig(n_azimuth=60, n_elevation=15), seeds=(0,), model=TINY_MODEL),
        "misalignment": ex.MisalignmentConfig(suite=TINY_SUITE, seeds=(0,), model=TINY_MODEL),
        "transfer": ex.TransferConfig(
            source=TINY_SUITE, target_scenario=envmod.ScenarioConfig(size=(150.0, 150.0), n_buildings=6),
            target_samples=30, target_validation=30, seeds=(0,), arch=ArchConfig((8,), (4,)),
            pretrain=TrainConfig(epochs=3, lambda_expl=0.0), adapt=TrainConfig(epochs=4, batch_size=16,
                                                                               lambda_expl=0.0)),
        "explanation_guided": ex.ExplanationConfig(
            suite=TINY_SUITE, seeds=(0,),
            model=ex.ModelConfig(ArchConfig((8,), (4,)), TrainConfig(epochs=2, lambda_expl=0.0))),
    }


@pytest.fixture(scope="module")
def tiny_reports():
    return {name: ex.RUNNERS[name][0](cfg) for name, cfg in tiny_configs().items()}


def test_every_runner_produces_consistent_reports(tiny_reports):
    assert set(tiny_reports) == set(ex.RUNNERS)
    for name, rep in tiny_reports.items():
        assert rep.experiment == name
        assert rep.table and rep.verdicts
        assert rep.recompute() == rep.verdicts
        assert all(isinstance(v, bool) for v in rep.verdicts.values())
        json.dumps(rep.to_dict())


def test_reports_are_reproducible(tiny_reports):
    cfgs = tiny_configs()
    for name in ("granularity_3d", "semantic_ablation", "transfer"):
        again = ex.RUNNERS[name][0](cfgs[name])
        assert again.table == tiny_reports[name].table
        assert again.digest() == tiny_reports[name].digest()


def test_parallel_matches_serial(tiny_reports):
    cfg = tiny_configs()["semantic_ablation"]
    par = ex.run_semantic_ablation(cfg, parallel=2)
    assert par.table == tiny_reports["semantic_ablation"].table


def test_report_contents(tiny_reports):
    g3 = tiny_reports["granularity_3d"]
    finest = min(g3.table, key=lambda r: r["voxel_size"])
    assert finest["error"] == 0 and g3.verdicts["finest_is_zero"]
    assert all(r["min_delay_margin_s"] >= -1e-15 for r in g3.table)
    sem = tiny_reports["semantic_ablation"].table
    assert len({r["split"] for r in sem}) == 1
    assert {r["condition"] for r in sem} == {"baseline", "semantic_building", "semantic_road",
                                             "semantic_vegetation"}
    phys = tiny_reports["physics_ablation"].table
    assert all("n_material" in r for r in phys if "material" in r["condition"])
    mis = tiny_reports["misalignment"].table
    assert all(r["other_columns_unchanged"] for r in mis)
    tr = tiny_reports["transfer"].table
    assert {r["condition"] for r in tr if r["kind"] == "trajectory"} == {"finetune", "scratch"}
    assert all(r["extractor_unchanged"] for r in tr if r["kind"] == "summary")


def test_save_load_and_digest(tmp_path, tiny_reports):
    rep = tiny_reports["semantic_ablation"]
    paths = rep.save(tmp_path)
    assert {p.name for p in paths} == {"semantic_ablation.json", "semantic_ablation.csv"}
    assert (tmp_path / "semantic_ablation.timing.json").exists()
    back = ex.ExperimentReport.load(tmp_path / "semantic_ablation.json")
    assert back.digest() == rep.digest()
    assert back.recompute() == rep.verdicts
    saved = json.loads((tmp_path / "semantic_ablation.json").read_text())
    assert "timing" not in saved and saved["digest"] == rep.digest()
    # timing never enters the digest
    rep2 = ex.ExperimentReport(rep.experiment, rep.config, rep.seeds, rep.table, rep.verdicts, 999.0)
    assert rep2.digest() == rep.digest()


# --------------------------------------------------------------------------
# verdicts from hand-written tables


def _rows(key, values, **extra):
    return [{key: k, "rmse": v, **extra} for k, v in values.items()]


def test_granularity_2d_verdict():
    u = _rows("resolution", {0.5: 5.0, 1.0: 4.6, 2.0: 4.3, 4.0: 4.5, 8.0: 5.2})
    assert all(ex._verdict_g2d(u, {"margin_db": 0.2}).values())
    mono = _rows("resolution", {0.5: 4.0, 1.0: 4.2, 2.0: 4.4, 4.0: 4.6})
    v = ex._verdict_g2d(mono, {"margin_db": 0.2})
    assert not v["interior_minimum"] and not v["finest_above_minimum"]
    shallow = _rows("resolution", {0.5: 4.5, 1.0: 4.4, 2.0: 4.6})
    assert not ex._verdict_g2d(shallow, {"margin_db": 0.2})["interior_minimum"]


def test_granularity_3d_verdict():
    rows = [{"voxel_size": v, "error": e, "min_delay_margin_s": 0.0} for v, e in ((8, 3.0), (4, 2.0), (2, 2.0), (1, 0.0))]
    assert all(ex._verdict_g3d(rows, {"tolerance": 1e-9}).values())
    rows[2]["error"] = 2.5
    assert not ex._verdict_g3d(rows, {"tolerance": 1e-9})["non_increasing"]


def test_semantic_verdict():
    t = [{"condition": c, "seed": 0, "split": "h", "rmse": r}
         for c, r in (("baseline", 6.0), ("semantic_building", 4.5), ("semantic_road", 5.6),
                      ("semantic_vegetation", 5.9))]
    assert all(ex._verdict_semantic(t, {}).values())
    t[2]["rmse"] = 5.95
    v = ex._verdict_semantic(t, {})
    assert v["building_gt_road"] and not v["road_gt_vegetation"]


def test_misalignment_verdict():
    t = [{"condition": c, "rmse": r, "other_columns_unchanged": True}
         for c, r in (("semantic_only", 5.0), ("depth_only", 6.0), ("combined_aligned", 4.9),
                      ("combined_misaligned", 5.4))]
    assert all(ex._verdict_misalignment(t, {}).values())


def test_transfer_verdict_and_summary():
    def traj(cond, vals):
        return [{"kind": "trajectory", "condition": cond, "seed": 0, "epoch": i + 1, "val_rmse": v,
                 "train_rmse": v} for i, v in enumerate(vals)]

    t = traj("finetune", [6.0, 5.0, 4.9, 4.8, 4.8, 4.8]) + traj("scratch", [12, 10, 8, 6, 5.2, 5.0])
    t.append({"kind": "summary", "condition": "finetune", "seed": 0, "extractor_unchanged": True,
              "unadapted_rmse": 7.0})
    s = ex.transfer_summary(t, {"margin_db": 0.3})[0]
    assert s["threshold"] == pytest.approx(5.3)
    assert s["epochs_finetune"] == 2 and s["epochs_scratch"] == 5
    assert all(ex._verdict_transfer(t, {"margin_db": 0.3, "epoch_ratio": 0.5}).values())


def test_explanation_verdict():
    t = [{"condition": "unsupervised", "rmse": 5.0, "saliency_mass_nlos": 0.4, "deletion_rise": 1.0},
         {"condition": "supervised", "rmse": 5.05, "saliency_mass_nlos": 0.6, "deletion_rise": 1.5}]
    assert all(ex._verdict_explanation(t, {"rmse_tolerance_db": 0.1}).values())
    t[1]["rmse"] = 5.2
    assert not ex._verdict_explanation(t, {"rmse_tolerance_db": 0.1})["rmse_not_degraded"]


# --------------------------------------------------------------------------
# configuration


def test_configure_nested_overrides():
    cfg = ex.configure(ex.SemanticConfig(), {"seeds": [4, 5], "suite": {"n_scenarios": 3},
                                             "model": {"train": {"epochs": 7}}})
    assert cfg.seeds == (4, 5) and cfg.suite.n_scenarios == 3 and cfg.model.train.epochs == 7
    assert cfg.suite.links_per_scenario == ex.SemanticConfig().suite.links_per_scenario
    with pytest.raises(ValidationError):
        ex.configure(ex.SemanticConfig(), {"nonsense": 1})
    assert ex.configure(ex.SemanticConfig(), None) == ex.SemanticConfig()


def test_runner_preconditions():
    with pytest.raises(ValidationError):
        ex.run_granularity_2d(ex.Granularity2DConfig(resolutions=(1.0, 2.0)))
    with pytest.raises(ValidationError):
        ex.run_granularity_3d(ex.Granularity3DConfig(voxel_sizes=(4.0, 2.0, 1.0)))
    with pytest.raises(ValidationError):
        ex.run_explanation_guided(ex.ExplanationConfig(lambda_expl=0.0))


def test_zero_explanation_weight_gives_zero_explanation_gradient():
    rng = np.random.default_rng(0)
    schema = predictor.FeatureSchema(("a", "b", "c"), ("geometric", "physics", "semantic_building"))
    m = predictor.init_model(schema, ArchConfig((4,), (3,)), 0)
    X = rng.normal(size=(8, 3))
    d = rng.uniform(10, 100, 8)
    labels = {"path_loss": np.full(8, 90.0), "los": np.zeros(8), "rms_delay_spread": np.full(8, 1e-8),
              "effective_path_count": np.ones(8)}
    _, cache = predictor.forward(m, X, d)
    quiet = TrainConfig(lambda_phys=0.0, lambda_expl=0.0, head_weights=(0.0, 0.0, 0.0, 0.0))
    assert all(not v.any() for v in predictor.backward(m, cache, labels, quiet).values())
    loud = TrainConfig(lambda_phys=0.0, lambda_expl=1.0, head_weights=(0.0, 0.0, 0.0, 0.0))
    assert any(v.any() for v in predictor.backward(m, cache, labels, loud).values())
