import hashlib
import json
from pathlib import Path

import pytest

from chanform import cli


def run(capsys, *args):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


def tree_digest(d: Path) -> dict:
    """Hash of every output file except wall-clock timing files."""
    return {p.relative_to(d).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(d.rglob("*")) if p.is_file() and "timing" not in p.name}


SMALL_SCENE = ["--size", "150,150", "--n-buildings", "6", "--n-roads", "2", "--n-vegetation", "2"]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """scenario -> dataset -> model, built once through the command line."""
    root = tmp_path_factory.mktemp("pipe")
    assert cli.main(["scenario", "gen", "--seed", "3", "--out", str(root / "sc"), *SMALL_SCENE]) == 0
    sc = root / "sc" / "scenario.json"
    assert cli.main(["dataset", "build", "--scenarios", str(sc), "--links", "120", "--distance", "10,120",
                     "--out", str(root / "ds")]) == 0
    ds = root / "ds" / "dataset"
    assert cli.main(["train", "--dataset", str(ds), "--epochs", "5", "--extractor", "8", "--head", "4",
                     "--out", str(root / "m")]) == 0
    return {"root": root, "scenario": sc, "dataset": ds, "model": root / "m" / "model"}


def test_free_space_link_prints_friis(capsys):
    code, out, _ = run(capsys, "oracle", "link", "--tx", "0,0,1.5", "--rx", "100,0,1.5")
    assert code == 0
    payload = json.loads(out)
    assert payload["path_loss_db"] == pytest.approx(87.87, abs=0.01)
    assert payload["los"] is True or payload["los"] == 1


def test_link_csv_output(capsys):
    code, out, _ = run(capsys, "oracle", "link", "--tx", "0,0,1.5", "--rx", "100,0,1.5", "--format", "csv")
    assert code == 0
    header, row = out.strip().splitlines()
    assert "path_loss_db" in header.split(",")


def test_scenario_gen_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "scenario", "gen", "--seed", "7", "--out", tmp_path / d, *SMALL_SCENE)[0] == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (tmp_path / "a" / "resolved_config.json").exists()


def test_usage_errors_exit_1(capsys):
    code, _, err = run(capsys, "scenario", "gen", "--no-such-flag")
    assert code == 1 and err.strip()
    code, _, err = run(capsys, "frobnicate")
    assert code == 1 and err.strip()
    code, _, err = run(capsys)
    assert code == 1 and "COMMAND" in err
    code, _, err = run(capsys, "oracle", "link", "--tx", "0,0,1.5")
    assert code == 1 and "--rx" in err


def test_data_errors_exit_2(tmp_path, capsys):
    code, _, err = run(capsys, "raster", "--scenario", tmp_path / "missing.json", "--out", tmp_path)
    assert code == 2 and err.startswith("error")
    (tmp_path / "bad.json").write_text("{not json")
    assert run(capsys, "raster", "--scenario", tmp_path / "bad.json", "--out", tmp_path)[0] == 2
    # placement failure on an impossible scene is a data error too
    code, _, _ = run(capsys, "scenario", "gen", "--size", "20,20", "--n-buildings", "40", "--out", tmp_path)
    assert code == 2


def test_divergence_exits_3(tmp_path, capsys, pipeline):
    code, _, err = run(capsys, "train", "--dataset", pipeline["dataset"], "--epochs", "5", "--learning-rate",
                       "1e200", "--out", tmp_path)
    assert code == 3 and "diverged" in err
    assert (tmp_path / "divergence_report.json").exists()


def test_snapshot_reruns_to_same_result(tmp_path, capsys):
    assert run(capsys, "scenario", "gen", "--seed", "11", "--out", tmp_path / "a", *SMALL_SCENE)[0] == 0
    snap = tmp_path / "a" / "resolved_config.json"
    assert run(capsys, "scenario", "gen", "--config", snap, "--out", tmp_path / "b")[0] == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_config_env_flag_layering(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "scenario gen": {"n_buildings": 3, "size": [150, 150]}}))
    code, out, _ = run(capsys, "scenario", "gen", "--config", cfg, "--out", tmp_path / "a")
    snap = json.loads((tmp_path / "a" / "resolved_config.json").read_text())["config"]
    assert code == 0 and snap["seed"] == 5 and snap["n_buildings"] == 3 and json.loads(out)["buildings"] == 3
    monkeypatch.setenv("CHANFORM_N_BUILDINGS", "4")
    run(capsys, "scenario", "gen", "--config", cfg, "--out", tmp_path / "b")
    assert json.loads((tmp_path / "b" / "resolved_config.json").read_text())["config"]["n_buildings"] == 4
    run(capsys, "scenario", "gen", "--config", cfg, "--n-buildings", "2", "--out", tmp_path / "c")
    assert json.loads((tmp_path / "c" / "resolved_config.json").read_text())["config"]["n_buildings"] == 2
    monkeypatch.setenv("CHANFORM_N_BUILDINGS", "many")
    assert run(capsys, "scenario", "gen", "--out", tmp_path / "d")[0] == 1


def test_raster_and_voxelize(tmp_path, capsys, pipeline):
    code, out, _ = run(capsys, "raster", "--scenario", pipeline["scenario"], "--resolution", "2",
                       "--out", tmp_path)
    assert code == 0 and json.loads(out)["shape"] == [75, 75]
    assert (tmp_path / "raster.bin").exists()
    code, out, _ = run(capsys, "voxelize", "--scenario", pipeline["scenario"], "--voxel-size", "4",
                       "--out", tmp_path)
    assert code == 0 and json.loads(out)["occupied_volume_m3"] > 0


def test_oracle_map_parallel_independent(tmp_path, capsys, pipeline):
    args = ["oracle", "map", "--scenario", pipeline["scenario"], "--map-resolution", "10"]
    assert run(capsys, *args, "--parallel", "1", "--out", tmp_path / "p1")[0] == 0
    assert run(capsys, *args, "--parallel", "2", "--out", tmp_path / "p2")[0] == 0
    assert tree_digest(tmp_path / "p1") == tree_digest(tmp_path / "p2")


def test_model_commands(tmp_path, capsys, pipeline):
    m, ds, sc = pipeline["model"], pipeline["dataset"], pipeline["scenario"]
    code, out, _ = run(capsys, "predict", "--model", m, "--dataset", ds, "--out", tmp_path / "pred")
    assert code == 0 and json.loads(out)["n"] == 120
    assert (tmp_path / "pred" / "predictions.json").exists()
    code, _, _ = run(capsys, "finetune", "--model", m, "--dataset", ds, "--epochs", "2", "--out", tmp_path / "ft")
    assert code == 0
    code, out, _ = run(capsys, "radiomap", "--model", m, "--scenario", sc, "--map-resolution", "15",
                       "--out", tmp_path / "map")
    assert code == 0
    for sub in ("saliency", "curves", "rank"):
        code, out, _ = run(capsys, "explain", sub, "--model", m, "--dataset", ds, "--limit", "40",
                           "--out", tmp_path / sub)
        assert code == 0 and out.strip()
    ranking = json.loads((tmp_path / "rank" / "ranking.json").read_text())
    assert [r["rank"] for r in ranking] == list(range(1, len(ranking) + 1))


def test_training_outputs_are_deterministic(tmp_path, capsys, pipeline):
    for d in ("a", "b"):
        assert run(capsys, "train", "--dataset", pipeline["dataset"], "--epochs", "3", "--extractor", "8",
                   "--head", "4", "--out", tmp_path / d)[0] == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert (tmp_path / "a" / "timing.json").exists()
    assert "elapsed" not in (tmp_path / "a" / "train_report.json").read_text()


def test_experiment_and_report(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"experiment": {"granularity_3d": {
        "scenario": {"size": [60, 60], "n_buildings": 2, "building_size": [8, 15], "n_roads": 0,
                     "n_vegetation": 0, "n_tx": 1},
        "n_rx": 8, "rays": {"n_azimuth": 60, "n_elevation": 15}}}}))
    code, out, _ = run(capsys, "experiment", "granularity_3d", "--config", cfg, "--out", tmp_path / "r")
    assert code == 0
    assert json.loads(out)[0]["experiment"] == "granularity_3d"
    code, out, _ = run(capsys, "report", "summarize", "--reports", tmp_path / "r", "--out", tmp_path / "s")
    row = json.loads(out)[0]
    assert code == 0 and row["verdicts_consistent"] and row["digest_ok"]
    assert run(capsys, "report", "summarize", "--reports", tmp_path / "s", "--out", tmp_path / "t")[0] == 2
