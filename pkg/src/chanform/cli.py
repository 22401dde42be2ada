"""Command-line interface.

Settings are layered: built-in defaults < ``--config`` JSON file < ``CHANFORM_*``
environment variables < command-line flags. Every command that writes
artifacts also writes ``resolved_config.json`` next to them; passing that file
back through ``--config`` reproduces the run.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numeric
divergence during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import env as envmod
from . import experiments, explain, features, oracle, predictor
from .errors import ChanformError, DivergenceError
from .io import dump_json, write_grid, write_grid_csv, write_rows_csv

log = logging.getLogger("chanform")
ENV_PREFIX = "CHANFORM_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# option parsing helpers


def _floats(n=None):
    def parse(text):
        vals = tuple(float(v) for v in str(text).split(","))
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers")
        return vals

    parse.__name__ = f"floats{n or ''}"
    return parse


def _ints(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _names(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _flag(text):
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


class _Options:
    """Registers options with suppressed argparse defaults so the layers can be told apart."""

    def __init__(self, parser):
        self.parser = parser
        self.defaults = {}
        self.types = {}

    def add(self, *flags, default=None, type=str, **kw):
        dest = kw.pop("dest", None) or flags[0].lstrip("-").replace("-", "_")
        self.defaults[dest] = default
        self.types[dest] = type
        if type is _flag:
            self.parser.add_argument(*flags, dest=dest, nargs="?", const=True, type=_flag,
                                     default=argparse.SUPPRESS, **kw)
        else:
            self.parser.add_argument(*flags, dest=dest, type=type, default=argparse.SUPPRESS, **kw)


def _common(opts: _Options):
    opts.add("--config", default=None, help="JSON config file (lowest-priority layer above defaults)")
    opts.add("--out", default="chanform-out", help="output directory")
    opts.add("--seed", default=0, type=int, help="global seed")
    opts.add("--format", default="json", choices=("json", "csv"), help="read-out format")
    opts.add("--parallel", default=os.cpu_count() or 1, type=int, help="worker processes")
    opts.add("--verbose", "-v", default=False, type=_flag, help="log progress")


COMMANDS = {}


def command(path, help_text):
    def wrap(fn):
        COMMANDS[path] = (fn, help_text)
        return fn

    return wrap


def _build_parser():
    root = _Parser(prog="chanform", description="Environment-aware channel modeling toolkit.")
    sub = root.add_subparsers(dest="_cmd", metavar="COMMAND")
    registry = {}
    groups = {}
    for path, (fn, help_text) in COMMANDS.items():
        words = path.split()
        if len(words) == 1:
            p = sub.add_parser(words[0], help=help_text)
        else:
            if words[0] not in groups:
                gp = sub.add_parser(words[0], help=f"{words[0]} subcommands")
                groups[words[0]] = gp.add_subparsers(dest="_sub", metavar="SUBCOMMAND")
            p = groups[words[0]].add_parser(words[1], help=help_text)
        p.set_defaults(_path=path)
        opts = _Options(p)
        _common(opts)
        fn.options(opts)
        registry[path] = opts
    return root, registry


def _load_config_file(path, cmd):
    with open(path) as fh:
        data = json.load(fh)
    if "command" in data and "config" in data:  # a resolved snapshot
        return dict(data["config"])
    out = {k: v for k, v in data.items() if not isinstance(v, dict) or k in ("experiment",)}
    for key in (cmd, cmd.replace(" ", "_")):
        if isinstance(data.get(key), dict):
            out.update(data[key])
    return out


def resolve(path, opts: _Options, ns) -> dict:
    """Merge defaults, config file, environment and flags into one plain dict."""
    flags = {k: v for k, v in vars(ns).items() if not k.startswith("_")}
    cfg = dict(opts.defaults)
    cfg_file = flags.get("config") or os.environ.get(ENV_PREFIX + "CONFIG")
    if cfg_file:
        for k, v in _load_config_file(cfg_file, path).items():
            if k in opts.types:
                t = opts.types[k]
                cfg[k] = t(",".join(map(str, v))) if isinstance(v, list) and t is not str else v
            elif k == "experiment":
                cfg[k] = v
    for k, t in opts.types.items():
        raw = os.environ.get(ENV_PREFIX + k.upper())
        if raw is not None:
            try:
                cfg[k] = t(raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"bad value in {ENV_PREFIX + k.upper()}: {exc}") from exc
    cfg.update(flags)
    cfg["config"] = cfg_file
    return cfg


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _outdir(cfg, path):
    d = Path(cfg["out"])
    d.mkdir(parents=True, exist_ok=True)
    snap = {k: _plain(v) for k, v in cfg.items()
            if k not in ("config", "out", "parallel", "verbose") and not k.startswith("_") and v is not None}
    dump_json(d / "resolved_config.json", {"command": path, "config": snap})
    return d


def _emit(cfg, payload, rows=None):
    """Print a JSON object or CSV rows to stdout."""
    if cfg["format"] == "csv" and rows is not None:
        buf = io.StringIO()
        cols = []
        for r in rows:
            cols += [k for k in r if k not in cols]
        w = csv.DictWriter(buf, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
        sys.stdout.write(buf.getvalue())
    else:
        sys.stdout.write(json.dumps(payload, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o).__name__)


# --------------------------------------------------------------------------
# scenario / environments


def _opts_scenario_gen(o):
    o.add("--size", default=(500.0, 500.0), type=_floats(2), help="W,H meters")
    o.add("--n-buildings", default=10, type=int)
    o.add("--n-roads", default=4, type=int)
    o.add("--n-vegetation", default=3, type=int)
    o.add("--n-tx", default=1, type=int)
    o.add("--frequency", default=5.9e9, type=float)
    o.add("--rotation", default=(0.0, 0.0), type=_floats(2), help="building rotation range, degrees")
    o.add("--name", default="scenario")


@command("scenario gen", "generate a procedural scenario file")
def cmd_scenario_gen(cfg):
    sc_cfg = envmod.ScenarioConfig(size=tuple(cfg["size"]), n_buildings=cfg["n_buildings"], n_roads=cfg["n_roads"],
                                   n_vegetation=cfg["n_vegetation"], n_tx=cfg["n_tx"], frequency=cfg["frequency"],
                                   rotation_deg=tuple(cfg["rotation"]))
    sc = envmod.generate_scenario(cfg["seed"], sc_cfg)
    sc = envmod.Scenario(sc.bounds, sc.buildings, sc.roads, sc.vegetation, sc.materials, sc.tx_sites, sc.seed,
                         cfg["name"])
    d = _outdir(cfg, "scenario gen")
    path = d / f"{cfg['name']}.json"
    sc.save(path)
    _emit(cfg, {"scenario": str(path), "buildings": len(sc.buildings), "roads": len(sc.roads),
                "vegetation": len(sc.vegetation), "tx_sites": len(sc.tx_sites)})


cmd_scenario_gen.options = _opts_scenario_gen


def _need(cfg, key):
    if not cfg.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    return cfg[key]


def _opts_raster(o):
    o.add("--scenario", default=None, help="scenario JSON file")
    o.add("--resolution", default=1.0, type=float)
    o.add("--texture-amplitude", default=0.0, type=float, help="texture std at 2 m cells (0: none)")
    o.add("--name", default="raster")


@command("raster", "rasterize a scenario to a semantic/height grid")
def cmd_raster(cfg):
    sc = envmod.Scenario.load(_need(cfg, "scenario"))
    r = envmod.rasterize(sc, cfg["resolution"])
    if cfg["texture_amplitude"] > 0:
        r = envmod.add_texture_noise(r, cfg["seed"], envmod.power_law_amplitude(cfg["texture_amplitude"], 2.0))
    d = _outdir(cfg, "raster")
    fmt = "csv" if cfg["format"] == "csv" else "bin"
    envmod.save_raster(r, d / cfg["name"], fmt)
    _emit(cfg, {"raster": str(d / cfg["name"]), "shape": list(r.shape), "resolution": r.resolution,
                "building_fraction": float(r.building.mean())})


cmd_raster.options = _opts_raster


def _opts_voxelize(o):
    o.add("--scenario", default=None)
    o.add("--voxel-size", default=1.0, type=float)
    o.add("--name", default="voxels")


@command("voxelize", "voxelize a scenario into an occupancy/material grid")
def cmd_voxelize(cfg):
    sc = envmod.Scenario.load(_need(cfg, "scenario"))
    v = envmod.voxelize(sc, cfg["voxel_size"])
    d = _outdir(cfg, "voxelize")
    envmod.save_voxels(v, d / cfg["name"], "csv" if cfg["format"] == "csv" else "bin")
    _emit(cfg, {"voxels": str(d / cfg["name"]), "shape": list(v.shape), "occupied_volume_m3": v.occupied_volume})


cmd_voxelize.options = _opts_voxelize


# --------------------------------------------------------------------------
# oracle


def _opts_oracle_common(o):
    o.add("--scenario", default=None, help="scenario JSON (omit for free space)")
    o.add("--frequency", default=None, type=float)
    o.add("--resolution", default=1.0, type=float, help="raster cell size for large-scale terms")
    o.add("--shadowing-sigma", default=0.0, type=float)
    o.add("--shadowing-corr", default=50.0, type=float)


def _oracle_config(cfg):
    return oracle.OracleConfig(shadowing_sigma_db=cfg["shadowing_sigma"], shadowing_corr_m=cfg["shadowing_corr"],
                               seed=cfg["seed"])


def _opts_oracle_link(o):
    _opts_oracle_common(o)
    o.add("--tx", default=None, type=_floats(3), help="x,y,z")
    o.add("--rx", default=None, type=_floats(3), help="x,y,z")
    o.add("--rays", default=False, type=_flag, help="ray-launch multipath instead of large-scale")
    o.add("--voxel-size", default=1.0, type=float)
    o.add("--n-azimuth", default=360, type=int)
    o.add("--n-elevation", default=90, type=int)
    o.add("--max-reflections", default=3, type=int)


@command("oracle link", "evaluate the reference channel for one link")
def cmd_oracle_link(cfg):
    tx, rx = _need(cfg, "tx"), _need(cfg, "rx")
    freq = cfg["frequency"] or 5.9e9
    if cfg["scenario"]:
        sc = envmod.Scenario.load(cfg["scenario"])
    else:
        pad = 10.0
        sc = envmod.Scenario(bounds=(min(tx[0], rx[0]) - pad, min(tx[1], rx[1]) - pad,
                                     max(tx[0], rx[0]) + pad, max(tx[1], rx[1]) + pad))
    link = oracle.Link(tuple(tx), tuple(rx), freq)
    if cfg["rays"]:
        vox = envmod.voxelize(sc, cfg["voxel_size"])
        rc = oracle.RayConfig(cfg["n_azimuth"], cfg["n_elevation"], max_reflections=cfg["max_reflections"])
        paths = oracle.ray_launch(vox, link, rc)
        if not paths:
            raise oracle.NoPathError("no propagation path found between tx and rx")
        sample = oracle.multipath_sample(paths, freq)
    else:
        sample = oracle.path_loss(envmod.rasterize(sc, cfg["resolution"]), link, _oracle_config(cfg))
    payload = {"tx": list(tx), "rx": list(rx), "frequency": freq, "distance_m": link.distance,
               "fspl_db": float(oracle.fspl_db(link.distance, freq)), **sample.to_dict()}
    if cfg.get("_write"):
        dump_json(_outdir(cfg, "oracle link") / "link.json", payload)
    row = {k: payload[k] for k in ("distance_m", "fspl_db", "path_loss_db", "los", "rms_delay_spread_s",
                                   "effective_path_count")}
    _emit(cfg, payload, [row])


cmd_oracle_link.options = _opts_oracle_link


def _opts_oracle_map(o):
    _opts_oracle_common(o)
    o.add("--tx", default=None, type=_floats(3), help="x,y,z (default: first TX site)")
    o.add("--map-resolution", default=5.0, type=float)
    o.add("--rx-height", default=1.5, type=float)
    o.add("--name", default="radiomap")


def _tx_and_freq(cfg, sc):
    tx = cfg["tx"]
    freq = cfg["frequency"]
    if tx is None:
        if not sc.tx_sites:
            raise UsageError("--tx is required when the scenario has no TX sites")
        tx = sc.tx_sites[0].position
        freq = freq or sc.tx_sites[0].frequency
    return tuple(tx), float(freq or 5.9e9)


def _write_map(cfg, grid, path):
    d = _outdir(cfg, path)
    stem = d / cfg["name"]
    if cfg["format"] == "csv":
        write_grid_csv(f"{stem}.csv", grid.channels())
    else:
        write_grid(stem, grid.channels(), kind="radiomap", **grid.header())
    valid = ~grid.inside_building
    return {"radiomap": str(stem), "shape": list(grid.shape),
            "mean_path_loss_db": float(grid.path_loss[valid].mean()) if valid.any() else None,
            "los_fraction": float(grid.los[valid].mean()) if valid.any() else None}


@command("oracle map", "reference radio map over a scenario")
def cmd_oracle_map(cfg):
    sc = envmod.Scenario.load(_need(cfg, "scenario"))
    tx, freq = _tx_and_freq(cfg, sc)
    raster = envmod.rasterize(sc, cfg["resolution"])
    mc = oracle.MapConfig(cfg["map_resolution"], cfg["rx_height"], _oracle_config(cfg))
    grid = oracle.radio_map(raster, tx, freq, mc, workers=cfg["parallel"])
    _emit(cfg, _write_map(cfg, grid, "oracle map"))


cmd_oracle_map.options = _opts_oracle_map


# --------------------------------------------------------------------------
# datasets and models


def _opts_dataset_build(o):
    o.add("--scenarios", default=(), type=_names, help="comma-separated scenario files")
    o.add("--n-scenarios", default=4, type=int, help="generated scenarios when --scenarios is empty")
    o.add("--scenario-size", default=(500.0, 500.0), type=_floats(2))
    o.add("--links", default=200, type=int, help="links per scenario")
    o.add("--distance", default=(10.0, 400.0), type=_floats(2), help="min,max link distance")
    o.add("--rx-height", default=1.5, type=float)
    o.add("--groups", default=tuple(g for g in features.GROUPS if g not in features.VOXEL_GROUPS), type=_names)
    o.add("--label-source", default="large_scale", choices=("large_scale", "rays", "hybrid"))
    o.add("--voxel-size", default=None, type=float)
    o.add("--resolution", default=1.0, type=float)
    o.add("--shadowing-sigma", default=0.0, type=float)
    o.add("--name", default="dataset")


@command("dataset build", "sample links, label them with the oracle and extract features")
def cmd_dataset_build(cfg):
    if cfg["scenarios"]:
        scs = [envmod.Scenario.load(p) for p in cfg["scenarios"]]
    else:
        sc_cfg = envmod.ScenarioConfig(size=tuple(cfg["scenario_size"]))
        scs = [envmod.generate_scenario(cfg["seed"] + i, sc_cfg) for i in range(cfg["n_scenarios"])]
    schema = features.make_schema(cfg["groups"])
    env = features.EnvConfig(label_resolution=cfg["resolution"], voxel_size=cfg["voxel_size"],
                             label_source=cfg["label_source"])
    sampler = features.LinkSampler(cfg["links"], cfg["rx_height"], tuple(cfg["distance"]), cfg["seed"])
    oc = oracle.OracleConfig(shadowing_sigma_db=cfg["shadowing_sigma"], seed=cfg["seed"])
    ds = features.normalize(features.build_dataset(scs, sampler, schema, oc, env))
    d = _outdir(cfg, "dataset build")
    ds.save(d / cfg["name"], "csv" if cfg["format"] == "csv" else "bin")
    _emit(cfg, {"dataset": str(d / cfg["name"]), "rows": len(ds), "features": len(schema),
                "digest": ds.digest(), "los_fraction": float(ds.labels["los"].mean())})


cmd_dataset_build.options = _opts_dataset_build


def _opts_training(o, epochs=60):
    o.add("--dataset", default=None, help="dataset stem")
    o.add("--epochs", default=epochs, type=int)
    o.add("--learning-rate", default=3e-3, type=float)
    o.add("--batch-size", default=128, type=int)
    o.add("--lambda-phys", default=0.1, type=float)
    o.add("--lambda-expl", default=0.05, type=float)
    o.add("--early-stop", default=None, type=float, help="stop once validation RMSE <= this")
    o.add("--val-fraction", default=0.2, type=float)
    o.add("--name", default="model")


def _train_config(cfg, freeze=False):
    return predictor.TrainConfig(learning_rate=cfg["learning_rate"], epochs=cfg["epochs"],
                                 batch_size=cfg["batch_size"], seed=cfg["seed"], lambda_phys=cfg["lambda_phys"],
                                 lambda_expl=cfg["lambda_expl"], freeze_extractor=freeze,
                                 early_stop_rmse=cfg["early_stop"])


def _split_for_training(cfg, ds):
    if cfg["val_fraction"] > 0 and len(ds) >= 4:
        tr, va, _ = features.split(ds, cfg["val_fraction"], cfg["seed"])
        return tr, va
    return ds, None


def _write_training(cfg, path, model, report, tcfg):
    d = _outdir(cfg, path)
    predictor.save_checkpoint(model, d / cfg["name"], tcfg)
    rep = report.to_dict()
    timing = {"wall_clock": rep.pop("wall_clock"), "wall_clock_to_threshold": rep.pop("wall_clock_to_threshold"),
              "per_epoch_elapsed": [h.pop("elapsed") for h in rep["history"]]}
    dump_json(d / "train_report.json", rep)
    dump_json(d / "timing.json", timing)
    last = rep["history"][-1] if rep["history"] else {}
    _emit(cfg, {"model": str(d / cfg["name"]), "epochs_run": report.epochs_run, "final": last,
                "threshold_epoch": report.threshold_epoch}, [dict(last)] if last else [])


def _diverged(cfg, path, exc: DivergenceError):
    d = _outdir(cfg, path)
    if exc.report is not None:
        dump_json(d / "divergence_report.json", exc.report.to_dict())
    raise exc


def _opts_train(o):
    _opts_training(o)
    o.add("--extractor", default=(32, 32), type=_ints, help="extractor widths")
    o.add("--head", default=(16,), type=_ints, help="head hidden widths")
    o.add("--activation", default="tanh", choices=("tanh", "linear"))
    o.add("--residual-scale", default=10.0, type=float)


@command("train", "train a predictor from scratch")
def cmd_train(cfg):
    ds = features.Dataset.load(_need(cfg, "dataset"))
    if ds.stats is None:
        ds = features.normalize(ds)
    tr, va = _split_for_training(cfg, ds)
    tr = features.normalize(tr, ds.stats)
    arch = predictor.ArchConfig(tuple(cfg["extractor"]), tuple(cfg["head"]), cfg["activation"],
                                cfg["residual_scale"])
    m = predictor.init_model(ds.schema, arch, cfg["seed"], ds.stats, float(np.median(ds.frequency)))
    tcfg = _train_config(cfg)
    try:
        model, report = predictor.train(m, tr, tcfg, va)
    except DivergenceError as exc:
        _diverged(cfg, "train", exc)
    _write_training(cfg, "train", model, report, tcfg)


cmd_train.options = _opts_train


def _opts_finetune(o):
    _opts_training(o, epochs=30)
    o.add("--model", default=None, help="pretrained checkpoint stem")


@command("finetune", "adapt a pretrained predictor with the extractor frozen")
def cmd_finetune(cfg):
    pre = predictor.load_checkpoint(_need(cfg, "model"))
    ds = features.Dataset.load(_need(cfg, "dataset"))
    tr, va = _split_for_training(cfg, ds)
    tcfg = _train_config(cfg, freeze=True)
    try:
        model, report = predictor.finetune(pre, tr, tcfg, va)
    except DivergenceError as exc:
        _diverged(cfg, "finetune", exc)
    _write_training(cfg, "finetune", model, report, tcfg)


cmd_finetune.options = _opts_finetune


def _opts_predict(o):
    o.add("--model", default=None)
    o.add("--dataset", default=None)
    o.add("--name", default="predictions")


@command("predict", "predict channel quantities for every link of a dataset")
def cmd_predict(cfg):
    m = predictor.load_checkpoint(_need(cfg, "model"))
    ds = features.Dataset.load(_need(cfg, "dataset"))
    preds = predictor.predict(m, ds)
    met = predictor.evaluate(m, ds)
    rows = [{"row": i, "path_loss_db": float(preds["path_loss"][i]), "los_probability": float(preds["los"][i]),
             "delay_spread_s": float(preds["delay_spread"][i]), "path_count": float(preds["path_count"][i]),
             "label_path_loss_db": float(ds.labels["path_loss"][i])} for i in range(len(ds))]
    d = _outdir(cfg, "predict")
    if cfg["format"] == "csv":
        write_rows_csv(d / f"{cfg['name']}.csv", rows)
    else:
        dump_json(d / f"{cfg['name']}.json", rows)
    dump_json(d / "metrics.json", met)
    _emit(cfg, met, [met])


cmd_predict.options = _opts_predict


def _opts_radiomap(o):
    _opts_oracle_map(o)
    o.add("--model", default=None)
    o.add("--voxel-size", default=None, type=float, help="needed when the model uses voxel features")


@command("radiomap", "predicted radio map from a trained model")
def cmd_radiomap(cfg):
    m = predictor.load_checkpoint(_need(cfg, "model"))
    sc = envmod.Scenario.load(_need(cfg, "scenario"))
    tx, freq = _tx_and_freq(cfg, sc)
    raster = envmod.rasterize(sc, cfg["resolution"])
    vox = envmod.voxelize(sc, cfg["voxel_size"]) if cfg["voxel_size"] else None
    mc = oracle.MapConfig(cfg["map_resolution"], cfg["rx_height"], _oracle_config(cfg))
    grid = predictor.predict_radio_map(m, raster, tx, freq, mc, vox, workers=cfg["parallel"])
    _emit(cfg, _write_map(cfg, grid, "radiomap"))


cmd_radiomap.options = _opts_radiomap


# --------------------------------------------------------------------------
# explanations


def _opts_explain(o):
    o.add("--model", default=None)
    o.add("--dataset", default=None)
    o.add("--limit", default=0, type=int, help="use only the first N rows (0: all)")


def _explain_inputs(cfg):
    m = predictor.load_checkpoint(_need(cfg, "model"))
    ds = features.Dataset.load(_need(cfg, "dataset"))
    if cfg["limit"] > 0:
        ds = ds.take(np.arange(min(cfg["limit"], len(ds))))
    return m, ds


@command("explain saliency", "gradient-times-input attributions per link")
def cmd_explain_saliency(cfg):
    m, ds = _explain_inputs(cfg)
    S = explain.saliency_all(m, ds)
    d = _outdir(cfg, "explain saliency")
    ext = "csv" if cfg["format"] == "csv" else "json"
    explain.export_saliency(m, S, d / f"saliency.{ext}", ext)
    _emit(cfg, {"saliency": str(d / f"saliency.{ext}"), "rows": len(S),
                "nlos_mass_physics_building": explain.saliency_mass(m, ds)})


@command("explain curves", "deletion and insertion curves")
def cmd_explain_curves(cfg):
    m, ds = _explain_inputs(cfg)
    curves = [explain.deletion_curve(m, ds), explain.insertion_curve(m, ds)]
    d = _outdir(cfg, "explain curves")
    ext = "csv" if cfg["format"] == "csv" else "json"
    explain.export_curves(curves, d / f"curves.{ext}", ext)
    _emit(cfg, [c.to_dict() for c in curves], [r for c in curves for r in c.rows()])


@command("explain rank", "features ranked by mean absolute saliency")
def cmd_explain_rank(cfg):
    m, ds = _explain_inputs(cfg)
    ranking = explain.feature_ranking(m, ds)
    d = _outdir(cfg, "explain rank")
    ext = "csv" if cfg["format"] == "csv" else "json"
    explain.export_ranking(ranking, d / f"ranking.{ext}", ext)
    rows = [{"rank": i + 1, "feature": n, "mean_abs_saliency": v} for i, (n, v) in enumerate(ranking)]
    _emit(cfg, rows, rows)


for _fn in (cmd_explain_saliency, cmd_explain_curves, cmd_explain_rank):
    _fn.options = _opts_explain


# --------------------------------------------------------------------------
# experiments and reports


def _opts_experiment(o):
    o.parser.add_argument("experiment_id", choices=sorted(experiments.RUNNERS) + ["all"])
    o.add("--seeds", default=None, type=_ints, help="override the experiment's seeds")


@command("experiment", "run one of the scripted experiments")
def cmd_experiment(cfg):
    ids = sorted(experiments.RUNNERS) if cfg["experiment_id"] == "all" else [cfg["experiment_id"]]
    d = _outdir(cfg, "experiment")
    summary = []
    for eid in ids:
        run, cls = experiments.RUNNERS[eid]
        overrides = dict((cfg.get("experiment") or {}).get(eid, {}))
        ecfg = experiments.configure(cls(), overrides)
        if cfg["seeds"] and "seeds" in ecfg.__dataclass_fields__:
            ecfg = experiments.configure(ecfg, {"seeds": list(cfg["seeds"])})
        log.info("running %s", eid)
        rep = run(ecfg, parallel=cfg["parallel"])
        rep.save(d, "both")
        summary.append({"experiment": eid, "passed": rep.passed, **{f"verdict:{k}": v for k, v in rep.verdicts.items()},
                        "digest": rep.digest()})
    _emit(cfg, summary, summary)


cmd_experiment.options = _opts_experiment


def _opts_report(o):
    o.add("--reports", default=None, help="directory of experiment report JSON files")


@command("report summarize", "re-check saved experiment reports and tabulate verdicts")
def cmd_report_summarize(cfg):
    src = Path(_need(cfg, "reports"))
    files = sorted(p for p in src.glob("*.json")
                   if not p.name.endswith(".timing.json") and p.name != "resolved_config.json")
    rows = []
    for p in files:
        with open(p) as fh:
            head = json.load(fh)
        if not isinstance(head, dict) or head.get("experiment") not in experiments.VERDICTS:
            continue
        rep = experiments.ExperimentReport.load(p)
        again = rep.recompute()
        rows.append({"experiment": rep.experiment, "passed": rep.passed, "verdicts_consistent": again == rep.verdicts,
                     "digest_ok": rep.digest() == head.get("digest"),
                     **{f"verdict:{k}": v for k, v in rep.verdicts.items()}})
    if not rows:
        raise ChanformError(f"no experiment reports found in {src}")
    d = _outdir(cfg, "report summarize")
    (dump_json(d / "summary.json", rows) if cfg["format"] == "json" else write_rows_csv(d / "summary.csv", rows))
    _emit(cfg, rows, rows)


cmd_report_summarize.options = _opts_report


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    root, registry = _build_parser()
    try:
        ns = root.parse_args(argv)
        path = getattr(ns, "_path", None)
        if path is None:
            raise UsageError(root.format_help())
        cfg = resolve(path, registry[path], ns)
        logging.basicConfig(level=logging.INFO if cfg["verbose"] else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if hasattr(ns, "experiment_id"):
            cfg["experiment_id"] = ns.experiment_id
        cfg["_write"] = "out" in vars(ns) or bool(os.environ.get(ENV_PREFIX + "OUT"))
        COMMANDS[path][0](cfg)
        return 0
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    except DivergenceError as exc:
        sys.stderr.write(f"diverged: {exc}\n")
        return 3
    except (ChanformError, ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
