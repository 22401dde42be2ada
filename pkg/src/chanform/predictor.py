"""Model-aided multi-head channel predictor with hand-derived gradients.

Path loss is a learnable log-distance baseline plus a network residual. A
shared dense extractor ``f(x; theta_f)`` feeds four heads ``z(.; theta_h)``:
path-loss residual, LOS logit, log delay spread (ns) and log effective path
count.

The explanation term of the loss depends on the input gradient of the
path-loss output, so its parameter gradient needs a second-order pass; that
pass is written out explicitly in :func:`_explanation_backward`.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import oracle
from .errors import DivergenceError, SchemaMismatchError, StaleCacheError, ValidationError
from .features import Dataset, FeatureSchema, NormStats, extract_link_features

HEADS = ("path_loss", "los", "delay_spread", "path_count")
EXPLANATION_GROUPS = ("physics", "semantic_building")
DS_UNIT = 1e-9  # delay-spread head works in log-nanoseconds
DS_FLOOR = 1e-10
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    extractor: tuple = (32, 32)
    head: tuple = (16,)
    activation: str = "tanh"  # or "linear"
    residual_scale: float = 10.0  # dB per unit of path-loss head output

    def __post_init__(self):
        if any(w < 1 for w in self.extractor + self.head):
            raise ValidationError("layer widths must be >= 1")
        if self.activation not in ("tanh", "linear"):
            raise ValidationError("activation must be 'tanh' or 'linear'")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 60
    batch_size: int = 128
    seed: int = 0
    lambda_phys: float = 0.1
    lambda_expl: float = 0.05
    freeze_extractor: bool = False
    early_stop_rmse: float | None = None
    head_weights: tuple = (1.0, 0.5, 0.25, 0.25)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be > 0")
        if self.lambda_phys < 0 or self.lambda_expl < 0 or min(self.head_weights) < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class ModelParams:
    """Parameter container. ``extractor`` is theta_f, ``heads`` is theta_h."""

    schema: FeatureSchema
    arch: ArchConfig
    baseline: np.ndarray  # [intercept dB, exponent n]
    extractor: list  # [(W (out, in), b (out,)), ...]
    heads: dict  # head name -> [(W, b), ...]; last layer has one output
    stats: NormStats | None = None
    seed: int = 0

    def blocks(self) -> dict:
        """Ordered ``name -> array`` view of every parameter (arrays are shared, not copied)."""
        out = {"baseline": self.baseline}
        for i, (W, b) in enumerate(self.extractor):
            out[f"f.{i}.W"] = W
            out[f"f.{i}.b"] = b
        for h in HEADS:
            for i, (W, b) in enumerate(self.heads[h]):
                out[f"h.{h}.{i}.W"] = W
                out[f"h.{h}.{i}.b"] = b
        return out

    def extractor_blocks(self) -> dict:
        return {k: v for k, v in self.blocks().items() if k.startswith("f.")}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def digest(self, which: str = "all") -> str:
        h = hashlib.sha256()
        for k, v in self.blocks().items():
            if which == "extractor" and not k.startswith("f."):
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def with_blocks(self, blocks: dict) -> "ModelParams":
        m = self.copy()
        m.baseline = np.array(blocks["baseline"], float)
        m.extractor = [(np.array(blocks[f"f.{i}.W"]), np.array(blocks[f"f.{i}.b"])) for i in range(len(self.extractor))]
        m.heads = {
            h: [(np.array(blocks[f"h.{h}.{i}.W"]), np.array(blocks[f"h.{h}.{i}.b"])) for i in range(len(self.heads[h]))]
            for h in HEADS
        }
        return m

    @property
    def fingerprint(self) -> str:
        return self.schema.fingerprint


def init_model(schema: FeatureSchema, arch: ArchConfig = ArchConfig(), seed: int = 0,
               stats: NormStats | None = None, frequency: float = 5.9e9) -> ModelParams:
    """Seeded init, weights ~ N(0, 1/fan_in); baseline starts at free space (n = 2)."""
    D = len(schema)
    if D < 1:
        raise ValidationError("schema has no features")
    if stats is not None and len(stats.mean) != D:
        raise SchemaMismatchError("normalization stats do not match schema")
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.standard_normal((n_out, n_in)) / math.sqrt(n_in), np.zeros(n_out)

    widths = (D,) + tuple(arch.extractor)
    extractor = [dense(a, b) for a, b in zip(widths[:-1], widths[1:])]
    z = widths[-1]
    heads = {}
    for h in HEADS:
        hw = (z,) + tuple(arch.head) + (1,)
        heads[h] = [dense(a, b) for a, b in zip(hw[:-1], hw[1:])]
    baseline = np.array([20 * math.log10(frequency) - oracle.FSPL_CONST_DB, 2.0])
    return ModelParams(schema, arch, baseline, extractor, heads, stats, seed)


# --------------------------------------------------------------------------
# forward


def _act(arch):
    if arch.activation == "tanh":
        return np.tanh, lambda h: 1.0 - h * h, lambda h: -2.0 * h * (1.0 - h * h)
    return (lambda a: a), (lambda h: np.ones_like(h)), (lambda h: np.zeros_like(h))


@dataclass
class ForwardCache:
    token: str
    X: np.ndarray
    distance: np.ndarray
    frequency: np.ndarray | None
    ext_h: list  # activations [x, h1, ..., hK] of the extractor
    head_h: dict  # head -> hidden activations after the extractor output
    outputs: dict  # raw head outputs (n,)


def _check_inputs(model, X):
    X = np.asarray(X, float)
    if X.ndim != 2 or X.shape[1] != len(model.schema):
        raise SchemaMismatchError(f"expected {len(model.schema)} features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("non-finite input features")
    return X


def baseline_db(model: ModelParams, distance) -> np.ndarray:
    return model.baseline[0] + 10.0 * model.baseline[1] * np.log10(distance)


def forward(model: ModelParams, X, distance, frequency=None):
    """Run every head on normalized features ``X``; return ``(predictions, cache)``."""
    X = _check_inputs(model, X)
    distance = np.asarray(distance, float)
    phi, _, _ = _act(model.arch)
    hs = [X]
    for W, b in model.extractor:
        hs.append(phi(hs[-1] @ W.T + b))
    z = hs[-1]
    head_h, outs = {}, {}
    for name in HEADS:
        layers = model.heads[name]
        h = [z]
        for W, b in layers[:-1]:
            h.append(phi(h[-1] @ W.T + b))
        W, b = layers[-1]
        outs[name] = (h[-1] @ W.T + b)[:, 0]
        head_h[name] = h
    scale = model.arch.residual_scale
    preds = {
        "path_loss": baseline_db(model, distance) + scale * outs["path_loss"],
        "los": 1.0 / (1.0 + np.exp(-outs["los"])),
        "delay_spread": np.exp(outs["delay_spread"]) * DS_UNIT,
        "path_count": np.exp(outs["path_count"]),
    }
    cache = ForwardCache(model.digest(), X, distance, None if frequency is None else np.asarray(frequency, float),
                         hs, head_h, outs)
    return preds, cache


def _chain(model, cache):
    """Hidden layers from input to the path-loss output: extractor then path-loss head."""
    layers = list(model.extractor) + list(model.heads["path_loss"][:-1])
    acts = cache.ext_h + cache.head_h["path_loss"][1:]
    return layers, acts


def input_gradient(model: ModelParams, cache: ForwardCache):
    """d(path-loss prediction)/d(input) per sample, plus the intermediates of the backward sweep."""
    _, dphi, _ = _act(model.arch)
    layers, acts = _chain(model, cache)
    n = len(cache.X)
    w_out = model.heads["path_loss"][-1][0][0] * model.arch.residual_scale
    delta = np.broadcast_to(w_out, (n, len(w_out))).copy()
    deltas = [None] * (len(layers) + 1)
    es = [None] * (len(layers) + 1)
    deltas[len(layers)] = delta
    for k in range(len(layers), 0, -1):
        W, _ = layers[k - 1]
        e = deltas[k] * dphi(acts[k])
        es[k] = e
        deltas[k - 1] = e @ W
    return deltas[0], {"deltas": deltas, "es": es, "layers": layers, "acts": acts}


def saliency_matrix(model: ModelParams, X, distance=None) -> np.ndarray:
    """Gradient-times-input attribution of the path-loss prediction, one row per sample."""
    X = _check_inputs(model, X)
    d = np.ones(len(X)) if distance is None else distance
    _, cache = forward(model, X, d)
    g, _ = input_gradient(model, cache)
    return g * X


# --------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossBreakdown:
    task: float
    physics: float
    explanation: float
    total: float
    heads: dict = field(default_factory=dict)


def _targets(labels):
    return {
        "path_loss": np.asarray(labels["path_loss"], float),
        "los": np.asarray(labels["los"], float),
        "delay_spread": np.log(np.maximum(np.asarray(labels["rms_delay_spread"], float), DS_FLOOR) / DS_UNIT),
        "path_count": np.log(np.maximum(np.asarray(labels["effective_path_count"], float), 1.0)),
    }


def _region_mask(model):
    return np.array([g in EXPLANATION_GROUPS for g in model.schema.groups])


def _explanation_terms(model, cache, los_label):
    """Per-sample ``1 - A/B`` on NLOS rows, where A is saliency mass on the region and B the total."""
    g, inter = input_gradient(model, cache)
    s = g * cache.X
    mask = _region_mask(model)
    a = np.abs(s[:, mask]).sum(axis=1)
    b = np.abs(s).sum(axis=1)
    nlos = np.asarray(los_label) < 0.5
    frac = np.where(b > 0, a / np.where(b > 0, b, 1.0), 0.0)
    e = np.where(nlos, 1.0 - frac, 0.0)
    return e, (g, s, a, b, nlos, mask, inter)


def fspl_for(cache):
    f = cache.frequency if cache.frequency is not None else np.full(len(cache.distance), 5.9e9)
    return oracle.fspl_db(cache.distance, f)


def loss(preds: dict, labels: dict, cache: ForwardCache, config: TrainConfig, model: ModelParams | None = None
         ) -> LossBreakdown:
    """Weighted task loss + lambda_phys * free-space hinge + lambda_expl * saliency concentration."""
    t = _targets(labels)
    o = cache.outputs
    w = config.head_weights
    mse_pl = float(np.mean((preds["path_loss"] - t["path_loss"]) ** 2))
    logit = o["los"]
    bce = float(np.mean(np.logaddexp(0.0, logit) - t["los"] * logit))
    mse_ds = float(np.mean((o["delay_spread"] - t["delay_spread"]) ** 2))
    mse_pc = float(np.mean((o["path_count"] - t["path_count"]) ** 2))
    task = w[0] * mse_pl + w[1] * bce + w[2] * mse_ds + w[3] * mse_pc
    gap = np.maximum(0.0, fspl_for(cache) - preds["path_loss"])
    phys = float(np.mean(gap ** 2))
    expl = 0.0
    if model is not None:
        e, _ = _explanation_terms(model, cache, t["los"])
        expl = float(np.mean(e))
    total = task + config.lambda_phys * phys + config.lambda_expl * expl
    return LossBreakdown(task, phys, expl, total,
                         {"path_loss": mse_pl, "los": bce, "delay_spread": mse_ds, "path_count": mse_pc})


# --------------------------------------------------------------------------
# backward


def _zeros_like_blocks(model):
    return {k: np.zeros_like(v) for k, v in model.blocks().items()}


def _explanation_backward(model, cache, los_label, weight, grads):
    """Accumulate ``weight * d(mean explanation)/d(theta)`` into ``grads``."""
    if weight == 0:
        return
    _, dphi, d2phi = _act(model.arch)
    n = len(cache.X)
    _, (g, s, a, b, nlos, mask, inter) = _explanation_terms(model, cache, los_label)
    active = nlos & (b > 0)
    if not active.any():
        return
    # d e_i / d s_ij = -sign(s_ij) (1[j in R] - A/B) / B
    bb = np.where(active, b, 1.0)
    ds = -np.sign(s) * (mask[None, :].astype(float) - (a / bb)[:, None]) / bb[:, None]
    ds[~active] = 0.0
    gbar = weight * ds * cache.X / n  # adjoint of the input gradient

    layers, acts, deltas, es = inter["layers"], inter["acts"], inter["deltas"], inter["es"]
    K = len(layers)
    names = [f"f.{i}" for i in range(len(model.extractor))] + [
        f"h.path_loss.{i}" for i in range(len(model.heads["path_loss"]) - 1)
    ]
    dbar = gbar
    abar2 = [None] * (K + 1)
    for k in range(1, K + 1):
        W, _ = layers[k - 1]
        grads[names[k - 1] + ".W"] += es[k].T @ dbar
        ebar = dbar @ W.T
        dbar = ebar * dphi(acts[k])
        abar2[k] = ebar * deltas[k] * d2phi(acts[k])
    # delta_K is the (scaled) output weight row, shared by every sample
    grads[f"h.path_loss.{len(model.heads['path_loss']) - 1}.W"][0] += (
        dbar.sum(axis=0) * model.arch.residual_scale
    )
    # the second-order pieces flow back through the forward activations
    hbar = None
    for k in range(K, 0, -1):
        abar = abar2[k] if hbar is None else abar2[k] + hbar * dphi(acts[k])
        W, _ = layers[k - 1]
        grads[names[k - 1] + ".W"] += abar.T @ acts[k - 1]
        grads[names[k - 1] + ".b"] += abar.sum(axis=0)
        hbar = abar @ W


def backward(model: ModelParams, cache: ForwardCache, labels: dict, config: TrainConfig) -> dict:
    """Exact gradient of ``loss(...).total`` for every parameter block."""
    if cache.token != model.digest():
        raise StaleCacheError("cache was produced by a different model state")
    _, dphi, _ = _act(model.arch)
    n = len(cache.X)
    t = _targets(labels)
    o = cache.outputs
    w = config.head_weights
    scale = model.arch.residual_scale
    pl = baseline_db(model, cache.distance) + scale * o["path_loss"]
    gap = np.maximum(0.0, fspl_for(cache) - pl)
    d_pl = w[0] * 2 * (pl - t["path_loss"]) / n - config.lambda_phys * 2 * gap / n
    d_out = {
        "path_loss": d_pl * scale,
        "los": w[1] * (1.0 / (1.0 + np.exp(-o["los"])) - t["los"]) / n,
        "delay_spread": w[2] * 2 * (o["delay_spread"] - t["delay_spread"]) / n,
        "path_count": w[3] * 2 * (o["path_count"] - t["path_count"]) / n,
    }
    grads = _zeros_like_blocks(model)
    grads["baseline"][0] = d_pl.sum()
    grads["baseline"][1] = (d_pl * 10 * np.log10(cache.distance)).sum()

    zbar = np.zeros_like(cache.ext_h[-1])
    for name in HEADS:
        layers = model.heads[name]
        h = cache.head_h[name]
        abar = d_out[name][:, None]
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            grads[f"h.{name}.{i}.W"] += abar.T @ h[i]
            grads[f"h.{name}.{i}.b"] += abar.sum(axis=0)
            hbar = abar @ W
            abar = hbar * dphi(h[i]) if i > 0 else hbar
        zbar += abar
    hbar = zbar
    for i in range(len(model.extractor) - 1, -1, -1):
        abar = hbar * dphi(cache.ext_h[i + 1])
        W, _ = model.extractor[i]
        grads[f"f.{i}.W"] += abar.T @ cache.ext_h[i]
        grads[f"f.{i}.b"] += abar.sum(axis=0)
        hbar = abar @ W

    _explanation_backward(model, cache, t["los"], config.lambda_expl, grads)

    if config.freeze_extractor:
        for k in grads:
            if k.startswith("f."):
                grads[k] = np.zeros_like(grads[k])
    return grads


def loss_value(model, X, distance, frequency, labels, config) -> float:
    preds, cache = forward(model, X, distance, frequency)
    return loss(preds, labels, cache, config, model if config.lambda_expl > 0 else None).total


# --------------------------------------------------------------------------
# training


def model_inputs(model: ModelParams, dataset: Dataset) -> np.ndarray:
    if model.fingerprint != dataset.schema.fingerprint:
        raise SchemaMismatchError("model and dataset schemas differ")
    if model.stats is not None:
        return model.stats.apply(dataset.X)
    return dataset.normalized


def _label_dict(ds: Dataset, idx=None):
    if idx is None:
        return ds.labels
    return {k: v[idx] for k, v in ds.labels.items()}


@dataclass
class TrainReport:
    epochs_run: int = 0
    seed: int = 0
    history: list = field(default_factory=list)  # one dict per epoch
    threshold: float | None = None
    threshold_epoch: int | None = None
    wall_clock: float = 0.0
    wall_clock_to_threshold: float | None = None
    final_digest: str = ""
    diverged: bool = False

    def series(self, key: str) -> list:
        return [h[key] for h in self.history]

    def epochs_to(self, threshold: float, key: str = "val_rmse") -> int | None:
        """First epoch (1-based) whose ``key`` is at or below ``threshold``."""
        for h in self.history:
            v = h.get(key)
            if v is not None and v <= threshold:
                return h["epoch"]
        return None

    def to_dict(self) -> dict:
        return asdict(self)


def _head_metrics(model, X, distance, frequency, labels, prefix):
    preds, cache = forward(model, X, distance, frequency)
    t = _targets(labels)
    return {
        f"{prefix}_rmse": float(np.sqrt(np.mean((preds["path_loss"] - t["path_loss"]) ** 2))),
        f"{prefix}_los_acc": float(np.mean((preds["los"] >= 0.5) == (t["los"] >= 0.5))),
        f"{prefix}_ds_rmse_log": float(np.sqrt(np.mean((cache.outputs["delay_spread"] - t["delay_spread"]) ** 2))),
        f"{prefix}_count_rmse_log": float(np.sqrt(np.mean((cache.outputs["path_count"] - t["path_count"]) ** 2))),
    }


# overflow surfaces as a non-finite loss, which raises DivergenceError
@np.errstate(over="ignore", invalid="ignore")
def train(model: ModelParams, dataset: Dataset, config: TrainConfig = TrainConfig(),
          validation: Dataset | None = None):
    """Mini-batch Adam. Returns ``(trained_model, report)``; ``model`` is not modified."""
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    m = model.copy()
    if m.stats is None:
        if dataset.stats is None:
            raise ValidationError("train needs a normalized dataset or a model with stats")
        m.stats = dataset.stats
    X = model_inputs(m, dataset)
    dist, freq = dataset.distance, dataset.frequency
    Xv = model_inputs(m, validation) if validation is not None else None

    blocks = m.blocks()
    frozen = {k for k in blocks if k.startswith("f.")} if config.freeze_extractor else set()
    mom = {k: np.zeros_like(v) for k, v in blocks.items()}
    vel = {k: np.zeros_like(v) for k, v in blocks.items()}
    rng = np.random.default_rng(config.seed)
    report = TrainReport(seed=config.seed, threshold=config.early_stop_rmse)
    n = len(dataset)
    step = 0
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            labels = _label_dict(dataset, idx)
            preds, cache = forward(m, X[idx], dist[idx], freq[idx])
            lb = loss(preds, labels, cache, config, m if config.lambda_expl > 0 else None)
            if not math.isfinite(lb.total):
                report.diverged = True
                report.epochs_run = epoch
                report.wall_clock = time.perf_counter() - t0
                raise DivergenceError(f"non-finite loss at epoch {epoch}", report)
            grads = backward(m, cache, labels, config)
            step += 1
            b1, b2 = config.beta1, config.beta2
            for k, p in blocks.items():
                if k in frozen:
                    continue
                gk = grads[k]
                mom[k] = b1 * mom[k] + (1 - b1) * gk
                vel[k] = b2 * vel[k] + (1 - b2) * gk * gk
                mhat = mom[k] / (1 - b1 ** step)
                vhat = vel[k] / (1 - b2 ** step)
                p -= config.learning_rate * mhat / (np.sqrt(vhat) + config.eps)
        preds, cache = forward(m, X, dist, freq)
        lb = loss(preds, dataset.labels, cache, config, m if config.lambda_expl > 0 else None)
        if not math.isfinite(lb.total):
            report.diverged = True
            report.epochs_run = epoch
            raise DivergenceError(f"non-finite loss at epoch {epoch}", report)
        rec = {"epoch": epoch, "loss_task": lb.task, "loss_physics": lb.physics,
               "loss_explanation": lb.explanation, "loss_total": lb.total,
               "elapsed": time.perf_counter() - t0}
        rec.update(_head_metrics(m, X, dist, freq, dataset.labels, "train"))
        if Xv is not None:
            rec.update(_head_metrics(m, Xv, validation.distance, validation.frequency, validation.labels, "val"))
        report.history.append(rec)
        report.epochs_run = epoch
        key = "val_rmse" if Xv is not None else "train_rmse"
        if config.early_stop_rmse is not None and report.threshold_epoch is None and rec[key] <= config.early_stop_rmse:
            report.threshold_epoch = epoch
            report.wall_clock_to_threshold = rec["elapsed"]
            break
    report.wall_clock = time.perf_counter() - t0
    report.final_digest = m.digest()
    return m, report


def finetune(pretrained: ModelParams, target: Dataset, config: TrainConfig = TrainConfig(freeze_extractor=True),
             validation: Dataset | None = None):
    """Adapt heads and baseline to ``target`` with the extractor frozen."""
    if pretrained.fingerprint != target.schema.fingerprint:
        raise SchemaMismatchError("pretrained model and target dataset schemas differ")
    if len(target) == 0:
        raise ValidationError("fine-tuning needs at least one target sample")
    for v in pretrained.blocks().values():
        if not np.all(np.isfinite(v)):
            raise ValidationError("pretrained parameters are not finite")
    return train(pretrained, target, replace(config, freeze_extractor=True), validation)


def predict(model: ModelParams, dataset: Dataset) -> dict:
    preds, _ = forward(model, model_inputs(model, dataset), dataset.distance, dataset.frequency)
    return preds


def evaluate(model: ModelParams, dataset: Dataset) -> dict:
    """Path-loss RMSE/MAE (overall, LOS, NLOS), LOS accuracy and log-domain RMSEs of the small-scale heads."""
    if len(dataset) == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    preds, cache = forward(model, model_inputs(model, dataset), dataset.distance, dataset.frequency)
    return metrics_from_predictions(preds, cache.outputs, dataset.labels)


def metrics_from_predictions(preds, outputs, labels) -> dict:
    t = _targets(labels)
    err = preds["path_loss"] - t["path_loss"]
    los = t["los"] >= 0.5

    def rmse(e):
        return float(np.sqrt(np.mean(e ** 2))) if e.size else float("nan")

    return {
        "n": int(len(err)),
        "rmse": rmse(err),
        "mae": float(np.mean(np.abs(err))),
        "rmse_los": rmse(err[los]),
        "rmse_nlos": rmse(err[~los]),
        "los_accuracy": float(np.mean((preds["los"] >= 0.5) == los)),
        "delay_spread_rmse_log": rmse(np.log(np.maximum(preds["delay_spread"], DS_FLOOR) / DS_UNIT)
                                      - t["delay_spread"]),
        "path_count_rmse_log": rmse(np.log(np.maximum(preds["path_count"], 1e-300)) - t["path_count"]),
    }


def _feature_row(raster, voxels, tx, frequency, map_config, schema, xs, y):
    rows, dists, inside = [], [], []
    for x in xs:
        inside.append(raster.building[raster.cell_of(x, y)] >= 0.5)
        link = oracle.Link(tuple(map(float, tx)), oracle.map_rx(tx, x, y, map_config.rx_height), frequency)
        rows.append(extract_link_features(raster, voxels, link, schema, map_config.oracle).values)
        dists.append(link.distance)
    return rows, dists, inside


def predict_radio_map(model: ModelParams, raster, tx, frequency: float,
                      map_config: oracle.MapConfig = oracle.MapConfig(), voxels=None, workers: int = 1
                      ) -> oracle.RadioMapGrid:
    """Predicted path loss at every map cell; cells inside buildings are flagged."""
    if not raster.contains(tx[0], tx[1]):
        raise oracle.OutOfBoundsError("tx outside raster bounds")
    if model.stats is None:
        raise ValidationError("model has no normalization stats; train it first")
    xs, ys = oracle.map_links(raster, tx, frequency, map_config)
    out = oracle.map_rows(_feature_row, ys, (raster, voxels, tx, frequency, map_config, model.schema, xs), workers)
    X = model.stats.apply(np.array([r for o in out for r in o[0]]))
    dist = np.array([d for o in out for d in o[1]])
    inside = np.array([o[2] for o in out], bool)
    preds, _ = forward(model, X, dist, np.full(len(dist), frequency))
    shape = (len(ys), len(xs))
    return oracle.RadioMapGrid((raster.bounds[0], raster.bounds[1]), map_config.resolution,
                               preds["path_loss"].reshape(shape), (preds["los"] >= 0.5).reshape(shape), inside,
                               tuple(map(float, tx)), float(frequency), map_config.rx_height)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ModelParams, stem, train_config: TrainConfig | None = None) -> None:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    blocks = model.blocks()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "schema": model.schema.to_dict(),
        "schema_fingerprint": model.fingerprint,
        "seed": model.seed,
        "train_config": None if train_config is None else asdict(train_config),
        "stats": None if model.stats is None else model.stats.to_dict(),
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
        "dtype": "<f8",
        "digest": model.digest(),
    }
    with open(stem.with_suffix(".bin"), "wb") as fh:
        for v in blocks.values():
            fh.write(np.ascontiguousarray(v, "<f8").tobytes())
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)


def load_checkpoint(stem) -> ModelParams:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    with open(stem.with_suffix(".json")) as fh:
        header = json.load(fh)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError("unsupported checkpoint version")
    arch_d = header["arch"]
    arch = ArchConfig(tuple(arch_d["extractor"]), tuple(arch_d["head"]), arch_d["activation"],
                      float(arch_d["residual_scale"]))
    schema = FeatureSchema.from_dict(header["schema"])
    if schema.fingerprint != header["schema_fingerprint"]:
        raise SchemaMismatchError("checkpoint schema fingerprint mismatch")
    raw = np.fromfile(stem.with_suffix(".bin"), "<f8")
    blocks, off = {}, 0
    for b in header["blocks"]:
        size = int(np.prod(b["shape"]))
        blocks[b["name"]] = raw[off:off + size].reshape(b["shape"]).copy()
        off += size
    if off != raw.size:
        raise ValidationError("checkpoint binary size mismatch")
    stats = None if header["stats"] is None else NormStats.from_dict(header["stats"])
    model = init_model(schema, arch, header["seed"], stats).with_blocks(blocks)
    if model.digest() != header["digest"]:
        raise ValidationError("checkpoint digest mismatch")
    return model
