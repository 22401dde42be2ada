"""Feature attributions and perturbation diagnostics for the path-loss head.

Attribution is gradient times input on the model's (normalized) feature
vector. Occlusion replaces a feature with its dataset mean, which is the
value 0 when inputs are z-scored with the dataset's own statistics.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import predictor
from .errors import SchemaMismatchError, ValidationError
from .features import Dataset
from .io import dump_json, write_rows_csv

N_FRACTIONS = 21


@dataclass(frozen=True)
class SaliencyVector:
    values: np.ndarray
    sample: int = 0
    method: str = "gradient_x_input"

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("non-finite saliency")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class PerturbationCurve:
    fractions: np.ndarray
    rmse: np.ndarray
    mode: str  # "deletion" or "insertion"

    def __post_init__(self):
        if self.mode not in ("deletion", "insertion"):
            raise ValidationError(f"unknown curve mode {self.mode!r}")
        if len(self.fractions) != len(self.rmse) or np.any(np.diff(self.fractions) <= 0):
            raise ValidationError("fractions must be strictly increasing and match rmse")

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.rmse, self.fractions))

    def at(self, p: float) -> float:
        i = int(np.argmin(np.abs(self.fractions - p)))
        return float(self.rmse[i])

    def rise(self, p: float = 0.2) -> float:
        """RMSE increase from the unperturbed point to fraction ``p``."""
        return self.at(p) - float(self.rmse[0])

    def rows(self) -> list:
        return [{"mode": self.mode, "fraction": float(f), "rmse": float(r)} for f, r in zip(self.fractions, self.rmse)]

    def to_dict(self) -> dict:
        return {"mode": self.mode, "fractions": self.fractions.tolist(), "rmse": self.rmse.tolist(), "auc": self.auc}


def _inputs(model, data):
    """Accept a Dataset or a tuple ``(X_model_space, distance, frequency, path_loss_labels)``."""
    if isinstance(data, Dataset):
        X = predictor.model_inputs(model, data)
        return X, data.distance, data.frequency, data.labels["path_loss"]
    X, d, f, y = data
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[1] != len(model.schema):
        raise SchemaMismatchError("sample does not match model schema")
    return X, np.asarray(d, float), np.asarray(f, float), None if y is None else np.asarray(y, float)


def saliency(model, x, distance: float = 1.0, sample: int = 0) -> SaliencyVector:
    """Gradient-times-input attribution of one model-space feature vector."""
    x = np.asarray(x, float)
    if x.ndim != 1 or len(x) != len(model.schema):
        raise SchemaMismatchError("sample does not match model schema")
    s = predictor.saliency_matrix(model, x[None, :], np.array([distance]))[0]
    return SaliencyVector(s, sample)


def saliency_all(model, data) -> np.ndarray:
    X, d, _, _ = _inputs(model, data)
    return predictor.saliency_matrix(model, X, d)


def _order(S):
    # stable sort keeps schema order among equal magnitudes
    return np.argsort(-np.abs(S), axis=1, kind="stable")


def _pl(model, X, d, f):
    preds, _ = predictor.forward(model, X, d, f)
    return preds["path_loss"]


def _baseline_row(X, baseline):
    if baseline is None or (isinstance(baseline, str) and baseline == "mean"):
        return X.mean(axis=0)
    b = np.asarray(baseline, float)
    return np.broadcast_to(b, (X.shape[1],)) if b.ndim == 0 else b


def _curve(model, data, mode, baseline, fractions):
    X, d, f, y = _inputs(model, data)
    if len(X) == 0:
        raise ValidationError("perturbation curves need a nonempty dataset")
    if y is None:
        raise ValidationError("perturbation curves need path-loss labels")
    base = _baseline_row(X, baseline)
    order = _order(predictor.saliency_matrix(model, X, d))
    fractions = np.linspace(0.0, 1.0, N_FRACTIONS) if fractions is None else np.asarray(fractions, float)
    D = X.shape[1]
    rank = np.empty_like(order)
    rows = np.arange(len(X))[:, None]
    rank[rows, order] = np.arange(D)[None, :]
    out = []
    for p in fractions:
        k = int(np.rint(p * D))
        top = rank < k
        if mode == "deletion":
            Xp = np.where(top, base[None, :], X)
        else:
            Xp = np.where(top, X, base[None, :])
        err = _pl(model, Xp, d, f) - y
        out.append(float(np.sqrt(np.mean(err ** 2))))
    return PerturbationCurve(fractions, np.array(out), mode)


def deletion_curve(model, data, baseline="mean", fractions=None) -> PerturbationCurve:
    """Occlude the top-|saliency| fraction of features per sample and record path-loss RMSE."""
    return _curve(model, data, "deletion", baseline, fractions)


def insertion_curve(model, data, baseline="mean", fractions=None) -> PerturbationCurve:
    """Start from the all-baseline input and restore the top-|saliency| features."""
    return _curve(model, data, "insertion", baseline, fractions)


def comprehensiveness(model, x, k: int, distance: float = 1.0, frequency: float = 5.9e9, baseline=None) -> float:
    """|prediction(x) - prediction(x with its top-k attributed features replaced by baseline)|."""
    x = np.asarray(x, float)
    D = len(model.schema)
    if not 1 <= k <= D:
        raise ValidationError("k must be in [1, feature count]")
    base = np.zeros(D) if baseline is None else np.broadcast_to(np.asarray(baseline, float), (D,))
    s = saliency(model, x, distance).values
    top = _order(s[None, :])[0, :k]
    xo = x.copy()
    xo[top] = base[top]
    d, f = np.array([distance, distance]), np.array([frequency, frequency])
    p = _pl(model, np.stack([x, xo]), d, f)
    return float(abs(p[0] - p[1]))


def feature_ranking(model, data) -> list:
    """``[(feature, mean |saliency|), ...]`` descending, ties in schema order."""
    S = saliency_all(model, data)
    if len(S) == 0:
        raise ValidationError("ranking needs a nonempty dataset")
    m = np.abs(S).mean(axis=0)
    idx = np.argsort(-m, kind="stable")
    return [(model.schema.names[i], float(m[i])) for i in idx]


def saliency_mass(model, data, groups=predictor.EXPLANATION_GROUPS, nlos_only: bool = True) -> float:
    """Mean share of |saliency| on ``groups``, optionally over NLOS samples only."""
    X, d, _, _ = _inputs(model, data)
    S = np.abs(predictor.saliency_matrix(model, X, d))
    if nlos_only and isinstance(data, Dataset):
        S = S[data.labels["los"] < 0.5]
    if len(S) == 0:
        return float("nan")
    mask = np.array([g in groups for g in model.schema.groups])
    tot = S.sum(axis=1)
    share = np.where(tot > 0, S[:, mask].sum(axis=1) / np.where(tot > 0, tot, 1.0), 0.0)
    return float(share.mean())


# export ----------------------------------------------------------------------


def export_curves(curves, path, fmt: str = "json") -> None:
    if fmt == "json":
        dump_json(path, [c.to_dict() for c in curves])
    elif fmt == "csv":
        write_rows_csv(path, [r for c in curves for r in c.rows()], ["mode", "fraction", "rmse"])
    else:
        raise ValidationError(f"unknown format {fmt!r}")


def export_ranking(ranking, path, fmt: str = "json") -> None:
    rows = [{"rank": i + 1, "feature": n, "mean_abs_saliency": v} for i, (n, v) in enumerate(ranking)]
    if fmt == "json":
        dump_json(path, rows)
    elif fmt == "csv":
        write_rows_csv(path, rows, ["rank", "feature", "mean_abs_saliency"])
    else:
        raise ValidationError(f"unknown format {fmt!r}")


def export_saliency(model, S, path, fmt: str = "json") -> None:
    names = list(model.schema.names)
    rows = [{"sample": i, **{n: float(v) for n, v in zip(names, s)}} for i, s in enumerate(np.atleast_2d(S))]
    if fmt == "json":
        dump_json(path, {"method": "gradient_x_input", "features": names, "rows": rows})
    elif fmt == "csv":
        write_rows_csv(path, rows, ["sample"] + names)
    else:
        raise ValidationError(f"unknown format {fmt!r}")
