import warnings

import numpy as np
import pytest

from chanform import env as envmod
from chanform import features, oracle, predictor
from chanform.env import Building, Scenario, TxSite


def box(x0, y0, x1, y1):
    return ((x0, y0), (x1, y0), (x1, y1), (x0, y1))


def scenario_with(buildings=(), size=(200.0, 200.0), tx=((1.0, 1.0, 10.0),), **kw):
    """Hand-built scenario; ``buildings`` is a list of (footprint, height[, material])."""
    bs = tuple(Building(fp, h, m[0] if m else "concrete") for fp, h, *m in buildings)
    return Scenario(bounds=(0.0, 0.0) + tuple(size), buildings=bs,
                    tx_sites=tuple(TxSite(t, 5.9e9) for t in tx), **kw)


@pytest.fixture(scope="session")
def small_suite():
    cfg = envmod.ScenarioConfig(size=(200.0, 200.0), n_buildings=8, n_roads=2, n_vegetation=2)
    return [envmod.generate_scenario(s, cfg) for s in range(3)]


@pytest.fixture(scope="session")
def small_dataset(small_suite):
    schema = features.make_schema(("geometric", "semantic_building", "semantic_road", "semantic_vegetation",
                                   "physics"))
    sampler = features.LinkSampler(80, 1.5, (10.0, 150.0), 0)
    ds = features.build_dataset(small_suite, sampler, schema)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return features.normalize(ds)


@pytest.fixture(scope="session")
def trained(small_dataset):
    tr, te, _ = features.split(small_dataset, 0.25, 0)
    m = predictor.init_model(tr.schema, predictor.ArchConfig((16,), (8,)), 0, tr.stats, 5.9e9)
    m, rep = predictor.train(m, tr, predictor.TrainConfig(epochs=30, lambda_expl=0.0))
    return m, rep, tr, te


def toy_schema(n=4, group="physics"):
    return features.FeatureSchema(tuple(f"x{i}" for i in range(n)), (group,) * n)


def linear_model(weights, residual_scale=1.0, baseline=(0.0, 0.0), group="physics"):
    """A model whose path-loss output is ``baseline + sum_i w_i x_i`` exactly."""
    w = np.asarray(weights, float)
    schema = toy_schema(len(w), group) if isinstance(group, str) else features.FeatureSchema(
        tuple(f"x{i}" for i in range(len(w))), tuple(group))
    arch = predictor.ArchConfig((len(w),), (1,), "linear", residual_scale)
    m = predictor.init_model(schema, arch, 0)
    m.baseline = np.array(baseline, float)
    m.extractor = [(np.eye(len(w)), np.zeros(len(w)))]
    for h in predictor.HEADS:
        m.heads[h] = [(np.zeros((1, len(w))), np.zeros(1)), (np.zeros((1, 1)), np.zeros(1))]
    m.heads["path_loss"] = [(w[None, :].copy(), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))]
    return m


CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, name, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
