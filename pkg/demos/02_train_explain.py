"""
Learning the residual over a distance baseline
==============================================

Generate a few suburban scenes, label random links with the oracle,
train the multi-head predictor and ask which features it relies on.
"""
import warnings

import numpy as np

from chanform import env, explain, features, oracle, predictor

scenes = [env.generate_scenario(s, env.ScenarioConfig(size=(300.0, 300.0), n_buildings=12)) for s in range(4)]
groups = ("geometric", "semantic_building", "semantic_road", "semantic_vegetation", "physics")
data = features.build_dataset(scenes, features.LinkSampler(300, 1.5, (10.0, 250.0), 0),
                              features.make_schema(groups), oracle.OracleConfig(shadowing_sigma_db=3.0))
print("%d links, %d features, LOS fraction %.2f" % (len(data), len(data.schema), data.labels["los"].mean()))

# hold out one whole scene
train, test, _ = features.split(data, 0.25, 0, by_scenario=True)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # constant columns (frequency, heights) are expected
    train = features.normalize(train)
test = features.normalize(test, train.stats)

model = predictor.init_model(train.schema, predictor.ArchConfig((32, 32), (16,)), 0, train.stats)
print("before training: held-out RMSE %.2f dB (free-space baseline only)" % predictor.evaluate(model, test)["rmse"])
model, report = predictor.train(model, train, predictor.TrainConfig(epochs=40, lambda_expl=0.0))
m = predictor.evaluate(model, test)
print("after %d epochs: RMSE %.2f dB (LOS %.2f, NLOS %.2f), LOS accuracy %.3f"
      % (report.epochs_run, m["rmse"], m["rmse_los"], m["rmse_nlos"], m["los_accuracy"]))
print("learned baseline: %.1f dB + %.2f x 10 log10(d)" % tuple(model.baseline))

print("\ntop features by mean |gradient x input|:")
for name, v in explain.feature_ranking(model, test)[:6]:
    print("  %-22s %.2f" % (name, v))

# occluding the most salient features first should hurt quickly
dele = explain.deletion_curve(model, test)
ins = explain.insertion_curve(model, test)
print("\nfraction  deletion  insertion")
for p in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
    print("%8.1f %9.2f %10.2f" % (p, dele.at(p), ins.at(p)))
print("share of NLOS saliency on physics+building features: %.2f" % explain.saliency_mass(model, test))

x = predictor.model_inputs(model, test)[0]
print("comprehensiveness of the top-3 features on one link: %.2f dB"
      % explain.comprehensiveness(model, x, 3, float(test.distance[0])))
