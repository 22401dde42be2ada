"""
Adapting to a new neighbourhood
===============================

Pre-train on generic scenes, then move to a denser, taller target area
with only a couple of hundred measured links. Compare fine-tuning the
heads (extractor frozen) against training from scratch, and draw the
resulting radio map.
"""
import warnings

import numpy as np

from chanform import env, features, oracle, predictor

groups = ("geometric", "semantic_building", "semantic_road", "semantic_vegetation", "physics")
schema = features.make_schema(groups)
sampler = features.LinkSampler(300, 1.5, (10.0, 250.0), 0)

source = features.build_dataset([env.generate_scenario(s, env.ScenarioConfig(size=(300.0, 300.0)))
                                 for s in range(6)], sampler, schema)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    source = features.normalize(source)

target_scene = env.generate_scenario(900, env.ScenarioConfig(size=(300.0, 300.0), n_buildings=14,
                                                             building_height=(15.0, 50.0)))
target = features.build_dataset([target_scene], features.LinkSampler(600, 1.5, (10.0, 250.0), 1), schema)
few, held, _ = features.split(target, 2 / 3, 0)
few, held = features.normalize(few, source.stats), features.normalize(held, source.stats)
print("source %d links, target %d for adaptation, %d held out" % (len(source), len(few), len(held)))

arch = predictor.ArchConfig((32, 32), (16,))
pre, _ = predictor.train(predictor.init_model(schema, arch, 0, source.stats), source,
                         predictor.TrainConfig(epochs=40, lambda_expl=0.0))
print("pre-trained model on the target, unadapted: %.2f dB" % predictor.evaluate(pre, held)["rmse"])

cfg = predictor.TrainConfig(epochs=40, batch_size=32, lambda_expl=0.0)
tuned, rep_ft = predictor.finetune(pre, few, cfg, held)
scratch, rep_sc = predictor.train(predictor.init_model(schema, arch, 0, source.stats), few, cfg, held)
assert tuned.digest("extractor") == pre.digest("extractor")

print("\nepoch  fine-tune  scratch   (held-out RMSE, dB)")
for e in (1, 2, 5, 10, 20, 40):
    print("%5d %10.2f %8.2f" % (e, rep_ft.history[e - 1]["val_rmse"], rep_sc.history[e - 1]["val_rmse"]))

# radio map over the target area from the adapted model
raster = env.rasterize(target_scene, 1.0)
tx = target_scene.tx_sites[0].position
grid = predictor.predict_radio_map(tuned, raster, tx, 5.9e9, oracle.MapConfig(resolution=20.0))
truth = oracle.radio_map(raster, tx, 5.9e9, oracle.MapConfig(resolution=20.0))
ok = ~grid.inside_building
print("\nradio map %s cells, RMSE vs oracle %.2f dB" %
      (grid.shape, np.sqrt(np.mean((grid.path_loss[ok] - truth.path_loss[ok]) ** 2))))

# coarse text rendering: darker means more loss, # marks buildings
shades = " .:-=+*%@"
lo, hi = np.percentile(grid.path_loss[ok], [2, 98])
for i in range(grid.shape[0] - 1, -1, -1):
    row = ""
    for j in range(grid.shape[1]):
        if grid.inside_building[i, j]:
            row += "#"
        else:
            k = int(np.clip((grid.path_loss[i, j] - lo) / (hi - lo), 0, 0.999) * len(shades))
            row += shades[k]
    print("  " + row)
