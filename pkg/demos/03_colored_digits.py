#!/usr/bin/env python3
"""Colored digits: colour predicts the label in training and anti-predicts it at test time.

Without MNIST files on disk the digits come from a small procedural generator,
so the numbers are not comparable with published MNIST results. Point
``DRM_MNIST_DIR`` at a directory holding the IDX files to use the real thing.

Run with ``python3 demos/03_colored_digits.py`` (ERM only, well under a minute)
or add ``--drm`` to also train with the penalty (a few minutes, ~3 GB of RAM).
"""
import os
import sys

import numpy as np

from drm import conformal as cf
from drm import train as tr
from drm.config import ExperimentConfig

cfg = ExperimentConfig.preset("colored-mnist").replace(data_dir=os.environ.get("DRM_MNIST_DIR"))
seed = 0
train_data = cfg.load_data(seed, "train")
test_data = cfg.load_data(seed, "test")
print(f"inputs {train_data.inputs.shape}, synthetic digits: {cfg.uses_synthetic_digits()}")

# %% colour agrees with the label 90% then 60% of the time in training, 10% at test time
for name, d in (("train, first half", train_data.subset(slice(0, 1000))),
                ("train, second half", train_data.subset(slice(1000, 2000))), ("test", test_data)):
    print(f"{name:18s} colour == label on {np.mean(d.spurious == d.labels):.2f}")

# %% the colour switch is visible to the label-conditional detector on raw pixels
flat = train_data.inputs.reshape(len(train_data), -1)
raw = cf.detect(cf.DetectionSequence(flat, train_data.labels), 0.01, cf.CONCEPT,
                rng=np.random.default_rng([seed, 13]))
print(f"raw pixels: triggered={raw.triggered}, max S_t {raw.values.max():.3g}")

# %% ERM, then optionally DRM from the same initialisation
methods = ["erm", "drm"] if "--drm" in sys.argv else ["erm"]
for method in methods:
    model = cfg.build_model(seed)
    report = tr.train(model, train_data, cfg.replace(method=method).train_config(seed), test_data)
    trace = report.final_trace
    print(f"{method.upper()}: train {report.train_accuracy:.3f}  test {report.test_accuracy:.3f}  "
          f"features trigger the detector: {trace.triggered} (max S_t {trace.values.max():.3g})")
    # swap the red and green channels: a colour-reading model changes its mind
    swapped = test_data.inputs[:, [1, 0, 2]]
    moved = np.mean(np.argmax(model.predict_logits(swapped), 1) != np.argmax(model.predict_logits(test_data.inputs), 1))
    print(f"    swapping colours changes {moved:.0%} of test predictions")
