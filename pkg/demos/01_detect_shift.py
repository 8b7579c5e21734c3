#!/usr/bin/env python3
"""Watching a conformal martingale react to a drifting sequence.

Run with ``python3 demos/01_detect_shift.py``. Takes a few seconds.
"""
import numpy as np

from drm import conformal as cf
from drm import data as dg

# %% iid data: the martingale wanders around 1 and rarely gets anywhere near 1/alpha
rng = np.random.default_rng(0)
iid = cf.DetectionSequence(rng.normal(size=(1000, 3)))
trace = cf.detect(iid, alpha=0.01, rng=1)
print(f"iid gaussians: max S_t = {trace.values.max():.2f}, triggered: {trace.triggered}")

# %% a mean shift halfway through is caught quickly
shifted = np.vstack([rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) + 1.5])
trace = cf.detect(cf.DetectionSequence(shifted), alpha=0.01, rng=1)
print(f"mean shift at t=500: triggered at t={trace.triggered_at + 1}")

# %% the toy 2D training sequence: the spurious sign of x2 flips more and more often.
# Within each class the inputs drift, so the label-conditional detector fires.
toy = dg.gen_toy2d(2000, dg.TOY2D_TRAIN, seed=0)
for mode in cf.MODES:
    labels = toy.labels if mode == cf.CONCEPT else None
    trace = cf.detect(cf.DetectionSequence(toy.inputs, labels), 0.01, mode, rng=np.random.default_rng([0, 13]))
    where = f"t={trace.triggered_at + 1}" if trace.triggered else "never"
    print(f"toy2d raw inputs, {mode:9s} mode: triggered {where}")

# %% the trace itself, every 200 steps
trace = cf.detect(cf.DetectionSequence(toy.inputs, toy.labels), 0.01, cf.CONCEPT,
                  rng=np.random.default_rng([0, 13]))
for t in range(0, 2000, 200):
    bar = "#" * int(max(0.0, np.log10(trace.values[t]) * 10))
    print(f"t={t + 1:5d}  S_t={trace.values[t]:10.3g}  {bar}")

# %% the same detector as a stream, one point at a time
online = cf.OnlineDetector(alpha=0.01, mode=cf.CONCEPT, rng=np.random.default_rng([0, 13]))
for x, y in zip(toy.inputs, toy.labels):
    online.update(x, y)
    if online.triggered_at is not None:
        break
print(f"online detector stopped after {online.t} points")
