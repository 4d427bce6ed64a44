"""Walk one pair of synthetic frames through every stage using the library directly.

Run with ``python demos/two_frames.py``. Takes about half a minute.
"""

import numpy as np

from lidarsem import FilterConfig, MotionField, TrainConfig, classify, dynamicity, estimate_flow, predict, project, train
from lidarsem.bayes_filter import Belief, step
from lidarsem.pipeline import movable_pixels
from lidarsem.pixel_scorer import TrainingSample
from lidarsem.projection import back_project
from lidarsem.scan_io import CLASS_NAMES
from lidarsem.synth import benchmark_scene, odometry, synth_scene

# A few frames from a differently seeded scene train the objectness scorer.
train_scene = benchmark_scene(seed=1, n_azimuth=435)
samples = []
for t in range(20, 26):
    cloud, gt, _ = synth_scene(train_scene, t)
    img, imap = project(cloud)
    samples.append(TrainingSample.from_image(img, movable_pixels(img, imap, gt)))
model = train(samples, TrainConfig(epochs=10))
print(f"scorer loss {model.losses[0]:.0f} -> {model.losses[-1]:.0f}")

scene = benchmark_scene(seed=0, n_azimuth=435)
(c0, gt0, p0), (c1, _, p1) = synth_scene(scene, 0), synth_scene(scene, 1)

# Objectness: one score per pixel, copied back to every point that fell in it.
img, imap = project(c0)
xi = back_project(imap, predict(model, img).xi, fill=0.2)

# Motion: a rigid transform per point, compared against the sensor's own motion.
odom = odometry(p0, p1)
flow = estimate_flow(c0, c1, init=MotionField.constant(len(c0), odom))
delta = dynamicity(flow.R, flow.t, odom)
print(f"{len(c0)} points, {np.mean(delta > 0.5):.1%} look dynamic")

cfg = FilterConfig()
bel = step(Belief.prior(len(c0), cfg), delta, xi, cfg)
labels = classify(bel.probs)

print("class          truth  predicted        IoU")
for k, name in enumerate(CLASS_NAMES):
    truth = gt0.labels == k
    pred = labels == k
    agree = np.sum(truth & pred) / max(np.sum(truth | pred), 1)
    print(f"{name:<13} {truth.sum():6d} {pred.sum():10d} {agree:10.3f}")
