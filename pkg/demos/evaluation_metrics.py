"""
Evaluation metrics
==================

FID, R-precision, MM-Dist and Diversity act on feature vectors; results over
repeated runs are summarized as a mean and a Student-t 95% half-width.
"""

import numpy as np

from motionrag.metrics import (EvalRun, confidence_interval, diversity, evaluate_runs, fid,
                               frechet_distance, mm_dist, r_precision)
from motionrag.numerics import GaussianStats

rng = np.random.default_rng(0)

# Two unit Gaussians 5 apart: the closed form gives exactly 25.
a = GaussianStats(np.zeros(2), np.eye(2))
b = GaussianStats(np.array([3.0, 4.0]), np.eye(2))
print("exact FID:", frechet_distance(a, b))
x, y = rng.normal(size=(10_000, 2)), rng.normal(size=(10_000, 2)) + [3.0, 4.0]
print("sampled FID: %.3f" % fid(x, y))

# R-precision: a motion that sits on its own text is always ranked first,
# a random one lands in the top 1 about 1 time in 32.
text = rng.normal(size=(320, 4))
print("self R-precision:", r_precision(text, text))
print("random R-precision:", r_precision(text, rng.normal(size=(320, 4))).round(3))

# MM-Dist under a constant shift, and Diversity of a point cloud.
print("MM-Dist of a (3, 4, 0, 0) shift:", mm_dist(text, text + [3.0, 4.0, 0.0, 0.0]))
print("Diversity: %.3f" % diversity(text, num_pairs=100))

# Ten noisy generations of the same set give a confidence interval.
runs = [EvalRun(text + rng.normal(0, 0.5, size=text.shape), text, text, seed=i) for i in range(10)]
print(evaluate_runs(runs).to_text())
print("CI of (0, 2):", confidence_interval([0.0, 2.0]))
