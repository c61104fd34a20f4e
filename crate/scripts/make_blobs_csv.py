"""Write the 100-sample synthetic CSV fixture used by the CLI tests.

Four classes in eight features: each class lives on its own pair of
coordinates with positive coefficients, plus small Gaussian noise.

Usage: python make_blobs_csv.py > crates/dictnet/tests/data/blobs.csv
"""
import sys

import numpy as np

rng = np.random.RandomState(7)
features = 8
print(",".join([f"f{i}" for i in range(features)] + ["label"]))
for i in range(100):
    label = i % 4
    x = rng.normal(0.0, 0.05, features)
    x[2 * label : 2 * label + 2] += 0.5 + np.abs(rng.normal(0.0, 1.0, 2))
    sys.stdout.write(",".join(f"{v:.6f}" for v in x) + f",{label}\n")
