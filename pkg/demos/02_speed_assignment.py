"""Recover the SCFO/FCSO split from camera speed alone.

The generator knows which branch produced each sequence, the learner does
not. Two-means on the average camera speed should agree with it.
"""
import tempfile

import numpy as np

from dymon import io
from dymon.assign import assign_on_disk
from dymon.droom.generate import generate_dataset, get_subset

spec = get_subset("DR-Lvl2").with_overrides(n_sequences=40, T=30, H=16, W=16)
with tempfile.TemporaryDirectory() as tmp:
    generate_dataset(spec, tmp, np.random.default_rng(1), seed=1)
    assign_on_disk(tmp)
    ds = io.Dataset(tmp)
    truth = [ds[i].metadata["generator_branch"] for i in range(len(ds))]
    found = ds.labels()
    speeds = np.array([ds[i].metadata["avg_camera_speed"] for i in range(len(ds))])

agree = np.mean([a == b for a, b in zip(truth, found)])
for label in ("SCFO", "FCSO"):
    s = speeds[[f == label for f in found]]
    print(f"{label}: {len(s):2d} sequences, camera speed {s.min():.3f} .. {s.max():.3f}")
print(f"agreement with the generator's branch: {agree:.1%}")
