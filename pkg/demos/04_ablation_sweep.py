"""Run a miniature (dt_z, dt_v) ablation grid with the sweep harness.

Each cell trains a throwaway model and reports novel-view MSE. With a few
dozen steps per cell the numbers are noise; the harness, not the result, is
what this shows.
"""
import tempfile
from dataclasses import replace

import numpy as np

from dymon import io
from dymon.assign import assign_on_disk
from dymon.droom.generate import generate_dataset, get_subset
from dymon.evalkit import evaluate, sweep
from dymon.trainer import TrainConfig, fit

base = TrainConfig(K=2, D=4, L=1, H=16, W=16, total_steps=20, batch_size=1, refiner_pool=4,
                   exact_aux_grads=False, checkpoint_every=10 ** 9)
spec = get_subset("DR-Lvl1").with_overrides(n_sequences=4, T=10, H=16, W=16, n_objects=[2, 2])

with tempfile.TemporaryDirectory() as tmp:
    generate_dataset(spec, tmp, np.random.default_rng(0), seed=0)
    assign_on_disk(tmp)
    ds = io.Dataset(tmp)

    def train_fn(overrides):
        cfg = replace(base, **overrides)
        return fit(ds, cfg, log_every=10 ** 9)[0]

    def eval_fn(model, overrides):
        return evaluate(model, ds, n_novel_views=1).nv_obs_mse

    results = sweep({"dt_grid": {"dt_z": [3, 5], "dt_v": [5, 8]}}, train_fn, eval_fn)

for res in results:
    print(res.table())
