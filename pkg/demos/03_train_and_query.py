"""Train a tiny model for a few minutes, then query and replay it.

The model is far too small and short-trained to segment well; the point is
to show the moving parts end to end:

* recursive inference over a random subset of frames,
* rendering an inferred scene from a viewpoint that was never observed,
* replaying the scene's evolution from one fixed camera, with all slots but
  one frozen so only that slot's motion remains.
"""
import sys
import tempfile

import numpy as np
import torch
from PIL import Image

from dymon import io, sequence_inference
from dymon.assign import assign_on_disk
from dymon.droom.generate import generate_dataset, get_subset
from dymon.evalkit import evaluate, query_spacetime, replay
from dymon.trainer import TrainConfig, fit

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 150
spec = get_subset("DR-Lvl3").with_overrides(n_sequences=8, T=12, H=24, W=24, n_objects=[2, 2])
cfg = TrainConfig(K=3, D=8, L=2, H=24, W=24, total_steps=steps, batch_size=1, refiner_pool=4,
                  exact_aux_grads=False, delta_t=4, delta_tau=3, checkpoint_every=10 ** 9)

with tempfile.TemporaryDirectory() as tmp:
    generate_dataset(spec, tmp, np.random.default_rng(0), seed=0)
    assign_on_disk(tmp)
    ds = io.Dataset(tmp)
    model, history = fit(ds, cfg, log_every=50)
    print(evaluate(model, ds, n_novel_views=1).summary())

    seq = ds[0]
    with torch.no_grad():
        traj = sequence_inference(seq, range(1, seq.T + 1), model, L=cfg.L,
                                  generator=torch.Generator().manual_seed(0))

# a viewpoint on the far side of the dome
v_new = -seq.frames[0].viewpoint
image, weights = query_spacetime(traj, seq.T // 2, v_new, model)
print("query: image", image.shape, "slot weights", weights.shape,
      "dominant slot shares", np.bincount(weights.argmax(0).ravel(), minlength=cfg.K) / weights[0].size)

frames = replay(traj, list(range(1, seq.T + 1)), seq.frames[0].viewpoint, model, frozen_slots=[0, 1])
strip = np.concatenate([io.quantize(np.clip(img, 0, 1)) for img, _ in frames], axis=1)
Image.fromarray(strip).save("replay_strip.png")
print("replay of slot 2 alone ->", "replay_strip.png")
