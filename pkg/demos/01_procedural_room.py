"""Generate a handful of procedural room sequences and look at them.

Writes a small DR-Lvl3 dataset to a temp directory, prints the camera speed
and object displacement of each sequence, and saves a contact sheet of
first/last frames next to their instance masks.

    python3 demos/01_procedural_room.py [out.png]
"""
import sys
import tempfile

import numpy as np
from PIL import Image

from dymon import io
from dymon.assign import avg_camera_speed
from dymon.droom.generate import generate_dataset, get_subset



def mask_vis(ids):
    # spread instance ids over the grey range so they are visible
    grey = (ids * (255 // max(1, int(ids.max())))).astype(np.uint8)
    return np.repeat(grey[..., None], 3, axis=-1)


out_png = sys.argv[1] if len(sys.argv) > 1 else "room_sheet.png"
spec = get_subset("DR-Lvl3").with_overrides(n_sequences=6, T=20, H=48, W=48)

with tempfile.TemporaryDirectory() as tmp:
    root = generate_dataset(spec, tmp, np.random.default_rng(0), seed=0)
    ds = io.Dataset(root)
    rows = []
    for i in range(len(ds)):
        seq = ds[i]
        state = ds.state(i)
        pos = np.asarray(state["positions"])
        moved = float(np.linalg.norm(pos[-1] - pos[0], axis=-1).mean())
        print(f"{ds.names[i]}  branch={seq.metadata['generator_branch']}  "
              f"camera speed={avg_camera_speed(seq):.3f}  mean object travel={moved:.2f}")
        first, last = seq.frames[0], seq.frames[-1]
        tiles = [io.quantize(first.image), mask_vis(first.gt_masks),
                 io.quantize(last.image), mask_vis(last.gt_masks)]
        rows.append(np.concatenate(tiles, axis=1))
    sheet = np.concatenate(rows, axis=0).astype(np.uint8)
    Image.fromarray(sheet).resize((sheet.shape[1] * 2, sheet.shape[0] * 2), Image.NEAREST).save(out_png)
    print("contact sheet ->", out_png)
