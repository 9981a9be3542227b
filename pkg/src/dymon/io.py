"""On-disk dataset container.

Layout of one sequence directory::

    frame_0001.png ...      8-bit RGB, lossless
    mask_0001.png ...       8-bit instance ids (optional)
    viewpoints.f32          T x 3 little-endian float32, row-major
    metadata.yaml           cluster label, T, H, W, generator provenance
    state.npz               generator scene state (optional, for re-rendering)

A dataset root holds sequence directories and ``manifest.yaml``.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import yaml
from PIL import Image

from dymon.types import Frame, Sequence

MANIFEST = "manifest.yaml"
METADATA = "metadata.yaml"
VIEWPOINTS = "viewpoints.f32"
STATE = "state.npz"


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float64) / 255.0


def _plain(obj):
    """Convert numpy scalars/arrays into YAML-friendly builtins."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_yaml(path: Path, data: dict) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(data), fh, sort_keys=False)


def read_yaml(path: Path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def save_sequence(seq: Sequence, directory: os.PathLike,
                  state: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for f in seq.frames:
        Image.fromarray(quantize(f.image), mode="RGB").save(d / f"frame_{f.time_index:04d}.png")
        if f.gt_masks is not None:
            if f.gt_masks.max() > 255:
                raise ValueError("mask ids above 255 do not fit 8-bit storage")
            Image.fromarray(f.gt_masks.astype(np.uint8), mode="L").save(
                d / f"mask_{f.time_index:04d}.png")
    seq.viewpoints().astype("<f4").tofile(d / VIEWPOINTS)
    H, W = seq.hw
    meta = dict(seq.metadata)
    meta.update(cluster_label=seq.cluster_label, T=seq.T, H=H, W=W)
    write_yaml(d / METADATA, meta)
    if state is not None:
        np.savez_compressed(d / STATE, **state)
    return d


def load_sequence(directory: os.PathLike) -> Sequence:
    d = Path(directory)
    meta = read_yaml(d / METADATA)
    T = int(meta["T"])
    views = np.fromfile(d / VIEWPOINTS, dtype="<f4").reshape(T, 3)
    frames = []
    for t in range(1, T + 1):
        img = np.asarray(Image.open(d / f"frame_{t:04d}.png").convert("RGB"))
        mask_path = d / f"mask_{t:04d}.png"
        masks = np.asarray(Image.open(mask_path)) if mask_path.exists() else None
        frames.append(Frame(dequantize(img), views[t - 1].astype(np.float64), t, masks))
    label = meta.pop("cluster_label", None)
    for key in ("T", "H", "W"):
        meta.pop(key, None)
    return Sequence(frames, cluster_label=label, metadata=meta)


def load_state(directory: os.PathLike) -> Optional[dict]:
    path = Path(directory) / STATE
    if not path.exists():
        return None
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def write_label(directory: os.PathLike, label: str, extra: Optional[dict] = None) -> None:
    """Rewrite only the cluster label (and optional keys) of a stored sequence."""
    path = Path(directory) / METADATA
    meta = read_yaml(path)
    meta["cluster_label"] = label
    if extra:
        meta.update(extra)
    write_yaml(path, meta)


def write_manifest(root: os.PathLike, subset: str, split: str,
                   sequences: Iterable[str], **extra) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    data = {"subset": subset, "split": split, "sequences": list(sequences)}
    data.update(extra)
    write_yaml(root / MANIFEST, data)
    return root / MANIFEST


def read_manifest(root: os.PathLike) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return read_yaml(path)


class Dataset:
    """A dataset root on disk, loaded lazily and cached per sequence."""

    def __init__(self, root: os.PathLike):
        self.root = Path(root)
        self.manifest = read_manifest(self.root)
        self.names: list[str] = list(self.manifest["sequences"])
        self._cache: dict[str, Sequence] = {}

    def __len__(self) -> int:
        return len(self.names)

    def path(self, i: int) -> Path:
        return self.root / self.names[i]

    def __getitem__(self, i: int) -> Sequence:
        name = self.names[i]
        if name not in self._cache:
            self._cache[name] = load_sequence(self.root / name)
        return self._cache[name]

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def state(self, i: int) -> Optional[dict]:
        return load_state(self.path(i))

    def labels(self) -> list[Optional[str]]:
        return [read_yaml(self.path(i) / METADATA).get("cluster_label")
                for i in range(len(self))]

    def invalidate(self) -> None:
        self._cache.clear()
