"""Subset specifications and dataset generation."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from dymon import io
from dymon.droom.camera import INCREMENT_GRID, CameraState, random_camera, step_camera
from dymon.droom.render import FOV_DEG, render_frame, render_view
from dymon.droom.scene import ROOM_HALF, ForceField, SceneObject, SceneSpec, random_scene, step_dynamics
from dymon.types import Sequence

log = logging.getLogger(__name__)

SUBSET_ALIASES = {
    "dr0-fz": "DR0-fz", "dr0-fv": "DR0-fv",
    "dr-lvl1": "DR-Lvl1", "dr-lvl2": "DR-Lvl2", "dr-lvl3": "DR-Lvl3",
}


@dataclass(frozen=True)
class BranchSampler:
    force: tuple
    camera: tuple

    def __post_init__(self):
        for name in ("force", "camera"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != INCREMENT_GRID.shape or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} probabilities must be 11 non-negative values summing to 1")


@dataclass(frozen=True)
class SubsetSpec:
    name: str
    branches: dict                      # label -> BranchSampler
    n_sequences: int = 200
    T: int = 40
    H: int = 64
    W: int = 64
    n_objects: tuple = (2, 5)
    force_scale: float = 0.45
    dome_radius: float = 9.0
    dt: float = 0.1

    def branch_for(self, index: int) -> str:
        """Branches are interleaved so any prefix of a dataset stays balanced."""
        labels = sorted(self.branches)
        return labels[index % len(labels)]

    def with_overrides(self, **kw) -> "SubsetSpec":
        kw = {k: v for k, v in kw.items() if v is not None}
        if "n_objects" in kw:
            kw["n_objects"] = tuple(kw["n_objects"])
        return replace(self, **kw)


def load_subset_specs(path: Optional[os.PathLike] = None) -> dict:
    """Read subset samplers from a YAML file (the bundled table by default)."""
    if path is None:
        text = resources.files("dymon.droom").joinpath("subsets.yaml").read_text()
    else:
        text = Path(path).read_text()
    data = yaml.safe_load(text)
    defaults = data.get("defaults", {})
    specs = {}
    for name, body in data["subsets"].items():
        params = dict(defaults)
        params.update({k: v for k, v in body.items() if k != "branches"})
        branches = {label: BranchSampler(tuple(b["force"]), tuple(b["camera"]))
                    for label, b in body["branches"].items()}
        params["n_objects"] = tuple(params.get("n_objects", (2, 5)))
        specs[name] = SubsetSpec(name=name, branches=branches, **params)
    return specs


def get_subset(name: str, path: Optional[os.PathLike] = None) -> SubsetSpec:
    specs = load_subset_specs(path)
    key = SUBSET_ALIASES.get(name.lower(), name)
    if key not in specs:
        raise KeyError(f"unknown subset {name!r}; known: {sorted(specs)}")
    return specs[key]


def generate_sequence(spec: SubsetSpec, branch: str, rng: np.random.Generator,
                      render: bool = True) -> tuple[Optional[Sequence], dict, dict]:
    """Simulate one sequence; returns (sequence or None, state arrays, metadata)."""
    sampler = spec.branches[branch]
    lo, hi = spec.n_objects
    n_obj = int(rng.integers(lo, hi + 1))
    force_value = float(rng.choice(INCREMENT_GRID, p=np.asarray(sampler.force)))
    scene = random_scene(rng, n_obj, force_value * spec.force_scale)
    cam = random_camera(rng, spec.dome_radius)
    positions, velocities, cams, frames = [], [], [], []
    for t in range(1, spec.T + 1):
        if t > 1:
            scene = step_dynamics(scene, spec.dt)
            cam = step_camera(cam, sampler.camera, rng)
        positions.append(scene.positions())
        velocities.append(scene.velocities())
        cams.append((cam.azimuth, cam.elevation))
        if render:
            frames.append(render_frame(scene, cam, spec.H, spec.W, time_index=t))
    state = {
        "positions": np.array(positions),
        "velocities": np.array(velocities),
        "camera": np.array(cams),
        "viewpoints": np.array([CameraState(a, e, spec.dome_radius).position() for a, e in cams]),
    }
    obj_speed = float(np.linalg.norm(np.diff(state["positions"], axis=0), axis=-1).mean()) if spec.T > 1 else 0.0
    cam_speed = float(np.linalg.norm(np.diff(state["viewpoints"], axis=0), axis=-1).mean()) if spec.T > 1 else 0.0
    meta = {
        "subset": spec.name,
        "generator_branch": branch,
        "force_value": force_value,
        "force_magnitude": scene.force_field.magnitude,
        "force_center": scene.force_field.center.tolist(),
        "force_range": scene.force_field.range,
        "objects": [{"shape": o.shape, "color": list(o.color), "size": o.size} for o in scene.objects],
        "dome_radius": spec.dome_radius,
        "fov_deg": FOV_DEG,
        "room_half": ROOM_HALF,
        "dt": spec.dt,
        "true_object_speed": obj_speed,
        "true_camera_speed": cam_speed,
    }
    seq = Sequence(frames, cluster_label=None, metadata=meta) if render else None
    return seq, state, meta


def scene_at(meta: dict, state: dict, t: int) -> SceneSpec:
    """Rebuild the true scene at time t (1-based) from stored provenance."""
    objs = tuple(
        SceneObject(o["shape"], tuple(o["color"]), float(o["size"]),
                    np.asarray(state["positions"][t - 1][k], dtype=np.float64),
                    np.asarray(state["velocities"][t - 1][k], dtype=np.float64))
        for k, o in enumerate(meta["objects"]))
    ff = ForceField(np.asarray(meta["force_center"]), float(meta["force_range"]), float(meta["force_magnitude"]))
    return SceneSpec(objs, ff, room_half=float(meta.get("room_half", ROOM_HALF)))


def render_novel_view(meta: dict, state: dict, t: int, viewpoint, H: int, W: int):
    """Ground-truth image and masks of the true scene at t seen from ``viewpoint``."""
    image, ids, _ = render_view(scene_at(meta, state, t), np.asarray(viewpoint, dtype=np.float64),
                                H, W, float(meta.get("fov_deg", FOV_DEG)))
    return image, ids


def generate_dataset(spec: SubsetSpec, out_root: os.PathLike, rng: np.random.Generator,
                     split: str = "train", seed: Optional[int] = None) -> Path:
    """Write ``spec.n_sequences`` sequences plus a manifest under ``out_root``."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(spec.n_sequences):
        branch = spec.branch_for(i)
        seq, state, meta = generate_sequence(spec, branch, rng)
        meta["sequence_index"] = i
        name = f"seq_{i:05d}"
        try:
            io.save_sequence(seq, out_root / name, state=state)
        except OSError as exc:
            raise OSError(f"failed writing sequence {i} to {out_root / name}: {exc}") from exc
        names.append(name)
    io.write_manifest(out_root, spec.name, split, names, seed=seed, T=spec.T, H=spec.H, W=spec.W,
                      dome_radius=spec.dome_radius)
    log.info("wrote %d sequences of %s to %s", len(names), spec.name, out_root)
    return out_root
