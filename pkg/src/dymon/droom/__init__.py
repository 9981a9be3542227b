"""Procedural dynamic-room scenes: force-field physics, dome camera, rasterizer."""
from dymon.droom.camera import CameraState, dome_position, random_camera, step_camera
from dymon.droom.generate import (BranchSampler, SubsetSpec, generate_dataset, generate_sequence,
                                  get_subset, load_subset_specs, render_novel_view, scene_at)
from dymon.droom.render import render_frame, render_view
from dymon.droom.scene import ForceField, SceneObject, SceneSpec, random_scene, step_dynamics

__all__ = [
    "BranchSampler", "CameraState", "ForceField", "SceneObject", "SceneSpec", "SubsetSpec",
    "dome_position", "generate_dataset", "generate_sequence", "get_subset", "load_subset_specs",
    "random_camera", "random_scene", "render_frame", "render_novel_view", "render_view",
    "scene_at", "step_camera", "step_dynamics",
]
