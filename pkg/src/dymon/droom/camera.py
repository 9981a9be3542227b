"""Observer on a fixed-radius dome, moving by small azimuth/elevation increments."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

ELEVATION_BAND = (10.0, 80.0)
INCREMENT_GRID = np.linspace(0.0, 1.0, 11)   # {0, 0.1, ..., 1}
AZIMUTH_STEP = 5.0     # degrees at grid value 1
ELEVATION_STEP = 1.0
DOME_RADIUS = 9.0


@dataclass(frozen=True)
class CameraState:
    azimuth: float
    elevation: float
    radius: float = DOME_RADIUS
    azimuth_sign: int = 1
    elevation_sign: int = 1

    def position(self) -> np.ndarray:
        return dome_position(self.azimuth, self.elevation, self.radius)


def dome_position(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    a, e = np.radians(azimuth), np.radians(elevation)
    return radius * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])


def random_camera(rng: np.random.Generator, radius: float = DOME_RADIUS,
                  elevation_range: tuple = (15.0, 45.0)) -> CameraState:
    return CameraState(azimuth=float(rng.uniform(0.0, 360.0)),
                       elevation=float(rng.uniform(*elevation_range)),
                       radius=radius,
                       azimuth_sign=int(rng.choice([-1, 1])),
                       elevation_sign=int(rng.choice([-1, 1])))


def step_camera(cam: CameraState, probs, rng: np.random.Generator) -> CameraState:
    """One random-walk move on the dome.

    ``probs`` is the categorical distribution over the 11-point increment
    grid, shared by azimuth (scaled by 5 deg) and elevation (1 deg). Each
    axis keeps its direction; elevation bounces off the band edges.
    """
    probs = np.asarray(probs, dtype=np.float64)
    d_azi = AZIMUTH_STEP * float(rng.choice(INCREMENT_GRID, p=probs))
    d_ele = ELEVATION_STEP * float(rng.choice(INCREMENT_GRID, p=probs))
    azimuth = (cam.azimuth + cam.azimuth_sign * d_azi) % 360.0
    sign = cam.elevation_sign
    elevation = cam.elevation + sign * d_ele
    lo, hi = ELEVATION_BAND
    if not lo <= elevation <= hi:
        sign = -sign
        elevation = cam.elevation + sign * d_ele
    return replace(cam, azimuth=azimuth, elevation=elevation, elevation_sign=sign)


def look_at_basis(position: np.ndarray, target=(0.0, 0.0, 0.0)):
    """(forward, right, up) unit vectors for a camera at ``position``."""
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:   # looking straight down
        right = np.array([0.0, 1.0, 0.0]) if forward[2] < 0 else np.array([0.0, -1.0, 0.0])
    else:
        right /= norm
    up = np.cross(right, forward)
    return forward, right, up
