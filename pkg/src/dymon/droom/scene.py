"""Scene state and object dynamics for the procedural dynamic room."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

ROOM_HALF = 3.0      # the floor spans [-ROOM_HALF, ROOM_HALF]^2 at z = 0
WALL_HEIGHT = 1.6
SHAPES = ("sphere", "cube")

PALETTE = {
    "red": (0.68, 0.14, 0.14),
    "blue": (0.16, 0.29, 0.84),
    "green": (0.11, 0.41, 0.08),
    "brown": (0.51, 0.29, 0.10),
    "purple": (0.51, 0.15, 0.75),
    "cyan": (0.16, 0.82, 0.82),
    "yellow": (1.00, 0.93, 0.20),
}
GROUND_COLOR = (0.55, 0.53, 0.50)
WALL_COLOR = (0.78, 0.78, 0.82)
BACKDROP_COLOR = (0.90, 0.92, 0.95)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: tuple
    size: float                 # sphere radius or cube half-side
    position: np.ndarray
    velocity: np.ndarray

    @property
    def bound_radius(self) -> float:
        """Radius of the bounding sphere used for collisions."""
        return self.size if self.shape == "sphere" else self.size * np.sqrt(3.0)


@dataclass(frozen=True)
class ForceField:
    """Radially outward push on the ground plane within ``range`` of ``center``."""

    center: np.ndarray
    range: float
    magnitude: float

    def acceleration(self, position: np.ndarray) -> np.ndarray:
        offset = np.array([position[0] - self.center[0], position[1] - self.center[1], 0.0])
        dist = np.hypot(offset[0], offset[1])
        if self.magnitude == 0.0 or dist >= self.range or dist == 0.0:
            return np.zeros(3)
        return self.magnitude * offset / dist


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    force_field: ForceField
    ground_color: tuple = GROUND_COLOR
    wall_color: tuple = WALL_COLOR
    backdrop_color: tuple = BACKDROP_COLOR
    room_half: float = ROOM_HALF

    def positions(self) -> np.ndarray:
        return np.array([o.position for o in self.objects]).reshape(-1, 3)

    def velocities(self) -> np.ndarray:
        return np.array([o.velocity for o in self.objects]).reshape(-1, 3)

    def with_states(self, positions: np.ndarray, velocities: Optional[np.ndarray] = None) -> "SceneSpec":
        if velocities is None:
            velocities = self.velocities()
        objs = tuple(replace(o, position=np.array(p, dtype=np.float64), velocity=np.array(v, dtype=np.float64))
                     for o, p, v in zip(self.objects, positions, velocities))
        return replace(self, objects=objs)


def _reflect_walls(p: np.ndarray, v: np.ndarray, bound: float, half: float) -> None:
    limit = half - bound
    for axis in (0, 1):
        if p[axis] > limit:
            p[axis] = 2 * limit - p[axis]
            v[axis] = -abs(v[axis])
        elif p[axis] < -limit:
            p[axis] = -2 * limit - p[axis]
            v[axis] = abs(v[axis])


def _collide(pos: np.ndarray, vel: np.ndarray, radii: np.ndarray) -> None:
    """Equal-mass elastic collisions between bounding circles on the floor."""
    n = len(pos)
    for i in range(n):
        for j in range(i + 1, n):
            delta = pos[j, :2] - pos[i, :2]
            dist = np.hypot(*delta)
            overlap = radii[i] + radii[j] - dist
            if overlap <= 0 or dist == 0.0:
                continue
            normal = np.array([delta[0] / dist, delta[1] / dist, 0.0])
            approach = np.dot(vel[j] - vel[i], normal)
            if approach < 0:
                vel[i] += approach * normal
                vel[j] -= approach * normal
            pos[i] -= 0.5 * overlap * normal
            pos[j] += 0.5 * overlap * normal


def step_dynamics(scene: SceneSpec, dt: float = 0.1, collisions: bool = True) -> SceneSpec:
    """Advance every object by one explicit-Euler step of length ``dt``.

    Positions move with the current velocity; velocities then pick up the
    force-field acceleration (unit mass). Walls reflect elastically and,
    if enabled, overlapping objects exchange their normal velocities.
    Objects stay on the floor (their height never changes).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    pos = scene.positions().copy()
    vel = scene.velocities().copy()
    for k, obj in enumerate(scene.objects):
        acc = scene.force_field.acceleration(pos[k])
        pos[k] = pos[k] + vel[k] * dt
        vel[k] = vel[k] + acc * dt
        pos[k, 2] = obj.size
        vel[k, 2] = 0.0
    radii = np.array([o.bound_radius for o in scene.objects])
    if collisions and len(pos) > 1:
        _collide(pos, vel, radii)
    for k in range(len(pos)):
        _reflect_walls(pos[k], vel[k], radii[k], scene.room_half)
    return scene.with_states(pos, vel)


def random_scene(rng: np.random.Generator, n_objects: int, force_magnitude: float,
                 field_range: tuple = (2.0, 2.5), room_half: float = ROOM_HALF,
                 max_tries: int = 2000) -> SceneSpec:
    """Place ``n_objects`` non-overlapping objects around a random force field.

    Objects start at rest inside the field's range so that a non-zero
    magnitude sets all of them moving.
    """
    center = np.array([*rng.uniform(-1.0, 1.0, size=2), 0.0])
    rng_range = float(rng.uniform(*field_range))
    ff = ForceField(center, rng_range, float(force_magnitude))
    colors = list(PALETTE)
    objs = []
    tries = 0
    while len(objs) < n_objects:
        tries += 1
        if tries > max_tries:
            raise RuntimeError("could not place objects without overlap")
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        size = float(rng.uniform(0.45, 0.7) if shape == "sphere" else rng.uniform(0.32, 0.48))
        bound = size if shape == "sphere" else size * np.sqrt(3.0)
        r = 0.85 * rng_range * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        xy = center[:2] + r * np.array([np.cos(ang), np.sin(ang)])
        if np.any(np.abs(xy) > room_half - bound):
            continue
        if any(np.hypot(*(xy - o.position[:2])) < bound + o.bound_radius + 0.05 for o in objs):
            continue
        color_name = colors.pop(int(rng.integers(len(colors))))
        objs.append(SceneObject(shape, PALETTE[color_name], size,
                                np.array([xy[0], xy[1], size]), np.zeros(3)))
    return SceneSpec(tuple(objs), ff, room_half=room_half)
