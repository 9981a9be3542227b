"""Z-buffer software renderer with exact instance masks.

The floor and the inner faces of the walls are ray-cast per pixel to seed
the depth buffer. Spheres are then drawn analytically over their screen
bounding boxes and cubes face by face as triangles, each with exact
per-pixel depth from the ray parameter. Mask id 0 is background; object k
(0-based in the scene) gets id k + 1.
"""
from __future__ import annotations

import numpy as np

from dymon.droom.camera import CameraState, look_at_basis
from dymon.droom.scene import WALL_HEIGHT, SceneSpec
from dymon.types import Frame

FOV_DEG = 38.0
LIGHT_DIR = np.array([0.3, 0.5, 1.0]) / np.linalg.norm([0.3, 0.5, 1.0])
AMBIENT = 0.45
DIFFUSE = 0.55

# cube faces as (normal, 4 corner signs in winding order)
_CUBE_FACES = []
for axis in range(3):
    for sgn in (-1.0, 1.0):
        others = [a for a in range(3) if a != axis]
        corners = []
        for s0, s1 in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            c = np.zeros(3)
            c[axis] = sgn
            c[others[0]] = s0
            c[others[1]] = s1
            corners.append(c)
        n = np.zeros(3)
        n[axis] = sgn
        _CUBE_FACES.append((n, np.array(corners)))


class PinholeCamera:
    """Rays through pixel centers of an H x W image, looking at the origin."""

    def __init__(self, position, H: int, W: int, fov_deg: float = FOV_DEG):
        self.origin = np.asarray(position, dtype=np.float64)
        self.H, self.W = H, W
        self.forward, self.right, self.up = look_at_basis(self.origin)
        self.tan = np.tan(np.radians(fov_deg) / 2.0)

    def ray_directions(self) -> np.ndarray:
        """H x W x 3 unit directions."""
        cols = (np.arange(self.W) + 0.5) / self.W * 2.0 - 1.0
        rows = 1.0 - (np.arange(self.H) + 0.5) / self.H * 2.0
        nx, ny = np.meshgrid(cols * self.tan, rows * self.tan)
        d = (self.forward[None, None] + nx[..., None] * self.right[None, None]
             + ny[..., None] * self.up[None, None])
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def ray_direction(self, row: int, col: int) -> np.ndarray:
        nx = ((col + 0.5) / self.W * 2.0 - 1.0) * self.tan
        ny = (1.0 - (row + 0.5) / self.H * 2.0) * self.tan
        d = self.forward + nx * self.right + ny * self.up
        return d / np.linalg.norm(d)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (col, row) pixel coordinates and camera depth of points."""
        rel = np.atleast_2d(points) - self.origin
        zc = rel @ self.forward
        nx = (rel @ self.right) / (zc * self.tan)
        ny = (rel @ self.up) / (zc * self.tan)
        col = (nx + 1.0) / 2.0 * self.W - 0.5
        row = (1.0 - ny) / 2.0 * self.H - 0.5
        return np.stack([col, row], axis=-1), zc


def _lambert(normals: np.ndarray) -> np.ndarray:
    return AMBIENT + DIFFUSE * np.clip(normals @ LIGHT_DIR, 0.0, None)


def background_hits(origin: np.ndarray, dirs: np.ndarray, room_half: float):
    """Ray parameter, surface kind (0 floor, 1 wall, -1 none) and normal for the room shell."""
    shape = dirs.shape[:-1]
    depth = np.full(shape, np.inf)
    kind = np.full(shape, -1, dtype=np.int64)
    normal = np.zeros(shape + (3,))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dirs[..., 2]
        p = origin + t[..., None] * dirs
        ok = (dirs[..., 2] < 0) & (t > 0) & (np.abs(p[..., 0]) <= room_half) & (np.abs(p[..., 1]) <= room_half)
        depth = np.where(ok, t, depth)
        kind[ok] = 0
        normal[ok] = (0.0, 0.0, 1.0)
        for axis in (0, 1):
            other = 1 - axis
            for sgn in (-1.0, 1.0):
                # only the inner face: the ray must travel towards the wall from inside
                t = (sgn * room_half - origin[axis]) / dirs[..., axis]
                p = origin + t[..., None] * dirs
                facing = sgn * dirs[..., axis] > 0
                ok = (facing & (t > 0) & (np.abs(p[..., other]) <= room_half)
                      & (p[..., 2] >= 0) & (p[..., 2] <= WALL_HEIGHT) & (t < depth))
                depth = np.where(ok, t, depth)
                kind[ok] = 1
                n = np.zeros(3)
                n[axis] = -sgn
                normal[ok] = n
    return depth, kind, normal


def _draw_sphere(cam, dirs, depth, ids, normal, obj, obj_id):
    c, r = obj.position, obj.size
    corners = c + r * np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    pix, zc = cam.project(corners)
    if np.any(zc <= 0):
        r0, r1, c0, c1 = 0, cam.H - 1, 0, cam.W - 1
    else:
        c0 = max(int(np.floor(pix[:, 0].min())), 0)
        c1 = min(int(np.ceil(pix[:, 0].max())), cam.W - 1)
        r0 = max(int(np.floor(pix[:, 1].min())), 0)
        r1 = min(int(np.ceil(pix[:, 1].max())), cam.H - 1)
    if c0 > c1 or r0 > r1:
        return
    d = dirs[r0:r1 + 1, c0:c1 + 1]
    oc = cam.origin - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    hit = disc >= 0
    t = -b - np.sqrt(np.where(hit, disc, 0.0))
    win = hit & (t > 0) & (t < depth[r0:r1 + 1, c0:c1 + 1])
    if not win.any():
        return
    rr, cc = np.nonzero(win)
    rr, cc = rr + r0, cc + c0
    tt = t[win]
    depth[rr, cc] = tt
    ids[rr, cc] = obj_id
    p = cam.origin + tt[:, None] * dirs[rr, cc]
    normal[rr, cc] = (p - c) / r


def _draw_triangle(cam, dirs, depth, ids, normal, verts, n, obj_id):
    pix, zc = cam.project(verts)
    if np.any(zc <= 0):
        return
    c0 = max(int(np.floor(pix[:, 0].min())), 0)
    c1 = min(int(np.ceil(pix[:, 0].max())), cam.W - 1)
    r0 = max(int(np.floor(pix[:, 1].min())), 0)
    r1 = min(int(np.ceil(pix[:, 1].max())), cam.H - 1)
    if c0 > c1 or r0 > r1:
        return
    cc, rr = np.meshgrid(np.arange(c0, c1 + 1, dtype=np.float64), np.arange(r0, r1 + 1, dtype=np.float64))
    (x0, y0), (x1, y1), (x2, y2) = pix
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    if area == 0:
        return
    e0 = ((x1 - x0) * (rr - y0) - (y1 - y0) * (cc - x0)) / area
    e1 = ((x2 - x1) * (rr - y1) - (y2 - y1) * (cc - x1)) / area
    e2 = ((x0 - x2) * (rr - y2) - (y0 - y2) * (cc - x2)) / area
    inside = (e0 >= 0) & (e1 >= 0) & (e2 >= 0)
    if not inside.any():
        return
    d = dirs[r0:r1 + 1, c0:c1 + 1]
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((verts[0] - cam.origin) @ n) / denom
    win = inside & (denom < 0) & (t > 0) & (t < depth[r0:r1 + 1, c0:c1 + 1])
    if not win.any():
        return
    ri, ci = np.nonzero(win)
    ri, ci = ri + r0, ci + c0
    depth[ri, ci] = t[win]
    ids[ri, ci] = obj_id
    normal[ri, ci] = n


def _draw_cube(cam, dirs, depth, ids, normal, obj, obj_id):
    for n, signs in _CUBE_FACES:
        if (obj.position + obj.size * n - cam.origin) @ n >= 0:
            continue  # back face
        corners = obj.position + obj.size * signs
        _draw_triangle(cam, dirs, depth, ids, normal, corners[[0, 1, 2]], n, obj_id)
        _draw_triangle(cam, dirs, depth, ids, normal, corners[[0, 2, 3]], n, obj_id)


def render_view(scene: SceneSpec, position, H: int, W: int, fov_deg: float = FOV_DEG):
    """Render ``scene`` from ``position`` (looking at the floor center).

    Returns (image H x W x 3 in [0, 1], mask ids H x W, depth H x W).
    """
    cam = PinholeCamera(position, H, W, fov_deg)
    dirs = cam.ray_directions()
    depth, kind, normal = background_hits(cam.origin, dirs, scene.room_half)
    ids = np.zeros((H, W), dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        if obj.shape == "sphere":
            _draw_sphere(cam, dirs, depth, ids, normal, obj, k + 1)
        else:
            _draw_cube(cam, dirs, depth, ids, normal, obj, k + 1)
    palette = np.array([scene.ground_color] + [o.color for o in scene.objects], dtype=np.float64)
    base = palette[ids]
    base[(ids == 0) & (kind == 1)] = scene.wall_color
    shade = _lambert(normal)
    image = base * shade[..., None]
    image[(ids == 0) & (kind == -1)] = scene.backdrop_color
    return np.clip(image, 0.0, 1.0), ids, depth


def render_frame(scene: SceneSpec, cam: CameraState, H: int = 64, W: int = 64,
                 time_index: int = 1, fov_deg: float = FOV_DEG) -> Frame:
    position = cam.position()
    image, ids, _ = render_view(scene, position, H, W, fov_deg)
    return Frame(image, position, time_index, ids)
