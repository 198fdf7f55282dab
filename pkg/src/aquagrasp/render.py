"""Oracle perception: ray-cast depth, instance labels and grasp-point tracks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .camera import CameraModel, normalized_grid
from .config import CameraMountConfig
from .raycast import cast_object, pack_primitives
from .shapes import get_shape
from .sim import PoolWorld, RovState

NEAR = 0.01
BACKGROUND = -1

# body-from-camera: optical z = body x, image x = -body y, image y = -body z
BODY_FROM_CAMERA = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass
class Observation:
    depth: np.ndarray
    labels: np.ndarray
    tracks: dict  # object id -> (u, v) of its grasp point, or None when behind the camera
    proprio: dict
    timestamp: float
    object_ids: tuple = ()
    rgb_proxy: Optional[np.ndarray] = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    def mask(self, oid: int) -> np.ndarray:
        return self.labels == oid

    @property
    def masks(self) -> dict:
        return {oid: self.mask(oid) for oid in self.object_ids}

    def visible_ids(self) -> list:
        present = set(np.unique(self.labels).tolist()) - {BACKGROUND}
        return sorted(present)

    def centroid(self, oid: int):
        """Mask centroid ``(u, v)`` or None when the mask is empty."""
        key = ("c", oid)
        if key not in self._cache:
            vs, us = np.nonzero(self.labels == oid)
            self._cache[key] = None if len(us) == 0 else (float(us.mean()), float(vs.mean()))
        return self._cache[key]

    def min_depth(self, oid: int):
        sel = self.labels == oid
        if not sel.any():
            return None
        return float(self.depth[sel].min())


def camera_pose(rov: RovState, mount: CameraMountConfig):
    """Pool-frame camera position and rotation (pool-from-camera)."""
    R_wb = rov.rotation
    return rov.position + R_wb @ np.asarray(mount.offset, dtype=float), R_wb @ BODY_FROM_CAMERA


def _pixel_bbox(cam: CameraModel, c, r):
    """Conservative pixel box containing a camera-frame sphere, or None if empty."""
    if cam.has_distortion or c[2] - r <= NEAR:
        return 0, cam.width, 0, cam.height
    corners = np.array([[c[0] + sx * r, c[1] + sy * r, c[2] + sz * r]
                        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    uv = cam.project(corners)
    u0 = max(int(math.floor(uv[:, 0].min())), 0)
    u1 = min(int(math.ceil(uv[:, 0].max())) + 1, cam.width)
    v0 = max(int(math.floor(uv[:, 1].min())), 0)
    v1 = min(int(math.ceil(uv[:, 1].max())) + 1, cam.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


@lru_cache(maxsize=256)
def _packed(shape: str, scale: float):
    return pack_primitives(get_shape(shape, scale))


def render(world: PoolWorld, rov: RovState, mount: CameraMountConfig, noise_sigma: float = 0.0,
           rng: Optional[np.random.Generator] = None, far: float = 10.0, floor: bool = False,
           with_rgb: bool = False, backend: str = "compiled") -> Observation:
    """Ray-cast depth, labels and grasp-point tracks for one camera.

    ``backend="numpy"`` uses the vectorized reference intersectors; the
    default compiled path gives the same image and is much faster.
    """
    if backend not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    cam = mount.model
    xg, yg, _ = normalized_grid(cam)
    p_c, R_wc = camera_pose(rov, mount)
    depth = np.full((cam.height, cam.width), far)
    labels = np.full((cam.height, cam.width), BACKGROUND, dtype=np.int16)

    if floor:
        dz = R_wc[2, 0] * xg + R_wc[2, 1] * yg + R_wc[2, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(dz < 0, -p_c[2] / dz, np.inf)
        np.copyto(depth, np.minimum(depth, t), where=t > NEAR)

    tracks = {}
    for obj in world.objects:
        gp = R_wc.T @ (obj.world_grasp_point() - p_c)
        tracks[obj.id] = tuple(cam.project(gp).tolist()) if gp[2] > NEAR else None
        c_w, r = obj.bounding_sphere_world()
        c = R_wc.T @ (c_w - p_c)
        if c[2] + r <= NEAR:
            continue
        box = _pixel_bbox(cam, c, r)
        if box is None:
            continue
        u0, u1, v0, v1 = box
        M = obj.rotation.T @ R_wc  # object-from-camera
        o = obj.rotation.T @ (p_c - obj.position)
        if backend == "compiled":
            kinds, params, bounds = _packed(obj.shape, obj.scale)
            cast_object(xg, yg, v0, v1, u0, u1, M, o, kinds, params, bounds, depth, labels, obj.id, NEAR)
            continue
        xs = xg[v0:v1, u0:u1].ravel()
        ys = yg[v0:v1, u0:u1].ravel()
        dirs = np.stack([xs, ys, np.ones_like(xs)], axis=1)
        t = obj.geometry.intersect(o, dirs @ M.T)
        t = t.reshape(v1 - v0, u1 - u0)
        sub_d = depth[v0:v1, u0:u1]
        sub_l = labels[v0:v1, u0:u1]
        closer = (t < sub_d) & (t > NEAR)
        sub_d[closer] = t[closer]
        sub_l[closer] = obj.id

    if noise_sigma > 0:
        gen = rng if rng is not None else np.random.default_rng(0)
        geom = depth < far
        noise = gen.normal(0.0, noise_sigma, size=depth.shape)
        depth = np.where(geom, np.maximum(depth + noise, NEAR), depth)

    rgb = None
    if with_rgb:
        rgb = np.clip(1.0 / np.maximum(depth, NEAR) / 4.0, 0.0, 1.0)
        rgb[labels >= 0] = 0.25 + 0.75 * rgb[labels >= 0]

    proprio = {
        "compass": math.remainder(rov.yaw, math.tau),
        "pitch": rov.pitch,
        "vehicle_depth": world.extent[2] - rov.z,
        "gripper": rov.gripper_aperture,
    }
    return Observation(depth, labels, tracks, proprio, world.time,
                       tuple(o.id for o in world.objects), rgb)
