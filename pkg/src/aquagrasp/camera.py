"""Calibrated pinhole cameras and the plane-at-depth cross-camera warp.

Pixel coordinates follow the pixel-centre convention: pixel ``(row, col)``
sits at ``(u, v) = (col, row)``.  Distortion uses the Brown-Conrady model with
coefficients ``[k1, k2, p1, p2, k3]``.

The warp maps every pixel of a *target* camera back into a *source* camera:
undistort the target pixel, intersect its ray with a fronto-parallel plane at
depth ``Z``, move the point into the source frame with ``R, t`` and project it
with the source lens model.  The resulting dense table is then used for
backward sampling of source images.
"""
from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    BehindCamera,
    ConfigError,
    DimensionMismatch,
    InvalidDepth,
    NonConvergent,
)

log = logging.getLogger(__name__)

UNDISTORT_MAX_ITER = 50
UNDISTORT_TOL = 1e-8

# sampling coordinates this close to a pixel centre are treated as exact, so the
# undistortion residue of an identity table does not blur the image
SNAP_EPS = 1e-4

TABLE_MAGIC = b"AQRT"
TABLE_VERSION = 1


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))
        if len(self.dist) != 5:
            raise ValueError("dist must hold 5 coefficients [k1, k2, p1, p2, k3]")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.dist)

    @property
    def size(self) -> tuple:
        return (self.width, self.height)

    def scaled(self, factor: float) -> "CameraModel":
        """Same lens at a different resolution (pixel-centre aware)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        sx, sy = w / self.width, h / self.height
        return CameraModel(
            self.fx * sx, self.fy * sy,
            (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5,
            w, h, self.dist,
        )

    def distort(self, x, y):
        """Apply lens distortion to normalized coordinates."""
        k1, k2, p1, p2, k3 = self.dist
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        r2 = x * x + y * y
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
        yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
        return xd, yd

    def undistort(self, xd, yd, max_iter=UNDISTORT_MAX_ITER, tol=UNDISTORT_TOL):
        """Invert :meth:`distort` by damped fixed-point iteration.

        Returns ``(x, y, converged)``; ``converged`` is elementwise and true
        where the reprojection residual dropped below ``tol``.
        """
        xd = np.asarray(xd, dtype=float)
        yd = np.asarray(yd, dtype=float)
        if not self.has_distortion:
            return xd.copy(), yd.copy(), np.ones(xd.shape, dtype=bool)
        k1, k2, p1, p2, k3 = self.dist
        x, y = xd.copy(), yd.copy()
        step = np.ones(xd.shape)
        ex, ey = self.distort(x, y)
        resid = np.hypot(ex - xd, ey - yd)
        for _ in range(max_iter):
            done = resid < tol
            if done.all():
                break
            r2 = x * x + y * y
            radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
            dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
            dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
            with np.errstate(divide="ignore", invalid="ignore"):
                fx = (xd - dx) / radial
                fy = (yd - dy) / radial
            nx = np.where(done, x, x + step * (fx - x))
            ny = np.where(done, y, y + step * (fy - y))
            ex, ey = self.distort(nx, ny)
            new_resid = np.hypot(ex - xd, ey - yd)
            worse = ~done & ~(new_resid <= resid)
            # back off the step where the update did not help
            step = np.where(worse, step * 0.5, step)
            x = np.where(worse, x, nx)
            y = np.where(worse, y, ny)
            resid = np.where(worse, resid, new_resid)
        converged = np.isfinite(resid) & (resid < tol)
        return x, y, converged

    def pixel_to_normalized(self, u, v):
        xd = (np.asarray(u, dtype=float) - self.cx) / self.fx
        yd = (np.asarray(v, dtype=float) - self.cy) / self.fy
        return self.undistort(xd, yd)

    def project(self, points) -> np.ndarray:
        """Project camera-frame points ``(..., 3)`` to pixels ``(..., 2)``.

        Points must have positive depth; no check is made here.
        """
        p = np.asarray(points, dtype=float)
        x = p[..., 0] / p[..., 2]
        y = p[..., 1] / p[..., 2]
        xd, yd = self.distort(x, y)
        return np.stack([self.fx * xd + self.cx, self.fy * yd + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "dist": list(self.dist),
        }


@lru_cache(maxsize=32)
def normalized_grid(cam: CameraModel):
    """Undistorted normalized coordinates for every pixel centre, shape (H, W)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width].astype(float)
    x, y, ok = cam.pixel_to_normalized(u, v)
    x.setflags(write=False)
    y.setflags(write=False)
    ok.setflags(write=False)
    return x, y, ok


def undistort_pixel(cam: CameraModel, pixel) -> np.ndarray:
    u, v = float(pixel[0]), float(pixel[1])
    if not (-0.5 <= u <= cam.width - 0.5 and -0.5 <= v <= cam.height - 0.5):
        raise ValueError(f"pixel {pixel} outside a {cam.width}x{cam.height} image")
    x, y, ok = cam.pixel_to_normalized(u, v)
    if not bool(ok):
        raise NonConvergent(
            f"undistortion of {pixel} did not reach {UNDISTORT_TOL} in {UNDISTORT_MAX_ITER} iterations"
        )
    return np.array([float(x), float(y)])


def ray_plane_point(normalized, Z: float) -> np.ndarray:
    """Intersect the ray ``[x, y, 1]`` with the plane at depth ``Z``."""
    if not Z > 0:
        raise InvalidDepth(f"plane depth must be positive, got {Z}")
    n = np.asarray(normalized, dtype=float)
    return np.array([Z * n[0], Z * n[1], Z])


def _as_rotation(rotation) -> tuple:
    R = np.asarray(rotation, dtype=float).reshape(3, 3)
    if not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > 1e-9:
        raise ValueError("rotation must have determinant +1")
    return tuple(tuple(float(v) for v in row) for row in R)


@dataclass(frozen=True)
class WarpSpec:
    source: CameraModel
    target: CameraModel
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)
    plane_depth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = tuple(float(v) for v in np.asarray(self.translation, dtype=float).ravel())
        if len(t) != 3:
            raise ValueError("translation must have 3 components")
        object.__setattr__(self, "translation", t)
        if not self.plane_depth > 0:
            raise InvalidDepth(f"plane depth must be positive, got {self.plane_depth}")

    @property
    def R(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def fingerprint(self) -> str:
        blob = repr((self.source, self.target, self.rotation, self.translation, float(self.plane_depth)))
        return hashlib.sha256(blob.encode()).hexdigest()


def transform_and_project(spec: WarpSpec, X2) -> np.ndarray:
    """Move a target-frame point into the source frame and project it."""
    X1 = spec.R @ np.asarray(X2, dtype=float) + spec.t
    if X1[2] <= 0:
        raise BehindCamera(f"point {X1} is behind the source camera")
    return spec.source.project(X1)


@dataclass
class RemapTable:
    """Per-target-pixel source coordinates. Invalid entries hold -1."""

    map_u: np.ndarray
    map_v: np.ndarray
    valid_mask: np.ndarray
    source_size: tuple = field(default=None)

    @property
    def width(self) -> int:
        return self.map_u.shape[1]

    @property
    def height(self) -> int:
        return self.map_u.shape[0]

    def to_bytes(self) -> bytes:
        header = TABLE_MAGIC + struct.pack("<III", TABLE_VERSION, self.width, self.height)
        bits = np.packbits(self.valid_mask.ravel(), bitorder="little")
        return b"".join([
            header,
            self.map_u.astype("<f4").tobytes(),
            self.map_v.astype("<f4").tobytes(),
            bits.tobytes(),
        ])

    @classmethod
    def from_bytes(cls, blob: bytes, source_size=None) -> "RemapTable":
        if blob[:4] != TABLE_MAGIC:
            raise ValueError("not a remap table (bad magic)")
        version, w, h = struct.unpack("<III", blob[4:16])
        if version != TABLE_VERSION:
            raise ValueError(f"unsupported remap table version {version}")
        n = w * h
        off = 16
        map_u = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(h, w)
        off += 4 * n
        map_v = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(h, w)
        off += 4 * n
        nbytes = (n + 7) // 8
        bits = np.frombuffer(blob, dtype=np.uint8, count=nbytes, offset=off)
        valid = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(h, w)
        return cls(map_u.astype(np.float32), map_v.astype(np.float32), valid, source_size)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path, source_size=None) -> "RemapTable":
        return cls.from_bytes(Path(path).read_bytes(), source_size)


def build_remap_table(spec: WarpSpec) -> RemapTable:
    tgt, src = spec.target, spec.source
    x, y, ok = normalized_grid(tgt)
    Z = spec.plane_depth
    X2 = np.stack([Z * x, Z * y, np.full_like(x, Z)], axis=-1)
    X1 = X2 @ spec.R.T + spec.t
    front = X1[..., 2] > 0
    safe = np.where(front[..., None], X1, 1.0)
    uv = src.project(safe)
    u, v = uv[..., 0], uv[..., 1]
    valid = ok & front & np.isfinite(u) & np.isfinite(v)
    valid &= (u >= 0) & (u < src.width) & (v >= 0) & (v < src.height)
    map_u = np.where(valid, u, -1.0).astype(np.float32)
    map_v = np.where(valid, v, -1.0).astype(np.float32)
    # float32 rounding may push an in-bounds coordinate onto the upper edge
    edge = valid & ((map_u >= src.width) | (map_v >= src.height))
    valid &= ~edge
    map_u[edge] = -1.0
    map_v[edge] = -1.0
    return RemapTable(map_u, map_v, valid, src.size)


_TABLE_CACHE: dict = {}


def cached_remap_table(spec: WarpSpec, cache_dir=None) -> RemapTable:
    """Build a table once per spec; optionally persist it under ``cache_dir``."""
    key = spec.fingerprint()
    table = _TABLE_CACHE.get(key)
    path = None if cache_dir is None else Path(cache_dir) / f"remap_{key[:16]}.aqrt"
    if table is None and path is not None and path.exists():
        table = RemapTable.load(path, spec.source.size)
        log.debug("loaded remap table from %s", path)
    if table is None:
        table = build_remap_table(spec)
    if path is not None and not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        table.save(path)
    _TABLE_CACHE[key] = table
    return table


def remap_image(table: RemapTable, image, fill=0.0, method="bilinear") -> np.ndarray:
    """Backward-sample ``image`` through ``table``.

    Multi-channel images (H, W, C) are remapped per channel.  Integer images
    are rounded and clipped back to their dtype.
    """
    img = np.asarray(image)
    if img.ndim not in (2, 3):
        raise DimensionMismatch(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape[:2]
    if table.source_size is not None and (w, h) != tuple(table.source_size):
        raise DimensionMismatch(
            f"image is {w}x{h} but the table samples a {table.source_size[0]}x{table.source_size[1]} source"
        )
    valid = table.valid_mask
    u = table.map_u[valid].astype(float)
    v = table.map_v[valid].astype(float)
    ru, rv = np.rint(u), np.rint(v)
    u = np.where(np.abs(u - ru) < SNAP_EPS, ru, u)
    v = np.where(np.abs(v - rv) < SNAP_EPS, rv, v)
    src = img.astype(float)
    if method == "nearest":
        iu = np.clip(np.floor(u + 0.5).astype(int), 0, w - 1)
        iv = np.clip(np.floor(v + 0.5).astype(int), 0, h - 1)
        vals = src[iv, iu]
    elif method == "bilinear":
        u0 = np.floor(u)
        v0 = np.floor(v)
        au = (u - u0)
        av = (v - v0)
        u0 = u0.astype(int)
        v0 = v0.astype(int)
        u1 = np.minimum(u0 + 1, w - 1)
        v1 = np.minimum(v0 + 1, h - 1)
        if src.ndim == 3:
            au = au[:, None]
            av = av[:, None]
        vals = ((src[v0, u0] * (1 - au) + src[v0, u1] * au) * (1 - av)
                + (src[v1, u0] * (1 - au) + src[v1, u1] * au) * av)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    out = np.full((table.height, table.width) + img.shape[2:], float(fill))
    out[valid] = vals
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    return out.astype(img.dtype)


# -- calibration documents ------------------------------------------------

_CAM_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "dist")


def _camera_from_mapping(data, prefix, path) -> CameraModel:
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix, path)
    unknown = set(data) - set(_CAM_KEYS)
    if unknown:
        raise ConfigError("unknown key", f"{prefix}.{sorted(unknown)[0]}", path)
    vals = {}
    for key in _CAM_KEYS:
        full = f"{prefix}.{key}"
        if key not in data:
            if key == "dist":
                vals[key] = (0.0,) * 5
                continue
            raise ConfigError("missing key", full, path)
        raw = data[key]
        try:
            if key in ("width", "height"):
                if isinstance(raw, bool) or int(raw) != raw:
                    raise ValueError
                vals[key] = int(raw)
            elif key == "dist":
                vals[key] = tuple(float(d) for d in raw)
                if len(vals[key]) != 5:
                    raise ValueError
            else:
                if isinstance(raw, bool):
                    raise ValueError
                vals[key] = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"invalid value {raw!r}", full, path) from None
    try:
        return CameraModel(**vals)
    except ValueError as exc:
        raise ConfigError(str(exc), prefix, path) from None


def _floats(data, key, n, path):
    try:
        vals = [float(v) for v in data[key]]
        if any(isinstance(v, bool) for v in data[key]):
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError(f"expected {n} numbers", key, path) from None
    if len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {len(vals)}", key, path)
    return vals


def parse_calibration(data, path=None) -> WarpSpec:
    """Build a :class:`WarpSpec` from a calibration mapping.

    Schema::

        source: {fx, fy, cx, cy, width, height, dist: [k1, k2, p1, p2, k3]}
        target: {...same keys...}
        rotation: [9 values, row-major]   # optional, identity
        translation: [tx, ty, tz]         # metres, optional, zero
        plane_depth: Z                    # metres, optional, 1.0
    """
    if not isinstance(data, dict):
        raise ConfigError("calibration must be a mapping", None, path)
    allowed = {"source", "target", "rotation", "translation", "plane_depth"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError("unknown key", sorted(unknown)[0], path)
    for key in ("source", "target"):
        if key not in data:
            raise ConfigError("missing key", key, path)
    source = _camera_from_mapping(data["source"], "source", path)
    target = _camera_from_mapping(data["target"], "target", path)
    rotation = np.eye(3)
    if "rotation" in data:
        rotation = np.array(_floats(data, "rotation", 9, path)).reshape(3, 3)
    translation = [0.0, 0.0, 0.0]
    if "translation" in data:
        translation = _floats(data, "translation", 3, path)
    plane_depth = data.get("plane_depth", 1.0)
    if isinstance(plane_depth, bool) or not isinstance(plane_depth, (int, float)):
        raise ConfigError(f"invalid value {plane_depth!r}", "plane_depth", path)
    if not plane_depth > 0:
        raise ConfigError("must be positive", "plane_depth", path)
    try:
        return WarpSpec(source, target, rotation, translation, float(plane_depth))
    except ValueError as exc:
        raise ConfigError(str(exc), "rotation", path) from None


def load_calibration(path) -> WarpSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read calibration: {exc.strerror}", None, path) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed document: {exc}", None, path) from None
    return parse_calibration(data, path)


def dump_calibration(spec: WarpSpec) -> dict:
    return {
        "source": spec.source.to_dict(),
        "target": spec.target.to_dict(),
        "rotation": [v for row in spec.rotation for v in row],
        "translation": list(spec.translation),
        "plane_depth": spec.plane_depth,
    }
