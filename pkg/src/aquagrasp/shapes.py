"""Primitive geometry for pool objects and vectorized ray casting.

Each object shape is a union of spheres, capsules and boxes expressed in the
object's body frame (z up, origin at the floor contact point).  Ray casts take
a single origin and many directions; the returned parameter ``t`` is measured
along the *unnormalized* direction, so feeding camera rays of the form
``[x, y, 1]`` yields z-depth directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

T_MIN = 1e-6


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float

    def intersect(self, o, d):
        c = np.asarray(self.center)
        oc = o - c
        a = np.einsum("ij,ij->i", d, d)
        b = d @ oc
        cc = oc @ oc - self.radius ** 2
        disc = b * b - a * cc
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t0 = (-b - sq) / a
        t1 = (-b + sq) / a
        t = np.where(t0 > T_MIN, t0, t1)
        return np.where(hit & (t > T_MIN), t, np.inf)

    def sdf(self, p):
        return np.linalg.norm(np.asarray(p) - np.asarray(self.center), axis=-1) - self.radius

    def bounds(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def scaled(self, s):
        return Sphere(tuple(s * np.asarray(self.center)), s * self.radius)


@dataclass(frozen=True)
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def intersect(self, o, d):
        pa, pb, r = np.asarray(self.a), np.asarray(self.b), self.radius
        ba = pb - pa
        oa = o - pa
        baba = ba @ ba
        bard = d @ ba
        baoa = ba @ oa
        rdoa = d @ oa
        rdrd = np.einsum("ij,ij->i", d, d)
        oaoa = oa @ oa
        k2 = baba * rdrd - bard * bard
        k1 = baba * rdoa - baoa * bard
        k0 = baba * oaoa - baoa * baoa - r * r * baba
        h = k1 * k1 - k2 * k0
        ok = (h >= 0) & (np.abs(k2) > 1e-15)
        sq = np.sqrt(np.where(ok, h, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (-k1 - sq) / k2
            t1 = (-k1 + sq) / k2
        t_cyl = np.full(len(d), np.inf)
        for tc in (t1, t0):  # t0 last so it wins when both are valid
            y = baoa + tc * bard
            good = ok & (tc > T_MIN) & (y > 0) & (y < baba)
            t_cyl = np.where(good, np.minimum(t_cyl, tc), t_cyl)
        ends = np.minimum(Sphere(self.a, r).intersect(o, d), Sphere(self.b, r).intersect(o, d))
        return np.minimum(t_cyl, ends)

    def sdf(self, p):
        p = np.asarray(p, dtype=float)
        pa, pb = np.asarray(self.a), np.asarray(self.b)
        ba = pb - pa
        h = np.clip(((p - pa) @ ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(p - pa - h[..., None] * ba, axis=-1) - self.radius

    def bounds(self):
        pa, pb = np.asarray(self.a), np.asarray(self.b)
        return np.minimum(pa, pb) - self.radius, np.maximum(pa, pb) + self.radius

    def scaled(self, s):
        return Capsule(tuple(s * np.asarray(self.a)), tuple(s * np.asarray(self.b)), s * self.radius)


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple

    def intersect(self, o, d):
        c, h = np.asarray(self.center), np.asarray(self.half)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (c - h - o) * inv
            tb = (c + h - o) * inv
        # a zero direction component gives nan when the origin sits on a slab face
        ta = np.nan_to_num(ta, nan=-np.inf)
        tb = np.nan_to_num(tb, nan=np.inf)
        tn = np.minimum(ta, tb).max(axis=1)
        tf = np.maximum(ta, tb).min(axis=1)
        hit = (tn <= tf) & (tf > T_MIN)
        t = np.where(tn > T_MIN, tn, tf)
        return np.where(hit, t, np.inf)

    def sdf(self, p):
        q = np.abs(np.asarray(p, dtype=float) - np.asarray(self.center)) - np.asarray(self.half)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def bounds(self):
        c, h = np.asarray(self.center), np.asarray(self.half)
        return c - h, c + h

    def scaled(self, s):
        return Box(tuple(s * np.asarray(self.center)), tuple(s * np.asarray(self.half)))


@dataclass(frozen=True)
class ShapeGeometry:
    name: str
    primitives: tuple
    grasp_point: tuple
    contact_aperture: float

    def intersect(self, o, d):
        t = self.primitives[0].intersect(o, d)
        for prim in self.primitives[1:]:
            t = np.minimum(t, prim.intersect(o, d))
        return t

    def sdf(self, p):
        return np.min([prim.sdf(p) for prim in self.primitives], axis=0)

    @property
    def aabb(self):
        lo, hi = zip(*(prim.bounds() for prim in self.primitives))
        return np.min(lo, axis=0), np.max(hi, axis=0)

    @property
    def bounding_sphere(self):
        lo, hi = self.aabb
        return (lo + hi) / 2.0, float(np.linalg.norm(hi - lo) / 2.0)


# Body frame: z up, origin on the floor.  grasp_point is the centre of the main
# (graspable) primitive, which is what mask-centroid servoing lines up with.
_BASE_SHAPES = {
    "rock": ShapeGeometry(
        "rock",
        (Sphere((0.0, 0.0, 0.05), 0.05), Sphere((0.03, 0.015, 0.035), 0.035)),
        (0.0, 0.0, 0.05),
        0.5,
    ),
    "seagrass": ShapeGeometry(
        "seagrass",
        (
            Capsule((0.0, 0.0, 0.03), (0.0, 0.0, 0.125), 0.02),
            Box((0.0, 0.0, 0.01), (0.04, 0.04, 0.01)),
            Capsule((0.03, 0.01, 0.02), (0.04, 0.015, 0.11), 0.012),
            Capsule((-0.025, -0.015, 0.02), (-0.035, -0.02, 0.10), 0.012),
        ),
        (0.0, 0.0, 0.0775),
        0.25,
    ),
    "duck": ShapeGeometry(
        "duck",
        (Sphere((0.0, 0.0, 0.045), 0.045), Sphere((0.035, 0.0, 0.095), 0.025)),
        (0.0, 0.0, 0.045),
        0.45,
    ),
    "pitcher": ShapeGeometry(
        "pitcher",
        (
            Capsule((0.0, 0.0, 0.05), (0.0, 0.0, 0.10), 0.05),
            Box((-0.06, 0.0, 0.085), (0.015, 0.008, 0.03)),
        ),
        (0.0, 0.0, 0.075),
        0.6,
    ),
    "can": ShapeGeometry(
        "can",
        (Capsule((0.0, 0.0, 0.035), (0.0, 0.0, 0.075), 0.035),),
        (0.0, 0.0, 0.055),
        0.45,
    ),
    "drill": ShapeGeometry(
        "drill",
        (
            Box((0.0, 0.0, 0.11), (0.08, 0.025, 0.03)),
            Capsule((0.0, 0.0, 0.035), (0.0, 0.0, 0.08), 0.02),
            Box((0.0, 0.0, 0.015), (0.035, 0.03, 0.015)),
        ),
        (0.0, 0.0, 0.0575),
        0.4,
    ),
}

SHAPES = tuple(_BASE_SHAPES)
SEEN_SHAPES = ("rock", "seagrass", "duck")
NOVEL_SHAPES = ("pitcher", "can", "drill")


@lru_cache(maxsize=256)
def get_shape(name: str, scale: float = 1.0) -> ShapeGeometry:
    try:
        base = _BASE_SHAPES[name]
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; expected one of {SHAPES}") from None
    if scale == 1.0:
        return base
    return ShapeGeometry(
        name,
        tuple(p.scaled(scale) for p in base.primitives),
        tuple(scale * np.asarray(base.grasp_point)),
        base.contact_aperture,
    )
