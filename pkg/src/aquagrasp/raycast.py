"""Compiled per-pixel ray casting used by the renderer.

Mirrors the vectorized ``intersect`` methods in :mod:`aquagrasp.shapes`
(those remain the reference implementation) but walks pixels one at a time,
so each ray is tested only against primitives whose bounding sphere it hits.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

from .shapes import Box, Capsule, Sphere, T_MIN

SPHERE, CAPSULE, BOX = 0, 1, 2


def pack_primitives(geometry):
    """``(kinds, params, bounds)`` arrays for a :class:`ShapeGeometry`.

    params rows: sphere ``c, r``; capsule ``a, b, r``; box ``c, half``.
    bounds rows: bounding sphere ``c, r`` of each primitive.
    """
    n = len(geometry.primitives)
    kinds = np.empty(n, dtype=np.int64)
    params = np.zeros((n, 7))
    bounds = np.zeros((n, 4))
    for i, p in enumerate(geometry.primitives):
        if isinstance(p, Sphere):
            kinds[i] = SPHERE
            params[i, :3] = p.center
            params[i, 3] = p.radius
        elif isinstance(p, Capsule):
            kinds[i] = CAPSULE
            params[i, :3] = p.a
            params[i, 3:6] = p.b
            params[i, 6] = p.radius
        elif isinstance(p, Box):
            kinds[i] = BOX
            params[i, :3] = p.center
            params[i, 3:6] = p.half
        else:
            raise TypeError(f"unsupported primitive {type(p).__name__}")
        lo, hi = p.bounds()
        bounds[i, :3] = (lo + hi) / 2.0
        bounds[i, 3] = np.linalg.norm(hi - lo) / 2.0
    return kinds, params, bounds


@njit(cache=True)
def _sphere(ox, oy, oz, dx, dy, dz, cx, cy, cz, r):
    px, py, pz = ox - cx, oy - cy, oz - cz
    a = dx * dx + dy * dy + dz * dz
    b = dx * px + dy * py + dz * pz
    c = px * px + py * py + pz * pz - r * r
    disc = b * b - a * c
    if disc < 0.0:
        return math.inf
    sq = math.sqrt(disc)
    t = (-b - sq) / a
    if t <= T_MIN:
        t = (-b + sq) / a
    return t if t > T_MIN else math.inf


@njit(cache=True)
def _capsule(ox, oy, oz, dx, dy, dz, p):
    ax, ay, az, bx, by, bz, r = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    bax, bay, baz = bx - ax, by - ay, bz - az
    oax, oay, oaz = ox - ax, oy - ay, oz - az
    baba = bax * bax + bay * bay + baz * baz
    bard = bax * dx + bay * dy + baz * dz
    baoa = bax * oax + bay * oay + baz * oaz
    rdoa = dx * oax + dy * oay + dz * oaz
    rdrd = dx * dx + dy * dy + dz * dz
    oaoa = oax * oax + oay * oay + oaz * oaz
    k2 = baba * rdrd - bard * bard
    k1 = baba * rdoa - baoa * bard
    k0 = baba * oaoa - baoa * baoa - r * r * baba
    h = k1 * k1 - k2 * k0
    best = math.inf
    if h >= 0.0 and abs(k2) > 1e-15:
        sq = math.sqrt(h)
        for tc in ((-k1 - sq) / k2, (-k1 + sq) / k2):
            y = baoa + tc * bard
            if tc > T_MIN and y > 0.0 and y < baba and tc < best:
                best = tc
    t = _sphere(ox, oy, oz, dx, dy, dz, ax, ay, az, r)
    if t < best:
        best = t
    t = _sphere(ox, oy, oz, dx, dy, dz, bx, by, bz, r)
    if t < best:
        best = t
    return best


@njit(cache=True)
def _box(ox, oy, oz, dx, dy, dz, p):
    tn = -math.inf
    tf = math.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        lo = p[k] - p[3 + k] - o[k]
        hi = p[k] + p[3 + k] - o[k]
        if d[k] == 0.0:
            if lo > 0.0 or hi < 0.0:
                return math.inf
            continue
        ta = lo / d[k]
        tb = hi / d[k]
        if ta > tb:
            ta, tb = tb, ta
        if ta > tn:
            tn = ta
        if tb < tf:
            tf = tb
    if tn > tf or tf <= T_MIN:
        return math.inf
    return tn if tn > T_MIN else tf


@njit(cache=True)
def cast_object(xg, yg, v0, v1, u0, u1, M, o, kinds, params, bounds, depth, labels, oid, near):
    """Z-buffer one object into ``depth``/``labels`` over the pixel box.

    ``M`` maps camera-frame directions into the object frame and ``o`` is the
    camera centre in the object frame.
    """
    n = kinds.shape[0]
    ox, oy, oz = o[0], o[1], o[2]
    for v in range(v0, v1):
        for u in range(u0, u1):
            x = xg[v, u]
            y = yg[v, u]
            dx = M[0, 0] * x + M[0, 1] * y + M[0, 2]
            dy = M[1, 0] * x + M[1, 1] * y + M[1, 2]
            dz = M[2, 0] * x + M[2, 1] * y + M[2, 2]
            dd = dx * dx + dy * dy + dz * dz
            best = math.inf
            for i in range(n):
                # cheap bounding-sphere rejection
                cx = bounds[i, 0] - ox
                cy = bounds[i, 1] - oy
                cz = bounds[i, 2] - oz
                r = bounds[i, 3]
                b = dx * cx + dy * cy + dz * cz
                cc = cx * cx + cy * cy + cz * cz
                if cc > r * r and (b <= 0.0 or cc - b * b / dd > r * r):
                    continue
                k = kinds[i]
                if k == 0:
                    t = _sphere(ox, oy, oz, dx, dy, dz, params[i, 0], params[i, 1], params[i, 2], params[i, 3])
                elif k == 1:
                    t = _capsule(ox, oy, oz, dx, dy, dz, params[i])
                else:
                    t = _box(ox, oy, oz, dx, dy, dz, params[i])
                if t < best:
                    best = t
            if best > near and best < depth[v, u]:
                depth[v, u] = best
                labels[v, u] = oid
