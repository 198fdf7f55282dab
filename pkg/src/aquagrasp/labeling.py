"""Automatic affordance supervision.

Pipeline: detect the gripper closure time from the width signal, backtrack
the contact pixel along point tracks, then build and export
``(current depth, goal depth, keypoint map)`` training tuples at 112x112.
"""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DegenerateAnchors, ExportError, NoClosureFound, SeedOutOfFrame

log = logging.getLogger(__name__)

SAMPLE_SIZE = 112
TIME_EPS = 1e-9


# -- oracle heatmap ---------------------------------------------------------

def oracle_heatmap(obs, target_id, splat_sigma: float = 3.0) -> np.ndarray:
    """Gaussian splat on the target's projected grasp point, peak-normalized.

    When the grasp point is hidden (occluded or off-frame) the splat moves to
    the nearest visible target pixel, so the peak always lies on the target.
    All zeros when the target has no visible pixels.
    """
    hm = np.zeros((obs.height, obs.width))
    if target_id is None:
        return hm
    mask = obs.labels == target_id
    if not mask.any():
        return hm
    p = obs.tracks.get(target_id)
    if p is None:
        return hm
    pu, pv = float(p[0]), float(p[1])
    # the pixel the splat's argmax lands on (ties resolve to the lower index)
    col, row = int(np.ceil(pu - 0.5)), int(np.ceil(pv - 0.5))
    if not (0 <= row < obs.height and 0 <= col < obs.width and mask[row, col]):
        rows, cols = np.nonzero(mask)
        i = int(np.argmin((cols - pu) ** 2 + (rows - pv) ** 2))
        pu, pv = float(cols[i]), float(rows[i])
    u = np.arange(obs.width) - pu
    v = np.arange(obs.height) - pv
    gu = np.exp(-(u * u) / (2.0 * splat_sigma ** 2))
    gv = np.exp(-(v * v) / (2.0 * splat_sigma ** 2))
    hm = np.outer(gv, gu)
    peak = hm.max()
    return hm / peak if peak > 0 else hm


# -- closure detection ------------------------------------------------------

@dataclass
class WidthSignal:
    t: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        if self.t.ndim != 1 or self.t.shape != self.w.shape:
            raise ValueError("t and w must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.w))):
            raise ValueError("width signal contains non-finite values")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("signal times must be strictly increasing")

    @property
    def sample_rate(self) -> float:
        if len(self.t) < 2:
            return 0.0
        return (len(self.t) - 1) / (self.t[-1] - self.t[0])

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class ClosureEvent:
    index: int
    t_star: float
    drop_magnitude: float
    plateau_len: float
    plateau_level: float


@dataclass(frozen=True)
class DetectorParams:
    window: float = 0.5
    min_drop: float = 0.3
    min_plateau: float = 1.0
    plateau_tol: float = 0.1


class ClosureDetector:
    """Streaming max-drop-then-plateau detector.

    Sample ``i`` qualifies when the drop from the maximum over the trailing
    ``[t_i - window, t_i]`` reaches ``min_drop`` and the samples in
    ``[t_i, t_i + min_plateau]`` vary peak-to-peak by at most ``plateau_tol``
    (the signal must extend to ``t_i + min_plateau``).  :meth:`push` returns
    the earliest qualifying event as soon as its plateau is confirmed.
    """

    def __init__(self, params: DetectorParams = DetectorParams()):
        self.p = params
        self._n = 0
        self._last_t = -math.inf
        self._maxq = deque()  # (t, w) with decreasing w
        self._pending = []  # [index, t, w, drop, lo, hi]
        self.event: Optional[ClosureEvent] = None

    def push(self, t: float, w: float) -> Optional[ClosureEvent]:
        if self.event is not None:
            return self.event
        if not (math.isfinite(t) and math.isfinite(w)):
            raise ValueError("non-finite sample")
        if t <= self._last_t:
            raise ValueError("sample times must be strictly increasing")
        p = self.p
        i = self._n
        self._n += 1
        self._last_t = t

        # update pending plateaus with this sample, earliest first
        keep = []
        for c in self._pending:
            if t <= c[1] + p.min_plateau + TIME_EPS:
                c[4] = min(c[4], w)
                c[5] = max(c[5], w)
                if c[5] - c[4] > p.plateau_tol + TIME_EPS:
                    continue
            keep.append(c)
        self._pending = keep

        # trailing-window maximum including this sample
        while self._maxq and self._maxq[-1][1] <= w:
            self._maxq.pop()
        self._maxq.append((t, w))
        while self._maxq[0][0] < t - p.window - TIME_EPS:
            self._maxq.popleft()
        drop = self._maxq[0][1] - w
        if drop >= p.min_drop - TIME_EPS:
            self._pending.append([i, t, w, drop, w, w])

        for c in self._pending:
            if t >= c[1] + p.min_plateau - TIME_EPS:
                self.event = ClosureEvent(c[0], c[1], c[3], p.min_plateau, 0.5 * (c[4] + c[5]))
                return self.event
            break  # later candidates cannot confirm before the earliest one
        return None


def detect_closure(sig: WidthSignal, window: float = 0.5, min_drop: float = 0.3,
                   min_plateau: float = 1.0, plateau_tol: float = 0.1) -> ClosureEvent:
    det = ClosureDetector(DetectorParams(window, min_drop, min_plateau, plateau_tol))
    for t, w in zip(sig.t.tolist(), sig.w.tolist()):
        ev = det.push(t, w)
        if ev is not None:
            return ev
    raise NoClosureFound(
        f"no drop of {min_drop} followed by a {min_plateau} s plateau in {len(sig)} samples")


# -- contact tracks ---------------------------------------------------------

@dataclass
class ContactTrack:
    frames: np.ndarray  # frame indices 0..k_star
    u: np.ndarray
    v: np.ndarray
    visible: np.ndarray
    seed: tuple
    k_star: int

    def at(self, k: int):
        return (float(self.u[k]), float(self.v[k])) if self.visible[k] else None


def in_frame(u, v, width: int, height: int):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return (u >= -0.5) & (u <= width - 0.5) & (v >= -0.5) & (v <= height - 0.5)


def _frame_camera_pose(frame: dict, pitch: float, offset):
    from .render import BODY_FROM_CAMERA
    from .sim import body_rotation

    x, y, z, yaw = frame["rov"]
    R_wb = body_rotation(yaw, pitch)
    return np.array([x, y, z]) + R_wb @ np.asarray(offset, dtype=float), R_wb @ BODY_FROM_CAMERA


def _object_pose(frame: dict, oid: int):
    pose = np.asarray(frame["objects"][str(oid)], dtype=float)
    return pose[:3], pose[3:].reshape(3, 3)


def _record_camera(record):
    from .camera import CameraModel

    c = record.camera
    return CameraModel(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"], tuple(c["dist"]))


def anchor_pixel(record, k: int):
    """Projection of the gripper anchor into frame ``k``; ``(u, v, depth)``."""
    cam = _record_camera(record)
    frame = record.frames[k]
    pitch = math.radians(record.pitch_deg)
    p_c, R_wc = _frame_camera_pose(frame, pitch, record.camera["offset"])
    x, y, z, yaw = frame["rov"]
    from .sim import body_rotation

    anchor_w = np.array([x, y, z]) + body_rotation(yaw, pitch) @ np.asarray(record.gripper_anchor)
    pc = R_wc.T @ (anchor_w - p_c)
    u, v = cam.project(pc)
    return float(u), float(v), float(pc[2])


class SimTrackOracle:
    """Ground-truth point tracker built from recorded vehicle and object poses.

    The seed pixel is back-projected at ``seed_depth`` in the seed frame and
    the resulting point is rigidly attached to the object captured at (or
    right after) the seed frame, or to the pool when nothing is captured.
    """

    def __init__(self, record, seed_depth: Optional[float] = None):
        self.record = record
        self.cam = _record_camera(record)
        self.seed_depth = seed_depth
        self.pitch = math.radians(record.pitch_deg)

    def attached_object(self, k_star: int):
        for fr in self.record.frames[k_star:]:
            if fr["held"] is not None:
                return fr["held"]
            if fr["aperture"] >= 0.999:  # reopened without capturing
                break
        return None

    def track(self, seed_pixel, k_star: int):
        from .camera import undistort_pixel

        frames = self.record.frames
        offset = self.record.camera["offset"]
        depth = self.seed_depth
        if depth is None:
            depth = anchor_pixel(self.record, k_star)[2]
        x, y = undistort_pixel(self.cam, seed_pixel)
        p_c, R_wc = _frame_camera_pose(frames[k_star], self.pitch, offset)
        point_w = p_c + R_wc @ (depth * np.array([x, y, 1.0]))
        oid = self.attached_object(k_star)
        if oid is not None:
            pos, rot = _object_pose(frames[k_star], oid)
            local = rot.T @ (point_w - pos)
        n = k_star + 1
        u = np.full(n, np.nan)
        v = np.full(n, np.nan)
        vis = np.zeros(n, dtype=bool)
        for k in range(n):
            if oid is not None:
                pos, rot = _object_pose(frames[k], oid)
                pw = pos + rot @ local
            else:
                pw = point_w
            pc_k, R_k = _frame_camera_pose(frames[k], self.pitch, offset)
            pc = R_k.T @ (pw - pc_k)
            if pc[2] <= 1e-9:
                continue
            u[k], v[k] = self.cam.project(pc)
            vis[k] = True
        return u, v, vis


class FileTrackSource:
    """Point tracks imported from line-delimited ``{frame, u, v, visible}`` records."""

    def __init__(self, path):
        self.path = Path(path)
        self.rows = {}
        try:
            lines = self.path.read_text().splitlines()
        except OSError as exc:
            raise ExportError(f"{self.path}: cannot read track file: {exc.strerror}") from None
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                k = int(rec["frame"])
                vis = bool(rec["visible"])
                if vis:
                    self.rows[k] = (float(rec["u"]), float(rec["v"]), True)
                else:  # invisible rows may carry null coordinates
                    self.rows[k] = (math.nan, math.nan, False)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{self.path}:{n}: malformed track record ({exc})") from None

    def track(self, seed_pixel, k_star: int):
        n = k_star + 1
        u = np.full(n, np.nan)
        v = np.full(n, np.nan)
        vis = np.zeros(n, dtype=bool)
        for k in range(n):
            if k in self.rows:
                u[k], v[k], vis[k] = self.rows[k]
        return u, v, vis


def write_track_file(path, track: ContactTrack):
    with open(path, "w") as fh:
        for k in range(len(track.frames)):
            fh.write(json.dumps({"frame": int(track.frames[k]),
                                 "u": None if not track.visible[k] else float(track.u[k]),
                                 "v": None if not track.visible[k] else float(track.v[k]),
                                 "visible": bool(track.visible[k])}) + "\n")


def backtrack_contact(source, seed_pixel, k_star: int, width: int, height: int) -> ContactTrack:
    """Read the contact track backward from the seed frame to frame 0."""
    su, sv = float(seed_pixel[0]), float(seed_pixel[1])
    if not bool(in_frame(su, sv, width, height)):
        raise SeedOutOfFrame(f"seed pixel ({su:.2f}, {sv:.2f}) outside the {width}x{height} image")
    u, v, vis = source.track((su, sv), k_star)
    vis = vis & in_frame(np.nan_to_num(u, nan=-1e9), np.nan_to_num(v, nan=-1e9), width, height)
    return ContactTrack(np.arange(k_star + 1), u, v, vis, (su, sv), k_star)


# -- normalization and resizing ---------------------------------------------

@dataclass(frozen=True)
class NormSpec:
    d_min: float
    d_max: float

    def __post_init__(self):
        if not (math.isfinite(self.d_min) and math.isfinite(self.d_max)):
            raise DegenerateAnchors("anchors must be finite")
        if self.d_max - self.d_min < 1e-6:
            raise DegenerateAnchors(f"d_max - d_min = {self.d_max - self.d_min:g} < 1e-6")

    def normalize(self, depth) -> np.ndarray:
        d = np.asarray(depth, dtype=float)
        return np.clip((d - self.d_min) / (self.d_max - self.d_min), 0.0, 1.0)

    def denormalize(self, x) -> np.ndarray:
        return self.d_min + np.asarray(x, dtype=float) * (self.d_max - self.d_min)


def compute_anchors(depths, far_plane: Optional[float] = None) -> NormSpec:
    """Min/max over all pixels with geometry (far-plane background excluded)."""
    lo, hi = math.inf, -math.inf
    for d in depths:
        d = np.asarray(d, dtype=float)
        sel = np.isfinite(d)
        if far_plane is not None:
            sel &= d < far_plane
        if sel.any():
            lo = min(lo, float(d[sel].min()))
            hi = max(hi, float(d[sel].max()))
    if not math.isfinite(lo):
        raise DegenerateAnchors("no geometry pixels to anchor the normalization")
    return NormSpec(lo, hi)


def resize_bilinear(img, size=(SAMPLE_SIZE, SAMPLE_SIZE)) -> np.ndarray:
    """Pixel-centre-aligned bilinear resize to ``(rows, cols)``."""
    from scipy.ndimage import zoom

    img = np.asarray(img, dtype=float)
    factors = (size[0] / img.shape[0], size[1] / img.shape[1])
    out = zoom(img, factors, order=1, mode="nearest", grid_mode=True)
    if out.shape != tuple(size):  # zoom rounds the output shape
        raise AssertionError(f"resize produced {out.shape}")
    return out


def target_index(u: float, v: float, width: int, height: int, size: int = SAMPLE_SIZE):
    """Nearest-neighbour ``(row, col)`` of a full-resolution pixel in the resized map."""
    col = min(max(int(math.floor(u * size / width)), 0), size - 1)
    row = min(max(int(math.floor(v * size / height)), 0), size - 1)
    return row, col


def splat(row: int, col: int, sigma: float, size: int = SAMPLE_SIZE) -> np.ndarray:
    r = np.arange(size) - row
    c = np.arange(size) - col
    return np.outer(np.exp(-r * r / (2 * sigma ** 2)), np.exp(-c * c / (2 * sigma ** 2)))


# -- samples ----------------------------------------------------------------

@dataclass
class AffordanceSample:
    episode_id: int
    frame_index: int
    depth_current: np.ndarray
    depth_goal: np.ndarray
    target_map: np.ndarray
    target_splat: Optional[np.ndarray] = None


def goal_frame_index(record, t_star: float, lead: float = 1.0) -> int:
    """Frame nearest ``t_star - lead`` (clamped to the episode start)."""
    times = np.array([f["t"] for f in record.frames])
    return int(np.argmin(np.abs(times - max(t_star - lead, 0.0))))


def build_samples(record, track: ContactTrack, depth_loader, norm: NormSpec, goal,
                  splat_sigma: Optional[float] = 2.0, include_invisible: bool = False) -> list:
    """Training tuples for frames ``k <= k_star``.

    ``depth_loader(k)`` returns frame ``k``'s full-resolution depth.  ``goal``
    is a frame index or a depth array already in this camera's geometry (for
    example an on-land frame warped with :func:`camera.remap_image`).
    By default only frames with a visible contact point are emitted.
    """
    cam = record.camera
    W, H = cam["width"], cam["height"]
    goal_depth = depth_loader(goal) if isinstance(goal, (int, np.integer)) else np.asarray(goal, dtype=float)
    goal_n = norm.normalize(resize_bilinear(goal_depth)).astype(np.float32)
    out = []
    for k in range(track.k_star + 1):
        visible = bool(track.visible[k])
        if not visible and not include_invisible:
            continue
        d = norm.normalize(resize_bilinear(depth_loader(k))).astype(np.float32)
        tmap = np.zeros((SAMPLE_SIZE, SAMPLE_SIZE), dtype=np.float32)
        sp = None
        if visible:
            r, c = target_index(track.u[k], track.v[k], W, H)
            tmap[r, c] = 1.0
            if splat_sigma:
                sp = splat(r, c, splat_sigma).astype(np.float32)
        elif splat_sigma:
            sp = np.zeros_like(tmap)
        out.append(AffordanceSample(record.episode_id, k, d, goal_n, tmap, sp))
    return out


# -- splits, checksums, export ----------------------------------------------

def split_episodes(episode_ids, val_fraction: float = 0.2, seed: int = 0):
    """Episode-wise train/validation split; no id lands in both."""
    ids = sorted(set(int(i) for i in episode_ids))
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(val_fraction * len(ids)))
    if len(ids) >= 2 and val_fraction > 0:
        n_val = min(max(n_val, 1), len(ids) - 1)
    else:
        n_val = 0
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a64(np.frombuffer(data, dtype=np.uint8)))


def _fnv_kernel():
    from numba import njit, uint64

    @njit(cache=True)
    def kernel(buf):
        h = uint64(0xCBF29CE484222325)
        prime = uint64(0x100000001B3)
        for b in buf:
            h = (h ^ uint64(b)) * prime
        return h

    return kernel


_fnv1a64 = _fnv_kernel()

ARRAY_KINDS = ("depth", "goal", "target", "target_splat")


def _sample_arrays(s: AffordanceSample) -> dict:
    arrs = {"depth": s.depth_current, "goal": s.depth_goal, "target": s.target_map}
    if s.target_splat is not None:
        arrs["target_splat"] = s.target_splat
    return arrs


def export_dataset(samples, path, norm: NormSpec, splits=None, val_fraction: float = 0.2,
                   split_seed: int = 0, source_resolution=None, extra: Optional[dict] = None) -> dict:
    """Write samples as headerless row-major ``<f4`` files plus ``manifest.json``."""
    samples = list(samples)
    if not samples:
        raise ExportError(f"{path}: no samples to export")
    root = Path(path)
    ep_ids = sorted({s.episode_id for s in samples})
    if splits is None:
        splits = split_episodes(ep_ids, val_fraction, split_seed)
    train, val = (sorted(int(i) for i in splits[0]), sorted(int(i) for i in splits[1]))
    if set(train) & set(val):
        raise ValueError("an episode appears in both splits")
    files = {}
    episodes = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for s in sorted(samples, key=lambda s: (s.episode_id, s.frame_index)):
            ep = f"episode_{s.episode_id}"
            (root / ep).mkdir(exist_ok=True)
            episodes.setdefault(ep, {"episode_id": s.episode_id, "frames": []})["frames"].append(s.frame_index)
            for kind, arr in _sample_arrays(s).items():
                arr = np.ascontiguousarray(arr, dtype="<f4")
                if arr.shape != (SAMPLE_SIZE, SAMPLE_SIZE):
                    raise ValueError(f"{kind} array has shape {arr.shape}")
                rel = f"{ep}/frame_{s.frame_index}.{kind}"
                blob = arr.tobytes(order="C")
                (root / rel).write_bytes(blob)
                files[rel] = f"{fnv1a64(blob):016x}"
    except OSError as exc:
        raise ExportError(f"{exc.filename or root}: {exc.strerror}") from None
    for ep in episodes.values():
        ep["split"] = "val" if ep["episode_id"] in val else "train"
    digest = fnv1a64("".join(f"{k}:{files[k]}\n" for k in sorted(files)).encode())
    manifest = {
        "format": {"dtype": "float32", "byteorder": "little", "order": "row-major",
                   "header_bytes": 0, "shape": [SAMPLE_SIZE, SAMPLE_SIZE],
                   "kinds": [k for k in ARRAY_KINDS if any(f.endswith("." + k) for f in files)]},
        "anchors": {"d_min": norm.d_min, "d_max": norm.d_max},
        "resolution": [SAMPLE_SIZE, SAMPLE_SIZE],
        "source_resolution": None if source_resolution is None else list(source_resolution),
        "counts": {"samples": len(samples), "episodes": len(episodes),
                   "train_samples": sum(len(e["frames"]) for e in episodes.values() if e["split"] == "train"),
                   "val_samples": sum(len(e["frames"]) for e in episodes.values() if e["split"] == "val")},
        "splits": {"train": [i for i in train if f"episode_{i}" in episodes],
                   "val": [i for i in val if f"episode_{i}" in episodes]},
        "episodes": episodes,
        "files": files,
        "checksum": f"{digest:016x}",
    }
    if extra:
        manifest["meta"] = extra
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    except OSError as exc:
        raise ExportError(f"{root / 'manifest.json'}: {exc.strerror}") from None
    return manifest


def load_dataset(path, verify: bool = True):
    """Read an exported dataset back as ``(manifest, samples)``."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise ExportError(f"{root / 'manifest.json'}: {exc.strerror}") from None
    shape = tuple(manifest["format"]["shape"])
    samples = []
    for ep in sorted(manifest["episodes"].values(), key=lambda e: e["episode_id"]):
        for k in ep["frames"]:
            arrs = {}
            for kind in manifest["format"]["kinds"]:
                rel = f"episode_{ep['episode_id']}/frame_{k}.{kind}"
                try:
                    blob = (root / rel).read_bytes()
                except OSError as exc:
                    raise ExportError(f"{root / rel}: {exc.strerror}") from None
                if verify and f"{fnv1a64(blob):016x}" != manifest["files"][rel]:
                    raise ExportError(f"{root / rel}: checksum mismatch")
                arrs[kind] = np.frombuffer(blob, dtype="<f4").reshape(shape)
            samples.append(AffordanceSample(ep["episode_id"], k, arrs["depth"], arrs["goal"],
                                            arrs["target"], arrs.get("target_splat")))
    return manifest, samples


# -- episode pipeline -------------------------------------------------------

@dataclass
class LabeledEpisode:
    record: object
    episode_dir: Path
    closure: ClosureEvent
    k_star: int
    track: ContactTrack
    goal_index: int

    def depth_loader(self):
        from .harness import read_depth

        cam = self.record.camera
        frames = self.record.frames

        def load(k):
            ref = frames[k]["depth"]
            if ref is None:
                from .errors import MissingFrameData

                raise MissingFrameData(f"{self.episode_dir}: frame {k} has no depth data")
            return read_depth(self.episode_dir / ref, cam["width"], cam["height"])

        return load

    @property
    def sample_frames(self) -> list:
        return [k for k in range(self.k_star + 1) if self.track.visible[k]]


def width_signal(record, start_t: float = 0.0):
    """Aperture series of the recorded frames from ``start_t`` on; returns ``(signal, first_index)``."""
    k0 = next((i for i, f in enumerate(record.frames) if f["t"] >= start_t - TIME_EPS), len(record.frames))
    fr = record.frames[k0:]
    return WidthSignal([f["t"] for f in fr], [f["aperture"] for f in fr]), k0


def label_episode(episode_dir, params: DetectorParams = DetectorParams(), track_file=None,
                  goal_lead: float = 1.0) -> LabeledEpisode:
    """Closure detection and contact backtracking for one recorded episode.

    Only the final grasp attempt is scanned, so an earlier slipped grasp
    cannot claim the closure.
    """
    from .harness import EpisodeRecord

    episode_dir = Path(episode_dir)
    rec = EpisodeRecord.load(episode_dir)
    sig, k0 = width_signal(rec, rec.final_attempt_t)
    ev = detect_closure(sig, params.window, params.min_drop, params.min_plateau, params.plateau_tol)
    k_star = k0 + ev.index
    u, v, _ = anchor_pixel(rec, k_star)
    source = FileTrackSource(track_file) if track_file is not None else SimTrackOracle(rec)
    track = backtrack_contact(source, (u, v), k_star, rec.camera["width"], rec.camera["height"])
    return LabeledEpisode(rec, episode_dir, ev, k_star, track, goal_frame_index(rec, ev.t_star, goal_lead))


def label_dataset(episode_dirs, out_dir, val_fraction: float = 0.2, split_seed: int = 0,
                  splat_sigma: Optional[float] = 2.0, params: DetectorParams = DetectorParams()):
    """Label episodes and export one dataset; returns ``(manifest, labeled episodes)``.

    Episodes without a detectable closure are skipped (logged); if none
    remain, :class:`NoClosureFound` propagates.
    """
    labeled = []
    last_err = None
    for d in episode_dirs:
        try:
            labeled.append(label_episode(d, params))
        except NoClosureFound as exc:
            log.warning("%s: %s", d, exc)
            last_err = exc
    if not labeled:
        raise last_err or NoClosureFound("no episodes given")
    ids = [le.record.episode_id for le in labeled]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate episode ids")
    train, val = split_episodes(ids, val_fraction, split_seed)
    loaders = {le.record.episode_id: le.depth_loader() for le in labeled}
    far = labeled[0].record.far_plane

    def train_depths():
        for le in labeled:
            if le.record.episode_id in train:
                load = loaders[le.record.episode_id]
                for k in le.sample_frames + [le.goal_index]:
                    yield load(k)

    norm = compute_anchors(train_depths(), far_plane=far)
    samples = []
    for le in labeled:
        samples.extend(build_samples(le.record, le.track, loaders[le.record.episode_id], norm,
                                     le.goal_index, splat_sigma=splat_sigma))
    cam = labeled[0].record.camera
    extra = {"episodes": {str(le.record.episode_id): {"t_star": le.closure.t_star, "k_star": le.k_star,
                                                     "goal_frame": le.goal_index}
                          for le in labeled}}
    manifest = export_dataset(samples, out_dir, norm, (train, val),
                              source_resolution=(cam["height"], cam["width"]), extra=extra)
    return manifest, labeled
