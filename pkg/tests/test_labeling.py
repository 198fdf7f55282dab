import json
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquagrasp.config import CameraMountConfig, to_mapping
from aquagrasp.errors import DegenerateAnchors, ExportError, NoClosureFound, SeedOutOfFrame
from aquagrasp.labeling import (SAMPLE_SIZE, AffordanceSample, ClosureDetector, DetectorParams,
                                FileTrackSource, NormSpec, SimTrackOracle, WidthSignal,
                                backtrack_contact, build_samples, compute_anchors, detect_closure,
                                export_dataset, fnv1a64, goal_frame_index, load_dataset,
                                oracle_heatmap, resize_bilinear, split_episodes, target_index,
                                write_track_file)
from aquagrasp.render import BACKGROUND, Observation

from .helpers import brute_force_closure, closure_corpus

W, H = 224, 160
MOUNT = CameraMountConfig()


# -- closure detection --------------------------------------------------------------------------

def test_clean_step_detected_at_the_step():
    t = np.arange(100) / 10.0
    ev = detect_closure(WidthSignal(t, np.where(t < 5.0, 1.0, 0.2)), min_drop=0.5, min_plateau=1.0)
    assert ev.t_star == pytest.approx(5.0)
    assert ev.drop_magnitude == pytest.approx(0.8)
    assert ev.plateau_len >= 1.0


def test_slow_ramp_is_not_a_closure():
    t = np.arange(200) / 10.0
    w = 1.0 - 0.04 * t  # 0.02 per 0.5 s window, far below min_drop
    with pytest.raises(NoClosureFound):
        detect_closure(WidthSignal(t, w))


def test_drop_without_plateau_is_not_a_closure():
    t = np.arange(100) / 10.0
    w = np.where((t >= 5.0) & (t < 5.5), 0.2, 1.0)
    with pytest.raises(NoClosureFound):
        detect_closure(WidthSignal(t, w))


def test_noisy_steps_within_one_window():
    rng = np.random.default_rng(0)
    t = np.arange(120) / 10.0
    for _ in range(1000):
        w = np.where(t < 5.0, 1.0, 0.2) + rng.uniform(-0.05, 0.05, t.shape)
        ev = detect_closure(WidthSignal(t, w), min_drop=0.5, plateau_tol=0.15)
        assert abs(ev.t_star - 5.0) <= 0.5


def test_detector_matches_brute_force_on_corpus():
    p = DetectorParams()
    for kind, t0, t, w in closure_corpus(300, seed=1):
        want = brute_force_closure(t, w, p.window, p.min_drop, p.min_plateau, p.plateau_tol)
        try:
            got = detect_closure(WidthSignal(t, w)).index
        except NoClosureFound:
            got = None
        assert got == want


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=60),
       st.floats(0.1, 1.0), st.floats(0.05, 0.6), st.floats(0.1, 1.5), st.floats(0.0, 0.3))
def test_detector_equals_exhaustive_scan(w, window, min_drop, plateau, tol):
    t = np.arange(len(w)) / 10.0
    want = brute_force_closure(t, w, window, min_drop, plateau, tol)
    det = ClosureDetector(DetectorParams(window, min_drop, plateau, tol))
    got = None
    for ti, wi in zip(t, w):
        ev = det.push(float(ti), float(wi))
        if ev is not None:
            got = ev.index
            break
    assert got == want


def test_width_signal_validation():
    with pytest.raises(ValueError):
        WidthSignal([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        WidthSignal([0.0, 0.1], [1.0, float("nan")])
    with pytest.raises(ValueError):
        WidthSignal([0.0, 0.1, 0.2], [1.0, 1.0])
    assert WidthSignal(np.arange(11) / 10.0, np.ones(11)).sample_rate == pytest.approx(10.0)


# -- contact backtracking -----------------------------------------------------------------------

def _record(rov_poses, objects=None, held=None):
    cam = to_mapping(MOUNT)
    frames = []
    for k, (x, y, z, yaw) in enumerate(rov_poses):
        frames.append({"t": k / 10.0, "rov": [x, y, z, yaw], "objects": objects or {},
                       "held": held, "aperture": 1.0})
    return SimpleNamespace(camera=cam, frames=frames, pitch_deg=0.0, gripper_anchor=[0.3, 0.0, -0.1])


def test_static_scene_gives_constant_track():
    rec = _record([(1.0, 1.0, 0.5, 0.2)] * 20)
    tr = backtrack_contact(SimTrackOracle(rec, seed_depth=0.8), (140.0, 90.0), 19, W, H)
    assert tr.visible.all()
    assert np.allclose(tr.u, 140.0, atol=1e-9) and np.allclose(tr.v, 90.0, atol=1e-9)


def test_translating_camera_gives_linear_track():
    # sway at s m/frame past a pool-fixed point at depth Z: u moves fx*s/Z px per frame
    Z, s, n = 1.2, 0.004, 30
    rec = _record([(1.0, 1.0 + s * k, 0.5, 0.0) for k in range(n)])
    seed_u = 150.0
    tr = backtrack_contact(SimTrackOracle(rec, seed_depth=Z), (seed_u, 70.0), n - 1, W, H)
    k = np.arange(n)
    expect = seed_u - MOUNT.fx * s * (n - 1 - k) / Z
    assert np.allclose(tr.u, expect, atol=1e-9)
    assert np.allclose(tr.v, 70.0, atol=1e-9)


def test_contact_leaving_frame_is_invisible_before_exit():
    Z, s, n = 1.0, 0.02, 30  # 5.2 px per frame
    rec = _record([(1.0, 1.0 + s * k, 0.5, 0.0) for k in range(n)])
    tr = backtrack_contact(SimTrackOracle(rec, seed_depth=Z), (100.0, 80.0), n - 1, W, H)
    u = 100.0 - MOUNT.fx * s * (n - 1 - np.arange(n)) / Z
    k_exit = int(np.argmax(u >= -0.5))
    assert not tr.visible[:k_exit].any()
    assert tr.visible[k_exit:].all()
    assert tr.at(0) is None and tr.at(n - 1) == pytest.approx((100.0, 80.0))


def test_track_follows_held_object():
    R = np.eye(3).ravel().tolist()
    objs = [{"0": [2.0 - 0.01 * k, 1.0, 0.0] + R} for k in range(20)]
    rec = _record([(1.0 - 0.01 * k, 1.0, 0.5, 0.0) for k in range(20)])
    for fr, o in zip(rec.frames, objs):
        fr["objects"] = o
        fr["held"] = 0
    tr = backtrack_contact(SimTrackOracle(rec, seed_depth=1.0), (120.0, 60.0), 10, W, H)
    # object and vehicle move together, so the attached point is fixed in the image
    assert np.allclose(tr.u, 120.0, atol=1e-9) and np.allclose(tr.v, 60.0, atol=1e-9)


def test_seed_outside_image_rejected():
    rec = _record([(1.0, 1.0, 0.5, 0.0)] * 3)
    with pytest.raises(SeedOutOfFrame):
        backtrack_contact(SimTrackOracle(rec, 1.0), (W + 3.0, 10.0), 2, W, H)


def test_track_file_round_trip(tmp_path):
    Z, s, n = 1.0, 0.02, 30
    rec = _record([(1.0, 1.0 + s * k, 0.5, 0.0) for k in range(n)])
    tr = backtrack_contact(SimTrackOracle(rec, seed_depth=Z), (100.0, 80.0), n - 1, W, H)
    write_track_file(tmp_path / "track.jsonl", tr)
    back = backtrack_contact(FileTrackSource(tmp_path / "track.jsonl"), tr.seed, n - 1, W, H)
    assert np.array_equal(back.visible, tr.visible)
    assert np.array_equal(back.u[back.visible], tr.u[tr.visible])
    (tmp_path / "bad.jsonl").write_text('{"frame": 0, "u": 1, "visible": true}\n')
    with pytest.raises(ValueError):
        FileTrackSource(tmp_path / "bad.jsonl")
    with pytest.raises(ExportError):
        FileTrackSource(tmp_path / "missing.jsonl")


def test_goal_frame_index():
    rec = _record([(1.0, 1.0, 0.5, 0.0)] * 50)
    assert goal_frame_index(rec, 3.0) == 20
    assert goal_frame_index(rec, 0.4) == 0


# -- oracle heatmap -----------------------------------------------------------------------------

def _obs_with(mask_box, track):
    labels = np.full((H, W), BACKGROUND, dtype=np.int16)
    u0, v0, s = mask_box
    labels[v0:v0 + s, u0:u0 + s] = 4
    return Observation(np.ones((H, W)), labels, {4: track}, {}, 0.0, (4,))


def test_heatmap_peaks_on_grasp_point_with_gaussian_mass():
    sigma = 3.0
    hm = oracle_heatmap(_obs_with((90, 60, 40), (110.0, 80.0)), 4, sigma)
    assert hm.max() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(hm), hm.shape) == (80, 110)
    assert hm.sum() == pytest.approx(2 * math.pi * sigma ** 2, rel=0.05)


def test_heatmap_moves_to_visible_target_when_grasp_point_hidden():
    obs = _obs_with((150, 60, 20), (110.0, 70.0))
    hm = oracle_heatmap(obs, 4, 3.0)
    r, c = np.unravel_index(np.argmax(hm), hm.shape)
    assert obs.labels[r, c] == 4
    assert (r, c) == (70, 150)


def test_heatmap_empty_cases():
    obs = _obs_with((150, 60, 20), (110.0, 70.0))
    assert not oracle_heatmap(obs, 9).any()
    assert not oracle_heatmap(obs, None).any()


# -- normalization, resize, samples -------------------------------------------------------------

def test_normalization_examples():
    n = NormSpec(0.5, 2.5)
    assert np.all(n.normalize(np.zeros((4, 4))) == 0.0)
    assert np.all(n.normalize(np.full((4, 4), 9.0)) == 1.0)
    assert n.normalize(1.5) == pytest.approx(0.5)
    with pytest.raises(DegenerateAnchors):
        NormSpec(1.0, 1.0 + 1e-7)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 5.0),
       st.lists(st.floats(-1.0, 12.0), min_size=1, max_size=30))
def test_normalization_idempotent_and_bounded(lo, span, vals):
    n = NormSpec(lo, lo + span)
    x = n.normalize(vals)
    assert np.all((0.0 <= x) & (x <= 1.0))
    assert np.allclose(n.normalize(n.denormalize(x)), x, atol=1e-12)


def test_anchors_exclude_far_background():
    d = np.full((10, 10), 10.0)
    d[2:4, 2:4] = [[0.6, 0.7], [0.8, 1.9]]
    spec = compute_anchors([d, np.full((5, 5), 10.0)], far_plane=10.0)
    assert (spec.d_min, spec.d_max) == (0.6, 1.9)
    with pytest.raises(DegenerateAnchors):
        compute_anchors([np.full((5, 5), 10.0)], far_plane=10.0)


def test_resize_bilinear_shape_and_constants():
    out = resize_bilinear(np.full((H, W), 3.25))
    assert out.shape == (SAMPLE_SIZE, SAMPLE_SIZE)
    assert np.allclose(out, 3.25, rtol=0, atol=1e-12)
    ramp = resize_bilinear(np.tile(np.arange(W, dtype=float), (H, 1)))
    assert np.all(np.diff(ramp, axis=1) > 0)


def test_target_index_examples():
    assert target_index(0.0, 0.0, W, H) == (0, 0)
    assert target_index(W - 0.01, H - 0.01, W, H) == (111, 111)
    assert target_index(3.0, 3.0, W, H) == (2, 1)
    assert target_index(-0.4, H + 0.4, W, H) == (111, 0)


def _track(n, visible):
    from aquagrasp.labeling import ContactTrack

    return ContactTrack(np.arange(n), np.full(n, 100.0), np.full(n, 50.0), np.asarray(visible), (100.0, 50.0), n - 1)


def test_build_samples_contract():
    rng = np.random.default_rng(0)
    depths = [rng.uniform(0.3, 3.0, (H, W)) for _ in range(5)]
    rec = SimpleNamespace(camera=to_mapping(MOUNT), episode_id=7)
    norm = NormSpec(0.5, 2.5)
    tr = _track(5, [False, True, True, False, True])
    out = build_samples(rec, tr, lambda k: depths[k], norm, 0, splat_sigma=2.0)
    assert [s.frame_index for s in out] == [1, 2, 4]
    for s in out:
        assert s.depth_current.shape == (SAMPLE_SIZE, SAMPLE_SIZE)
        assert 0.0 <= s.depth_current.min() and s.depth_current.max() <= 1.0
        assert s.target_map.sum() == 1.0 and s.target_map[target_index(100.0, 50.0, W, H)] == 1.0
        assert s.target_splat.max() == 1.0
    every = build_samples(rec, tr, lambda k: depths[k], norm, 0, include_invisible=True)
    assert [bool(s.target_map.any()) for s in every] == tr.visible.tolist()


# -- splits, checksums, export ------------------------------------------------------------------

def test_fnv1a64_reference_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


@settings(max_examples=100, deadline=None)
@given(st.sets(st.integers(0, 10000), min_size=1, max_size=60), st.floats(0.0, 0.9), st.integers(0, 99))
def test_splits_are_disjoint_and_cover(ids, frac, seed):
    train, val = split_episodes(ids, frac, seed)
    assert not set(train) & set(val)
    assert set(train) | set(val) == ids
    assert train  # something is always left to train on
    assert split_episodes(ids, frac, seed) == (train, val)


def _samples(n_ep=4, per=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for ep in range(n_ep):
        for k in range(per):
            tm = np.zeros((SAMPLE_SIZE, SAMPLE_SIZE), dtype=np.float32)
            tm[rng.integers(112), rng.integers(112)] = 1.0
            out.append(AffordanceSample(10 + ep, k, rng.random((112, 112), dtype=np.float32),
                                        rng.random((112, 112), dtype=np.float32), tm,
                                        rng.random((112, 112), dtype=np.float32)))
    return out


def test_export_round_trip_is_bit_exact(tmp_path):
    samples = _samples()
    m = export_dataset(samples, tmp_path / "ds", NormSpec(0.2, 3.0))
    m2, back = load_dataset(tmp_path / "ds")
    assert m2["checksum"] == m["checksum"]
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert (a.episode_id, a.frame_index) == (b.episode_id, b.frame_index)
        for x, y in ((a.depth_current, b.depth_current), (a.depth_goal, b.depth_goal),
                     (a.target_map, b.target_map), (a.target_splat, b.target_splat)):
            assert x.tobytes() == y.tobytes()
    assert not set(m["splits"]["train"]) & set(m["splits"]["val"])
    assert m["counts"]["train_samples"] + m["counts"]["val_samples"] == len(samples)
    blob = (tmp_path / "ds" / "episode_10" / "frame_0.depth").read_bytes()
    assert len(blob) == 112 * 112 * 4


def test_export_is_deterministic(tmp_path):
    a = export_dataset(_samples(), tmp_path / "a", NormSpec(0.2, 3.0))
    b = export_dataset(_samples(), tmp_path / "b", NormSpec(0.2, 3.0))
    assert a["checksum"] == b["checksum"]


def test_export_errors(tmp_path):
    with pytest.raises(ExportError):
        export_dataset([], tmp_path / "x", NormSpec(0.0, 1.0))
    with pytest.raises(ValueError):
        export_dataset(_samples(), tmp_path / "y", NormSpec(0.0, 1.0), splits=([10, 11], [11]))
    export_dataset(_samples(), tmp_path / "z", NormSpec(0.0, 1.0))
    p = tmp_path / "z" / "episode_11" / "frame_1.goal"
    raw = bytearray(p.read_bytes())
    raw[0] ^= 1
    p.write_bytes(bytes(raw))
    with pytest.raises(ExportError):
        load_dataset(tmp_path / "z")
    manifest = json.loads((tmp_path / "z" / "manifest.json").read_text())
    assert manifest["format"]["header_bytes"] == 0
