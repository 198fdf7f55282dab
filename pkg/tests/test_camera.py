import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquagrasp.camera import (TABLE_MAGIC, CameraModel, RemapTable, WarpSpec, build_remap_table,
                              cached_remap_table, dump_calibration, load_calibration,
                              parse_calibration, ray_plane_point, remap_image,
                              transform_and_project, undistort_pixel)
from aquagrasp.errors import (BehindCamera, ConfigError, DimensionMismatch, InvalidDepth,
                              NonConvergent)

from .helpers import pixel_grid, translation_spec


# -- undistortion --------------------------------------------------------------

def test_principal_point_maps_to_origin(pinhole):
    assert np.allclose(undistort_pixel(pinhole, (pinhole.cx, pinhole.cy)), [0.0, 0.0])


def test_unit_normalized_coordinate():
    cam = CameraModel(100.0, 100.0, 50.0, 40.0, 200, 100)
    assert np.allclose(undistort_pixel(cam, (cam.cx + cam.fx, cam.cy)), [1.0, 0.0])


def _grid_search_inverse(cam, u, v):
    """Dense-grid inversion: repeatedly zoom a grid around the best reprojection."""
    cx, cy, half = 0.0, 0.0, 1.5
    for _ in range(12):
        xs = np.linspace(cx - half, cx + half, 201)
        ys = np.linspace(cy - half, cy + half, 201)
        X, Y = np.meshgrid(xs, ys)
        xd, yd = cam.distort(X, Y)
        err = (cam.fx * xd + cam.cx - u) ** 2 + (cam.fy * yd + cam.cy - v) ** 2
        i = np.unravel_index(np.argmin(err), err.shape)
        cx, cy = X[i], Y[i]
        half *= 0.05
    return np.array([cx, cy])


def test_undistort_matches_grid_search_at_half_diagonal():
    cam = CameraModel(200.0, 200.0, 112.0, 80.0, 224, 160, dist=(-0.1, 0, 0, 0, 0))
    u, v = cam.cx + 0.5 * cam.cx, cam.cy + 0.5 * cam.cy
    expected = _grid_search_inverse(cam, u, v)
    assert np.allclose(undistort_pixel(cam, (u, v)), expected, atol=1e-6)


def test_undistort_rejects_out_of_image_pixel(pinhole):
    with pytest.raises(ValueError):
        undistort_pixel(pinhole, (-1.0, 10.0))


def test_extreme_distortion_is_nonconvergent():
    cam = CameraModel(100.0, 100.0, 112.0, 80.0, 224, 160, dist=(-2.0, 3.0, 0, 0, -4.0))
    with pytest.raises(NonConvergent):
        undistort_pixel(cam, (223.0, 159.0))


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.45, 0.45))
def test_distort_undistort_round_trip(x, y):
    cam = CameraModel(200.0, 210.0, 112.0, 80.0, 224, 160, dist=(-0.1, 0.01, 0.001, -0.0005, 0.0))
    xd, yd = cam.distort(x, y)
    rx, ry, ok = cam.undistort(xd, yd)
    assert ok
    assert abs(rx - x) < 1e-6 and abs(ry - y) < 1e-6


# -- ray/plane and projection ------------------------------------------------------

def test_ray_plane_point_examples():
    assert np.array_equal(ray_plane_point((0.0, 0.0), 1.0), [0.0, 0.0, 1.0])
    assert np.array_equal(ray_plane_point((0.5, -0.25), 2.0), [1.0, -0.5, 2.0])


@pytest.mark.parametrize("Z", [0.0, -1.0])
def test_ray_plane_point_rejects_nonpositive_depth(Z):
    with pytest.raises(InvalidDepth):
        ray_plane_point((0.1, 0.1), Z)


@settings(max_examples=100, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.05, 20), st.floats(0.1, 10))
def test_ray_plane_point_homogeneity(x, y, Z, alpha):
    p = ray_plane_point((x, y), Z)
    assert np.allclose(p / Z, [x, y, 1.0])
    assert np.allclose(ray_plane_point((x, y), alpha * Z), alpha * p, rtol=1e-12, atol=1e-12)


def test_on_axis_point_projects_to_principal_point(distorted):
    spec = translation_spec(distorted)
    assert np.allclose(transform_and_project(spec, [0.0, 0.0, 1.3]), [distorted.cx, distorted.cy])


def test_translation_shifts_by_fx_tx(pinhole):
    X2 = ray_plane_point((0.1, -0.05), 1.0)
    base = transform_and_project(translation_spec(pinhole), X2)
    moved = transform_and_project(translation_spec(pinhole, tx=0.05), X2)
    assert np.allclose(moved - base, [pinhole.fx * 0.05, 0.0])


def test_transform_and_project_composes_step_by_step(distorted):
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    spec = WarpSpec(distorted, distorted, R, (0.02, -0.01, 0.1), 1.0)
    X2 = np.array([0.2, -0.1, 1.5])
    X1 = R @ X2 + np.array([0.02, -0.01, 0.1])
    x, y = X1[0] / X1[2], X1[1] / X1[2]
    xd, yd = distorted.distort(x, y)
    expected = [distorted.fx * xd + distorted.cx, distorted.fy * yd + distorted.cy]
    assert np.allclose(transform_and_project(spec, X2), expected)


def test_behind_camera(pinhole):
    with pytest.raises(BehindCamera):
        transform_and_project(translation_spec(pinhole, tz=-2.0), [0.0, 0.0, 1.0])


# -- WarpSpec validation ------------------------------------------------------------

def test_warp_spec_rejects_bad_rotation(pinhole):
    with pytest.raises(ValueError):
        WarpSpec(pinhole, pinhole, np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(ValueError):
        WarpSpec(pinhole, pinhole, np.diag([1.0, 1.0, -1.0]))  # reflection
    with pytest.raises(InvalidDepth):
        WarpSpec(pinhole, pinhole, plane_depth=0.0)


def test_camera_model_invariants():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1.0, 1.0, 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 10.0, 1.0, 10, 10)


# -- remap tables -------------------------------------------------------------------

def test_identity_table_is_pixel_grid(distorted):
    table = build_remap_table(translation_spec(distorted))
    u, v = pixel_grid(distorted)
    assert table.valid_mask.all()
    assert np.abs(table.map_u - u).max() < 1e-4
    assert np.abs(table.map_v - v).max() < 1e-4


def test_translation_table_offset_and_depth_scaling(pinhole):
    u, v = pixel_grid(pinhole)
    offsets = {}
    for Z in (1.0, 2.0):
        table = build_remap_table(translation_spec(pinhole, tx=0.05, Z=Z))
        m = table.valid_mask
        offsets[Z] = pinhole.fx * 0.05 / Z
        assert np.abs(table.map_u[m] - (u[m] + offsets[Z])).max() < 0.1
        assert np.abs(table.map_v[m] - v[m]).max() < 1e-4
        # columns whose shifted coordinate leaves the source are invalid
        assert not m[:, -1].any()
    assert offsets[2.0] == pytest.approx(offsets[1.0] / 2)


def test_valid_entries_inside_source_bounds(distorted):
    spec = WarpSpec(distorted, distorted, np.eye(3), (0.12, -0.07, 0.02), 0.8)
    table = build_remap_table(spec)
    m = table.valid_mask
    assert m.any() and not m.all()
    assert (table.map_u[m] >= 0).all() and (table.map_u[m] < distorted.width).all()
    assert (table.map_v[m] >= 0).all() and (table.map_v[m] < distorted.height).all()
    assert (table.map_u[~m] == -1).all()


def test_forward_reverse_composition(pinhole):
    fwd = build_remap_table(translation_spec(pinhole, tx=0.04, ty=-0.02, Z=1.0))
    rev = build_remap_table(translation_spec(pinhole, tx=-0.04, ty=0.02, Z=1.0))
    u, v = pixel_grid(pinhole)
    # follow the reverse table, then sample the forward table there
    m = rev.valid_mask
    ru, rv = rev.map_u[m], rev.map_v[m]
    iu, iv = np.rint(ru).astype(int), np.rint(rv).astype(int)
    ok = fwd.valid_mask[iv, iu]
    back_u = fwd.map_u[iv, iu][ok] + (ru - iu)[ok]
    back_v = fwd.map_v[iv, iu][ok] + (rv - iv)[ok]
    assert ok.sum() > 0.5 * pinhole.width * pinhole.height
    assert np.abs(back_u - u[m][ok]).max() < 0.5
    assert np.abs(back_v - v[m][ok]).max() < 0.5


def test_table_binary_layout(tmp_path, distorted):
    table = build_remap_table(translation_spec(distorted, tx=0.1))
    blob = table.to_bytes()
    assert blob[:4] == TABLE_MAGIC
    version, w, h = struct.unpack("<III", blob[4:16])
    assert (version, w, h) == (1, distorted.width, distorted.height)
    n = w * h
    assert len(blob) == 16 + 8 * n + (n + 7) // 8
    assert np.array_equal(np.frombuffer(blob, "<f4", n, 16).reshape(h, w), table.map_u)
    table.save(tmp_path / "t.aqrt")
    back = RemapTable.load(tmp_path / "t.aqrt")
    assert np.array_equal(back.map_u, table.map_u)
    assert np.array_equal(back.map_v, table.map_v)
    assert np.array_equal(back.valid_mask, table.valid_mask)


def test_table_rejects_bad_magic():
    with pytest.raises(ValueError):
        RemapTable.from_bytes(b"XXXX" + bytes(12))


def test_cached_table_matches_fresh_build(tmp_path, distorted):
    spec = WarpSpec(distorted, distorted, np.eye(3), (0.03, 0.0, 0.0), 1.7)
    first = cached_remap_table(spec, tmp_path)
    assert len(list(tmp_path.glob("*.aqrt"))) == 1
    fresh = build_remap_table(spec)
    loaded = RemapTable.load(next(tmp_path.glob("*.aqrt")))
    for t in (first, loaded):
        assert np.array_equal(t.map_u, fresh.map_u)
        assert np.array_equal(t.valid_mask, fresh.valid_mask)


# -- image remapping ---------------------------------------------------------------

def test_identity_remap_is_bit_exact(distorted):
    rng = np.random.default_rng(0)
    table = build_remap_table(translation_spec(distorted))
    for img in (rng.random((160, 224)).astype(np.float32), rng.integers(0, 255, (160, 224, 3), dtype=np.uint8)):
        assert np.array_equal(remap_image(table, img), img)


def test_constant_image_stays_constant(distorted):
    table = build_remap_table(WarpSpec(distorted, distorted, np.eye(3), (0.05, 0.02, 0), 1.2))
    out = remap_image(table, np.full((160, 224), 3.25), fill=-1.0)
    assert np.all(out[table.valid_mask] == 3.25)
    assert np.all(out[~table.valid_mask] == -1.0)


def test_ramp_under_integer_translation(pinhole):
    # fx * tx / Z = 200 * 0.05 / 1 = 10 px exactly
    table = build_remap_table(translation_spec(pinhole, tx=0.05))
    u, v = pixel_grid(pinhole)
    ramp = 2.0 * u + 0.5 * v
    out = remap_image(table, ramp)
    m = table.valid_mask
    assert np.allclose(out[m], (2.0 * (u + 10) + 0.5 * v)[m], atol=1e-3)


def test_nearest_sampling_copies_source_values(pinhole):
    table = build_remap_table(translation_spec(pinhole, tx=0.0123))
    img = np.arange(160 * 224, dtype=float).reshape(160, 224)
    out = remap_image(table, img, method="nearest")
    assert set(np.unique(out[table.valid_mask])) <= set(img.ravel())


def test_remap_dimension_mismatch(pinhole):
    table = build_remap_table(translation_spec(pinhole))
    with pytest.raises(DimensionMismatch):
        remap_image(table, np.zeros((100, 100)))


# -- calibration documents -----------------------------------------------------------

def test_calibration_round_trip(tmp_path, distorted):
    import yaml

    spec = WarpSpec(distorted, distorted.scaled(0.5), np.eye(3), (0.01, 0.02, 0.0), 1.4)
    path = tmp_path / "calib.yaml"
    path.write_text(yaml.safe_dump(dump_calibration(spec)))
    assert load_calibration(path) == spec


@pytest.mark.parametrize("mutate,key", [
    (lambda d: d["source"].pop("fx"), "source.fx"),
    (lambda d: d["target"].__setitem__("width", "wide"), "target.width"),
    (lambda d: d.__setitem__("translation", [0, 0]), "translation"),
    (lambda d: d.__setitem__("plane_depth", -1), "plane_depth"),
    (lambda d: d.__setitem__("bogus", 1), "bogus"),
])
def test_calibration_errors_name_the_key(distorted, mutate, key):
    data = dump_calibration(translation_spec(distorted))
    mutate(data)
    with pytest.raises(ConfigError) as exc:
        parse_calibration(data)
    assert key in str(exc.value)
