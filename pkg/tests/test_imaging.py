import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacforge import imaging
from tacforge.imaging import (
    BinaryTactileImage,
    CameraMap,
    Markers,
    decode_pbm,
    encode_pbm,
    make_pattern,
    rasterize,
    rasterize_px,
    warp_markers,
)

ALL_FAMILIES = imaging.PATTERN_FAMILIES + imaging.SENSOR_GRIDS


def test_sensor_grid_counts():
    assert len(make_pattern("uSkinGrid").markers) == 16
    assert len(make_pattern("GelSightGrid").markers) == 56
    assert len(make_pattern("TacTipRing").markers) == 127


def test_uskin_is_4x4_lattice():
    c = make_pattern("uSkinGrid").markers.centers
    assert len(np.unique(np.round(c[:, 0], 6))) == 4
    assert len(np.unique(np.round(c[:, 1], 6))) == 4


def test_array_count_from_pitch():
    # floor(20 / 2.5)^2 = 64
    p = make_pattern("Array", pitch_mm=2.5, radius_mm=0.5)
    assert len(p.markers) == 64


def test_touching_disks_rejected():
    with pytest.raises(ValueError, match="overlap"):
        make_pattern("Array", pitch_mm=1.0, radius_mm=0.5)


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_patterns_valid_and_pure(family):
    a = make_pattern(family)
    b = make_pattern(family)
    assert np.array_equal(a.markers.centers, b.markers.centers)
    assert np.array_equal(a.markers.radii, b.markers.radii)
    # inside the face including radius
    half = a.active_area / 2
    assert np.all(np.abs(a.markers.centers) + a.markers.radii[:, None] <= half + 1e-9)


def test_warp_identity():
    p = make_pattern("Array2")
    out = warp_markers(p, lambda c: np.zeros((len(c), 3)))
    assert np.array_equal(out.centers, p.markers.centers)
    assert np.array_equal(out.radii, p.markers.radii)


def test_warp_uniform_translation():
    p = make_pattern("Array2")
    u = np.array([0.5, 0.0, 0.0])
    out = warp_markers(p, lambda c: np.tile(u, (len(c), 1)))
    assert np.allclose(out.centers, p.markers.centers + [0.5, 0.0])
    assert np.array_equal(out.radii, p.markers.radii)


def test_warp_radius_gain_off():
    p = make_pattern("Circle2")
    out = warp_markers(p, lambda c: np.tile([0.1, -0.2, -1.0], (len(c), 1)),
                       radius_gain=0.0)
    assert np.array_equal(out.radii, p.markers.radii)


def test_warp_nan_field_rejected():
    p = make_pattern("Array3")
    with pytest.raises(ValueError, match="undefined"):
        warp_markers(p, lambda c: np.full((len(c), 3), np.nan))


@given(dx=st.floats(-2, 2), dy=st.floats(-2, 2))
@settings(max_examples=25, deadline=None)
def test_warp_translation_equivariance(dx, dy):
    p = make_pattern("Array4")
    base = warp_markers(p, lambda c: np.zeros((len(c), 3)))
    shifted = warp_markers(
        p, lambda c: np.tile([dx, dy, 0.0], (len(c), 1)))
    assert np.allclose(shifted.centers - base.centers,
                       [dx, dy], atol=1e-12)


def brute_force_disk(cx, cy, r):
    """Independent pixel-center inclusion count over the full image."""
    ys, xs = np.mgrid[0:imaging.IMG_H, 0:imaging.IMG_W]
    return ((xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r)


def test_rasterize_empty():
    img = rasterize(Markers(np.zeros((0, 2)), np.zeros(0)))
    assert img.pixels.sum() == 0


def test_rasterize_disk_pixel_count_oracle():
    # fixed-point-exact inputs so the oracle and the rasterizer agree exactly
    cx, cy, r = 100.0, 200.0, 5.0
    img = rasterize_px([[cx, cy]], [r])
    oracle = brute_force_disk(cx, cy, r)
    assert np.array_equal(img.astype(bool), oracle)
    count = img.sum()
    assert np.pi * r * r - 2 * r <= count <= np.pi * r * r + 2 * r


def test_rasterize_deterministic():
    rng = np.random.default_rng(3)
    centers = rng.uniform(50, 500, (30, 2))
    radii = rng.uniform(2, 10, 30)
    a = rasterize_px(centers, radii)
    b = rasterize_px(centers, radii)
    assert np.array_equal(a, b)


def test_rasterize_clips_offscreen():
    img = rasterize_px([[-50.0, -50.0], [1000.0, 1000.0]], [5.0, 5.0])
    assert img.sum() == 0


def test_camera_bounds():
    with pytest.raises(ValueError):
        CameraMap(px_per_mm=30.0)
    cam = CameraMap()
    px = cam.to_px(np.array([[0.0, 0.0], [1.0, -1.0]]))
    assert np.allclose(px, [[320, 240], [344, 216]])
    assert np.allclose(cam.to_mm(px), [[0, 0], [1, -1]])


def test_codec_header():
    data = encode_pbm(BinaryTactileImage.blank())
    assert data.startswith(b"P4\n640 480\n")
    assert len(data) == len(b"P4\n640 480\n") + 80 * 480


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=20, deadline=None)
def test_codec_roundtrip_random(seed):
    rng = np.random.default_rng(seed)
    px = (rng.random((imaging.IMG_H, imaging.IMG_W)) < 0.2).astype(np.uint8)
    img = BinaryTactileImage(px)
    back = decode_pbm(encode_pbm(img))
    assert np.array_equal(back.pixels, px)
    assert encode_pbm(back) == encode_pbm(img)


def test_p5_threshold_convention():
    # bright pixels (>=128) are background, dark are markers
    gray = np.full((imaging.IMG_H, imaging.IMG_W), 200, dtype=np.uint8)
    gray[10, 10] = 100
    data = f"P5\n{imaging.IMG_W} {imaging.IMG_H}\n255\n".encode() + gray.tobytes()
    img = decode_pbm(data)
    assert img.pixels.sum() == 1
    assert img.pixels[10, 10] == 1


def test_codec_rejects_bad_input():
    with pytest.raises(ValueError):
        decode_pbm(b"P6\n640 480\n255\n")
    with pytest.raises(ValueError):
        decode_pbm(b"P4\n100 100\n" + b"\x00" * 10000)
    with pytest.raises(ValueError):
        decode_pbm(b"P4\n640 480\n")  # truncated payload
