import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacforge import imaging
from tacforge.imaging import BinaryTactileImage, CameraMap, rasterize_px
from tacforge.signals import (
    MarkerSet,
    TaxelConfig,
    TaxelFrame,
    marker_count_check,
    read_taxel_log,
    segment_markers,
    taxel_to_markers,
    track_markers,
    write_taxel_log,
)


def disks(centers, radii):
    return BinaryTactileImage(rasterize_px(centers, radii))


def test_segment_empty():
    assert len(segment_markers(BinaryTactileImage.blank())) == 0


def test_segment_single_disk_centroid():
    img = disks([[100.0, 200.0]], [5.0])
    ms = segment_markers(img)
    assert len(ms) == 1
    assert np.linalg.norm(ms.centroids[0] - [100, 200]) <= 0.5
    assert abs(ms.radii[0] - np.sqrt(ms.areas[0] / np.pi)) <= 0.01 * ms.radii[0]


def test_segment_discards_specks():
    px = np.zeros((imaging.IMG_H, imaging.IMG_W), dtype=np.uint8)
    px[5, 5] = 1  # single pixel: below the noise floor
    px[100:110, 100:110] = 1
    ms = segment_markers(BinaryTactileImage(px))
    assert len(ms) == 1


def test_segment_dumbbell_splits():
    img = disks([[100.0, 200.0], [109.0, 200.0]], [5.0, 5.0])
    ms = segment_markers(img)
    assert len(ms) == 2
    xs = np.sort(ms.centroids[:, 0])
    assert abs(xs[0] - 100) < 1.5 and abs(xs[1] - 109) < 1.5


@pytest.mark.parametrize("family", imaging.PATTERN_FAMILIES + imaging.SENSOR_GRIDS)
def test_segment_pattern_roundtrip(family):
    pat = imaging.make_pattern(family)
    cam = CameraMap()
    img = imaging.rasterize(pat.markers, cam)
    ms = segment_markers(img)
    assert len(ms) == len(pat.markers)
    true_px = cam.to_px(pat.markers.centers)
    tracked = track_markers(
        MarkerSet(true_px, pat.markers.radii * cam.px_per_mm,
                  np.pi * (pat.markers.radii * cam.px_per_mm) ** 2), ms, 5.0)
    assert tracked.n_matched == len(pat.markers)
    err = np.linalg.norm(tracked.displacement, axis=1)
    assert err.max() <= 0.5
    r_err = np.abs(ms.radii[tracked.cur_index]
                   - pat.markers.radii[tracked.ref_index] * cam.px_per_mm)
    assert r_err.max() <= 0.5


def test_track_identity():
    ms = segment_markers(disks([[100, 100], [200, 200]], [5, 6]))
    t = track_markers(ms, ms, 10)
    assert t.n_matched == 2
    assert np.allclose(t.displacement, 0)
    assert np.allclose(t.radius_ratio, 1.0)
    assert t.matched_fraction == 1.0


def test_track_rigid_shift():
    a = segment_markers(disks([[100, 100], [150, 100], [100, 150]], [5, 5, 5]))
    b = MarkerSet(a.centroids + [3.0, 0.0], a.radii, a.areas)
    t = track_markers(a, b, 10)
    assert t.n_matched == 3
    assert np.allclose(t.displacement, [3.0, 0.0])


def test_track_missing_marker():
    a = segment_markers(disks([[100, 100], [200, 100], [300, 100]], [5, 5, 5]))
    b = MarkerSet(a.centroids[:2], a.radii[:2], a.areas[:2])
    t = track_markers(a, b, 10)
    assert t.n_matched == 2
    assert len(t.unmatched_ref) == 1
    assert len(t.unmatched_cur) == 0


@given(shift=st.tuples(st.floats(-6, 6), st.floats(-6, 6)))
@settings(max_examples=25, deadline=None)
def test_track_recovers_shift_exactly(shift):
    # pattern spacing (48 px) is far above 2x the shift; matching is exact
    base = np.array([[x, y] for x in (100, 148, 196) for y in (100, 148)],
                    dtype=float)
    a = MarkerSet(base, np.full(6, 5.0), np.full(6, 78.5))
    b = MarkerSet(base + shift, np.full(6, 5.0), np.full(6, 78.5))
    t = track_markers(a, b, max_track_dist=15.0)
    if np.hypot(*shift) <= 15.0:
        assert t.n_matched == 6
        assert np.allclose(t.displacement, shift, atol=1e-9)


def test_marker_count_check():
    tac = segment_markers(disks([[100, 100]], [5]))
    assert marker_count_check(tac, 1)
    assert not marker_count_check(MarkerSet.empty(), 1)
    uskin = imaging.make_pattern("uSkinGrid")
    ms = segment_markers(imaging.rasterize(uskin.markers))
    assert marker_count_check(ms, 16)
    tactip = segment_markers(imaging.rasterize(
        imaging.make_pattern("TacTipRing").markers))
    assert marker_count_check(tactip, 80)


# ---------------------------------------------------------------------------
# taxel conversion
# ---------------------------------------------------------------------------

def zero_frame(ts=0.0):
    return TaxelFrame(np.zeros((4, 4, 3)), ts)


def test_taxel_zero_signal_rest_grid():
    ms = taxel_to_markers(zero_frame(), zero_frame())
    assert len(ms) == 16
    assert np.allclose(ms.areas, 300.0)
    # markers coincide with the uSkinGrid reference pattern
    pat = imaging.make_pattern("uSkinGrid")
    cam = CameraMap()
    expected = cam.to_px(pat.markers.centers)
    got = ms.centroids[np.lexsort(ms.centroids.T)]
    want = expected[np.lexsort(expected.T)]
    assert np.allclose(got, want, atol=1e-9)


def test_taxel_lateral_saturation():
    r = zero_frame()
    f = zero_frame()
    f.readings[1, 2, 0] = 3000.0  # 2e-4 * 3000 = 0.6, exactly at the clamp
    cfg = TaxelConfig()
    ms = taxel_to_markers(f, r, cfg)
    base = taxel_to_markers(zero_frame(), r, cfg)
    moved = np.flatnonzero(np.linalg.norm(ms.centroids - base.centroids, axis=1) > 0)
    assert len(moved) == 1
    dx_px = (ms.centroids[moved[0], 0] - base.centroids[moved[0], 0])
    grid_unit_px = 20.0 / (cfg.grid_max - cfg.grid_min) * 24.0
    assert np.isclose(dx_px, 0.6 * grid_unit_px)


def test_taxel_area_saturation():
    r = zero_frame()
    f = zero_frame()
    f.readings[0, 0, 2] = 1e9
    ms = taxel_to_markers(f, r)
    assert ms.areas.max() == 6000.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_taxel_outputs_always_clamped(seed):
    rng = np.random.default_rng(seed)
    f = TaxelFrame(rng.uniform(-1e7, 1e7, (4, 4, 3)))
    cfg = TaxelConfig()
    ms = taxel_to_markers(f, zero_frame(), cfg)
    assert len(ms) == 16
    assert np.all(ms.areas >= cfg.d_min) and np.all(ms.areas <= cfg.d_max)
    cam = CameraMap()
    mm = cam.to_mm(ms.centroids)
    g = mm / 20.0 * (cfg.grid_max - cfg.grid_min) + 1.5
    assert np.all(g >= cfg.grid_min - 1e-9) and np.all(g <= cfg.grid_max + 1e-9)


def test_taxel_scale_consistency():
    r = zero_frame()
    f = zero_frame()
    f.readings[2, 1, 0] = 500.0  # well below saturation
    a = taxel_to_markers(f, r, TaxelConfig())
    b = taxel_to_markers(f, r, TaxelConfig(s_x=4e-4))
    base = taxel_to_markers(zero_frame(), r, TaxelConfig())
    da = a.centroids - base.centroids
    db = b.centroids - base.centroids
    assert np.allclose(db, 2 * da)


def test_taxel_config_validation():
    with pytest.raises(ValueError):
        TaxelConfig(d_min=0)
    with pytest.raises(ValueError):
        TaxelConfig(d_min=500, d_max=400)
    with pytest.raises(ValueError):
        TaxelConfig(dx_max=0)


def test_taxel_log_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    frames = [TaxelFrame(rng.normal(0, 100, (4, 4, 3)), ts=0.1 * k)
              for k in range(5)]
    path = tmp_path / "log.csv"
    write_taxel_log(path, frames)
    back = read_taxel_log(path)
    assert len(back) == 5
    for a, b in zip(frames, back):
        assert np.array_equal(a.readings, b.readings)
        assert a.timestamp == b.timestamp
