"""Marker extraction from binary tactile images and taxel-array conversion.

Segmentation is two-stage: connected-component labeling (rough) followed by
a distance-transform watershed that splits blobs whose area exceeds 2.5x
the median component area (fine). Taxel grids (uSkin-style 4x4 arrays) are
mapped onto the same marker representation so every sensor feeds one
pipeline.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.feature import peak_local_max
from skimage.segmentation import watershed

from .imaging import (
    IMG_H,
    IMG_W,
    BinaryTactileImage,
    CameraMap,
    USKIN_GRID_MAX,
    USKIN_GRID_MIN,
    _uskin_grid_to_mm,
)

MIN_COMPONENT_AREA = 4      # px, anything smaller is binarization noise
SPLIT_FACTOR = 2.5          # fine stage splits blobs above this x median area
ELONGATION_FACTOR = 2.45    # ... or wider than this x the equivalent radius


@dataclass
class MarkerSet:
    """Extracted markers: centroids (n,2) px, radii (n,) px, areas (n,) px^2."""

    centroids: np.ndarray
    radii: np.ndarray
    areas: np.ndarray
    image_dims: tuple = (IMG_W, IMG_H)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float).reshape(-1, 2)
        self.radii = np.asarray(self.radii, dtype=float).reshape(-1)
        self.areas = np.asarray(self.areas, dtype=float).reshape(-1)

    def __len__(self):
        return self.centroids.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros(0))


@dataclass
class TrackedMarkers:
    """Mutual nearest-neighbor correspondences between two marker sets."""

    ref_index: np.ndarray
    cur_index: np.ndarray
    displacement: np.ndarray   # (k,2) px, cur - ref
    radius_ratio: np.ndarray   # (k,) cur / ref
    ref_position: np.ndarray   # (k,2) px, matched ref centroids
    unmatched_ref: np.ndarray
    unmatched_cur: np.ndarray
    n_ref: int
    n_cur: int

    @property
    def n_matched(self):
        return len(self.ref_index)

    @property
    def matched_fraction(self):
        denom = max(self.n_ref, self.n_cur)
        return self.n_matched / denom if denom else 0.0


def segment_markers(img: BinaryTactileImage) -> MarkerSet:
    """Extract marker centroids/radii from a binary tactile image.

    Rough stage: 8-connected component labeling, discarding specks below
    MIN_COMPONENT_AREA px. Fine stage: components larger than SPLIT_FACTOR
    times the median area are re-split by a distance-transform watershed
    (handles markers merged by deformation). Centroids use the pixel-center
    convention (pixel (x, y) contributes (x+0.5, y+0.5)).
    """
    fg = img.pixels.astype(bool)
    if not fg.any():
        return MarkerSet.empty()
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=int))
    areas = np.bincount(labels.ravel())[1:]
    keep = np.flatnonzero(areas >= MIN_COMPONENT_AREA) + 1
    if keep.size == 0:
        return MarkerSet.empty()
    median_area = float(np.median(areas[keep - 1]))
    boxes = ndimage.find_objects(labels)

    final = np.zeros_like(labels)
    next_label = 1
    for lab in keep:
        mask = labels == lab
        area = areas[lab - 1]
        sl = boxes[lab - 1]
        extent = max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        # a pair of merged disks stays under 2.5x the median area, so blobs
        # much wider than their equivalent-disk diameter also go to the
        # fine stage
        elongated = extent > ELONGATION_FACTOR * np.sqrt(area / np.pi)
        if area > SPLIT_FACTOR * median_area or elongated:
            dist = ndimage.distance_transform_edt(mask)
            peaks = peak_local_max(dist, min_distance=3, labels=mask,
                                   exclude_border=False)
            if len(peaks) > 1:
                seed_img = np.zeros_like(labels)
                for k, (py, px) in enumerate(peaks):
                    seed_img[py, px] = k + 1
                parts = watershed(-dist, markers=seed_img, mask=mask)
                for k in range(1, len(peaks) + 1):
                    sub = parts == k
                    if sub.sum() >= MIN_COMPONENT_AREA:
                        final[sub] = next_label
                        next_label += 1
                continue
        final[mask] = next_label
        next_label += 1

    n_final = next_label - 1
    if n_final == 0:
        return MarkerSet.empty()
    idx = np.arange(1, n_final + 1)
    cnt = np.bincount(final.ravel(), minlength=n_final + 1)[1:].astype(float)
    ys, xs = np.nonzero(final)
    vals = final[ys, xs]
    sum_x = np.bincount(vals, weights=xs, minlength=n_final + 1)[1:]
    sum_y = np.bincount(vals, weights=ys, minlength=n_final + 1)[1:]
    centroids = np.stack([sum_x / cnt + 0.5, sum_y / cnt + 0.5], axis=1)
    radii = np.sqrt(cnt / np.pi)
    return MarkerSet(centroids, radii, cnt)


def track_markers(ref: MarkerSet, cur: MarkerSet, max_track_dist=15.0) -> TrackedMarkers:
    """Match markers between frames by mutual nearest neighbor.

    Candidate pairs must be each other's nearest neighbor and closer than
    ``max_track_dist``; ties resolve greedily by ascending distance, which
    keeps the assignment deterministic and injective both ways.
    """
    n_ref, n_cur = len(ref), len(cur)
    if n_ref == 0 or n_cur == 0:
        return TrackedMarkers(
            np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, 2)),
            np.zeros(0), np.zeros((0, 2)),
            np.arange(n_ref), np.arange(n_cur), n_ref, n_cur)
    d = np.linalg.norm(ref.centroids[:, None, :] - cur.centroids[None, :, :], axis=-1)
    nn_of_ref = np.argmin(d, axis=1)
    nn_of_cur = np.argmin(d, axis=0)
    cand = [(d[i, j], i, j) for i, j in enumerate(nn_of_ref)
            if nn_of_cur[j] == i and d[i, j] <= max_track_dist]
    cand.sort()
    used_ref, used_cur = set(), set()
    pairs = []
    for dist, i, j in cand:
        if i in used_ref or j in used_cur:
            continue
        used_ref.add(i)
        used_cur.add(j)
        pairs.append((i, j))
    if pairs:
        ri = np.array([p[0] for p in pairs])
        ci = np.array([p[1] for p in pairs])
    else:
        ri = np.zeros(0, dtype=int)
        ci = np.zeros(0, dtype=int)
    disp = cur.centroids[ci] - ref.centroids[ri]
    ratio = cur.radii[ci] / np.maximum(ref.radii[ri], 1e-12)
    un_ref = np.setdiff1d(np.arange(n_ref), ri)
    un_cur = np.setdiff1d(np.arange(n_cur), ci)
    return TrackedMarkers(ri, ci, disp, ratio, ref.centroids[ri],
                          un_ref, un_cur, n_ref, n_cur)


def marker_count_check(markers: MarkerSet, min_count: int) -> bool:
    """Generation quality gate: enough markers survived."""
    return len(markers) >= min_count


# ---------------------------------------------------------------------------
# Taxel arrays (uSkin-style 4x4 grids)
# ---------------------------------------------------------------------------

@dataclass
class TaxelFrame:
    """One 4x4 grid of raw 3-axis taxel readings plus a timestamp."""

    readings: np.ndarray  # (4, 4, 3) raw sensor units
    timestamp: float = 0.0

    def __post_init__(self):
        self.readings = np.asarray(self.readings, dtype=float)
        if self.readings.shape != (4, 4, 3):
            raise ValueError(f"expected (4,4,3) readings, got {self.readings.shape}")
        if not np.all(np.isfinite(self.readings)):
            raise ValueError("non-finite taxel readings")


@dataclass
class TaxelConfig:
    s_x: float = 2e-4       # grid units per raw x unit
    s_y: float = 2e-4
    s_d: float = 0.2        # area px^2 per raw z unit
    dx_max: float = 0.6     # lateral clamp, grid units
    dy_max: float = 0.6
    d_min: float = 300.0    # rest / minimum marker area, px^2
    d_max: float = 6000.0
    grid_min: float = USKIN_GRID_MIN
    grid_max: float = USKIN_GRID_MAX

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ValueError("need 0 < d_min < d_max")
        if self.dx_max <= 0 or self.dy_max <= 0:
            raise ValueError("displacement limits must be positive")


def taxel_to_markers(frame, reference, cfg=None, cam=None, active_area=20.0) -> MarkerSet:
    """Convert a taxel frame into 16 markers on the base 4x4 grid.

    Signals are baseline-subtracted against ``reference``; lateral channels
    displace each marker from its grid position (clamped to +-dx_max and the
    grid window), the normal channel grows the marker area between d_min and
    d_max. Clamping absorbs any input range, so this never fails.
    """
    cfg = cfg or TaxelConfig()
    cam = cam or CameraMap()
    s = frame.readings - reference.readings
    rows, cols = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
    gx = cols + np.clip(cfg.s_x * s[..., 0], -cfg.dx_max, cfg.dx_max)
    gy = rows + np.clip(cfg.s_y * s[..., 1], -cfg.dy_max, cfg.dy_max)
    gx = np.clip(gx, cfg.grid_min, cfg.grid_max)
    gy = np.clip(gy, cfg.grid_min, cfg.grid_max)
    area = np.clip(cfg.d_min + cfg.s_d * s[..., 2], cfg.d_min, cfg.d_max)
    grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
    mm = _uskin_grid_to_mm(grid, active_area)
    px = cam.to_px(mm)
    areas = area.ravel()
    return MarkerSet(px, np.sqrt(areas / np.pi), areas)


_TAXEL_COLS = [f"t{i}{j}{ax}" for i in range(4) for j in range(4) for ax in "xyz"]


def write_taxel_log(path, frames):
    """Write taxel frames as CSV: timestamp_s then 48 columns t00x..t33z."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["timestamp_s"] + _TAXEL_COLS)
        for fr in frames:
            w.writerow([repr(float(fr.timestamp))]
                       + [repr(float(v)) for v in fr.readings.ravel()])


def read_taxel_log(path):
    """Read a taxel CSV log into a list of TaxelFrame."""
    frames = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["timestamp_s"] + _TAXEL_COLS:
            raise ValueError("unexpected taxel log header")
        for row in r:
            if not row:
                continue
            ts = float(row[0])
            vals = np.array([float(v) for v in row[1:]], dtype=float)
            if vals.size != 48:
                raise ValueError("taxel row must have 48 signal columns")
            frames.append(TaxelFrame(vals.reshape(4, 4, 3), ts))
    if not frames:
        raise ValueError("empty taxel log")
    return frames
