"""Deterministic marker-to-marker translation via thin-plate splines.

The translation contract: given a deformed source image, its no-contact
reference, and the target sensor's no-contact reference, produce a deformed
image in the target's marker style that carries the source deformation.
Sparse marker correspondences (source reference -> deformed) are densified
into a smooth displacement + log-size field by regularized TPS
interpolation, and the target reference markers are warped through that
field and re-rasterized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .imaging import IMG_H, IMG_W, BinaryTactileImage, rasterize_px
from .signals import MarkerSet, segment_markers, track_markers

SIZE_SCALE_CLIP = (0.2, 5.0)


class TrackingError(ValueError):
    """Too few source markers could be tracked to fit a field."""


class QualityGateError(ValueError):
    """Generated image failed the marker-count gate; carries the image."""

    def __init__(self, msg, image):
        super().__init__(msg)
        self.image = image


@dataclass
class DepthAlignment:
    """Cross-sensor scale metadata; depth pairing itself is caller-driven."""

    source_zmax: float = 1.2
    target_zmax: float = 1.2
    source_area: float = 20.0
    target_area: float = 20.0

    def __post_init__(self):
        vals = (self.source_zmax, self.target_zmax, self.source_area, self.target_area)
        if any(v <= 0 for v in vals):
            raise ValueError("alignment fields must be positive")


@dataclass
class TranslationReport:
    mean_marker_error: float
    max_marker_error: float
    pixel_iou: float
    matched_fraction: float


@dataclass
class DisplacementField:
    """Regularized TPS model of lateral displacement and log size-scale.

    Channels: (dx, dy, log size ratio). ``affine`` rows are (const, x, y)
    coefficients per channel; kernel U(r) = r^2 log r.
    """

    control_points: np.ndarray  # (k, 2) px
    weights: np.ndarray         # (k, 3)
    affine: np.ndarray          # (3, 3)
    lam: float

    def side_condition_residual(self):
        """Max violation of sum(w)=0 and first-moment conditions."""
        r1 = np.abs(self.weights.sum(axis=0))
        r2 = np.abs(self.control_points.T @ self.weights)
        return float(max(r1.max(), r2.max()))


def _tps_kernel(r2):
    # U(r) = r^2 log r = 0.5 * r^2 log(r^2), with U(0) = 0
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


def fit_displacement_field(tracked, lam=1e-3):
    """Fit the TPS system (K + lam*I) w + P a = d with P^T w = 0.

    ``lam`` is dimensionless: it scales with the squared mean control-point
    spacing so the same value works across pattern pitches. lam = 0
    interpolates the tracked displacements exactly.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    pts = np.asarray(tracked.ref_position, dtype=float)
    k = pts.shape[0]
    if k < 3:
        raise ValueError(f"need >= 3 matched markers to fit a field, got {k}")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-8) < 2:
        raise ValueError("control points are collinear")
    d = np.column_stack([tracked.displacement,
                         np.log(np.clip(tracked.radius_ratio, 1e-6, 1e6))])
    diff = pts[:, None, :] - pts[None, :, :]
    r2 = (diff ** 2).sum(axis=-1)
    K = _tps_kernel(r2)
    if lam > 0:
        mean_spacing2 = r2[r2 > 0].mean() if (r2 > 0).any() else 1.0
        K = K + lam * mean_spacing2 * np.eye(k)
    P = np.column_stack([np.ones(k), pts])
    A = np.zeros((k + 3, k + 3))
    A[:k, :k] = K
    A[:k, k:] = P
    A[k:, :k] = P.T
    rhs = np.zeros((k + 3, 3))
    rhs[:k] = d
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        raise ValueError("singular TPS system; try lambda > 0") from None
    return DisplacementField(pts, sol[:k], sol[k:], lam)


def eval_displacement_many(field, points):
    """Evaluate (dx, dy, log size) channels at (n,2) px points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    diff = pts[:, None, :] - field.control_points[None, :, :]
    r2 = (diff ** 2).sum(axis=-1)
    U = _tps_kernel(r2)
    P = np.column_stack([np.ones(pts.shape[0]), pts])
    return U @ field.weights + P @ field.affine


def eval_displacement(field, point):
    """(dx px, dy px, size_scale) at a single point."""
    out = eval_displacement_many(field, point)[0]
    return float(out[0]), float(out[1]), float(np.exp(out[2]))


def translate_image(img_t_src, img_0_src, img_0_tgt, align=None, lam=1e-3,
                    max_track_dist=15.0):
    """Translate a deformed source image into the target marker style.

    Tracks source reference -> deformed markers, fits the displacement
    field, warps the segmented target reference markers through it (lateral
    displacements scaled by the active-area ratio, sizes by the fitted
    log-scale channel), and re-rasterizes. An undeformed source reproduces
    the target reference bit-exactly. Raises TrackingError when fewer than
    half the source markers track, QualityGateError (carrying the image)
    when fewer than 60% of the target markers survive re-segmentation.
    """
    align = align or DepthAlignment()
    src_ref = segment_markers(img_0_src)
    if len(src_ref) < 3:
        raise ValueError("source reference segments to fewer than 3 markers")
    src_cur = segment_markers(img_t_src)
    tracked = track_markers(src_ref, src_cur, max_track_dist)
    if tracked.matched_fraction < 0.5:
        raise TrackingError(
            f"only {tracked.n_matched}/{tracked.n_ref} source markers tracked")

    tgt_ref = segment_markers(img_0_tgt)
    if len(tgt_ref) < 3:
        raise ValueError("target reference segments to fewer than 3 markers")

    if not tracked.displacement.any() and np.all(tracked.radius_ratio == 1.0):
        # identity field: hand back the reference unchanged (bit-exact)
        return BinaryTactileImage(img_0_tgt.pixels.copy())

    field = fit_displacement_field(tracked, lam)
    center = np.array([IMG_W / 2.0, IMG_H / 2.0])
    to_src = align.source_area / align.target_area
    src_coords = center + (tgt_ref.centroids - center) * to_src
    out = eval_displacement_many(field, src_coords)
    disp = out[:, :2] / to_src
    scale = np.clip(np.exp(out[:, 2]), *SIZE_SCALE_CLIP)
    new_centers = tgt_ref.centroids + disp
    new_radii = tgt_ref.radii * scale
    gen = BinaryTactileImage(rasterize_px(new_centers, new_radii))

    survived = segment_markers(gen)
    min_count = 0.6 * len(tgt_ref)
    if len(survived) < min_count:
        raise QualityGateError(
            f"quality gate: {len(survived)} markers < {min_count:.0f} required", gen)
    return gen


class MarkerError(NamedTuple):
    mean: float
    max: float
    matched_fraction: float


def marker_position_error(gen, truth, max_track_dist=15.0):
    """Marker-level displacement statistics between two images.

    Segments both images, matches by mutual nearest neighbor, and reports
    (mean px error, max px error, matched fraction). With zero matches the
    errors are NaN and the fraction 0.
    """
    a = segment_markers(truth)
    b = segment_markers(gen)
    tracked = track_markers(a, b, max_track_dist)
    if tracked.n_matched == 0:
        return MarkerError(float("nan"), float("nan"), 0.0)
    mag = np.linalg.norm(tracked.displacement, axis=1)
    return MarkerError(float(mag.mean()), float(mag.max()),
                       tracked.matched_fraction)


def pixel_iou(a, b):
    """Foreground intersection-over-union; 1.0 when both images are empty."""
    pa, pb = a.pixels, b.pixels
    if pa.shape != pb.shape:
        raise ValueError("image dimensions differ")
    inter = int(np.count_nonzero(pa & pb))
    union = int(np.count_nonzero(pa | pb))
    return 1.0 if union == 0 else inter / union
