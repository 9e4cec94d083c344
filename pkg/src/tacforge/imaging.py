"""Reference marker patterns, marker warping, and binary tactile images.

All marker geometry lives in sensor-plane millimetres (origin at the face
center, +x right, +y toward image bottom). Images are fixed 640x480 binary
bitmaps where 1 = marker (black ink on the real skins) and 0 = background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMG_W = 640
IMG_H = 480

# pitch / marker radius (mm) for the numbered pattern variants
_ARRAY_VARIANTS = {1: (2.0, 0.4), 2: (2.5, 0.5), 3: (3.0, 0.4), 4: (3.5, 0.5)}
_CIRCLE_VARIANTS = {1: (2.0, 0.4), 2: (2.5, 0.5), 3: (3.0, 0.4), 4: (3.5, 0.5)}

PATTERN_FAMILIES = (
    ["Array%d" % i for i in range(1, 5)]
    + ["Circle%d" % i for i in range(1, 5)]
    + ["Diamond%d" % i for i in range(1, 5)]
)
SENSOR_GRIDS = ["uSkinGrid", "GelSightGrid", "TacTipRing"]

# uSkin taxel grid coordinates span [-0.6, 3.6] (base grid 0..3 plus the
# saturated displacement margin); this window maps onto the active area.
USKIN_GRID_MIN = -0.6
USKIN_GRID_MAX = 3.6
USKIN_REST_AREA_PX = 300.0


@dataclass
class CameraMap:
    """Orthographic sensor-plane to image-plane mapping."""

    px_per_mm: float = 24.0
    cx: float = IMG_W / 2.0
    cy: float = IMG_H / 2.0

    def __post_init__(self):
        if self.px_per_mm * 20.0 > IMG_H:
            raise ValueError("camera maps the 20 mm active area outside the image")

    def to_px(self, pts_mm):
        pts_mm = np.asarray(pts_mm, dtype=float)
        out = np.empty_like(pts_mm)
        out[..., 0] = self.cx + self.px_per_mm * pts_mm[..., 0]
        out[..., 1] = self.cy + self.px_per_mm * pts_mm[..., 1]
        return out

    def to_mm(self, pts_px):
        pts_px = np.asarray(pts_px, dtype=float)
        out = np.empty_like(pts_px)
        out[..., 0] = (pts_px[..., 0] - self.cx) / self.px_per_mm
        out[..., 1] = (pts_px[..., 1] - self.cy) / self.px_per_mm
        return out


@dataclass
class Markers:
    """A set of disk markers: centers (n,2) and radii (n,), same length."""

    centers: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.radii = np.atleast_1d(np.asarray(self.radii, dtype=float))
        if self.centers.shape[0] == 0:
            self.centers = self.centers.reshape(0, 2)
        if self.centers.shape[0] != self.radii.shape[0]:
            raise ValueError("centers and radii length mismatch")

    def __len__(self):
        return self.centers.shape[0]


@dataclass
class MarkerPattern:
    family: str
    markers: Markers
    active_area: float = 20.0  # mm, square face side

    def __post_init__(self):
        half = self.active_area / 2.0
        c, r = self.markers.centers, self.markers.radii
        if len(self.markers) and np.any(np.abs(c) + r[:, None] > half + 1e-9):
            raise ValueError("marker outside active area")
        _check_overlap(c, r)


def _check_overlap(centers, radii):
    n = centers.shape[0]
    if n < 2:
        return
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    lim = radii[:, None] + radii[None, :]
    np.fill_diagonal(d, np.inf)
    if np.any(d <= lim):
        i, j = np.unravel_index(np.argmin(d - lim), d.shape)
        raise ValueError(
            f"markers {i} and {j} overlap (distance {d[i, j]:.3f} <= {lim[i, j]:.3f})"
        )


def _lattice(pitch, half, radius):
    n = int(np.floor(2 * half / pitch))
    if n < 1:
        raise ValueError("pitch larger than active area")
    span = (n - 1) * pitch
    xs = np.arange(n) * pitch - span / 2.0
    X, Y = np.meshgrid(xs, xs)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _uskin_grid_to_mm(grid_xy, active_area=20.0):
    """Map uSkin grid coordinates ([-0.6, 3.6] window) to sensor mm."""
    g = np.asarray(grid_xy, dtype=float)
    span = USKIN_GRID_MAX - USKIN_GRID_MIN
    return (g - 1.5) / span * active_area


def make_pattern(family, pitch_mm=None, radius_mm=None, active_area=20.0):
    """Build one of the reference marker patterns.

    Numbered families (Array1..4, Circle1..4, Diamond1..4) carry preset
    pitch/radius; explicit ``pitch_mm``/``radius_mm`` override them. The
    sensor grids (uSkinGrid, GelSightGrid, TacTipRing) have fixed layouts.
    Raises ValueError when the requested parameters produce overlapping
    markers.
    """
    half = active_area / 2.0
    base = family.rstrip("0123456789")
    idx = family[len(base):]

    if family == "uSkinGrid":
        g = np.arange(4, dtype=float)
        GX, GY = np.meshgrid(g, g)
        centers = _uskin_grid_to_mm(np.stack([GX.ravel(), GY.ravel()], axis=1),
                                    active_area)
        # rest radius matches the D_min = 300 px^2 rest area at 24 px/mm
        r = np.sqrt(USKIN_REST_AREA_PX / np.pi) / 24.0
        markers = Markers(centers, np.full(16, r))
    elif family == "GelSightGrid":
        pitch = 2.4
        xs = (np.arange(8) - 3.5) * pitch
        ys = (np.arange(7) - 3.0) * pitch
        X, Y = np.meshgrid(xs, ys)
        centers = np.stack([X.ravel(), Y.ravel()], axis=1)
        markers = Markers(centers, np.full(56, 0.5))
    elif family == "TacTipRing":
        step = 1.4
        pts = [(0.0, 0.0)]
        for ring in range(1, 7):
            cnt = 6 * ring
            ang = np.arange(cnt) * (2 * np.pi / cnt)
            R = ring * step
            pts.extend(zip(R * np.cos(ang), R * np.sin(ang)))
        centers = np.array(pts)
        markers = Markers(centers, np.full(len(pts), 0.5))
    elif base in ("Array", "Diamond", "Circle"):
        variants = _CIRCLE_VARIANTS if base == "Circle" else _ARRAY_VARIANTS
        preset = variants.get(int(idx)) if idx else None
        if preset is None and (pitch_mm is None or radius_mm is None):
            raise ValueError(f"unknown pattern variant {family!r}")
        pitch = pitch_mm if pitch_mm is not None else preset[0]
        radius = radius_mm if radius_mm is not None else preset[1]
        if pitch <= 2 * radius:
            raise ValueError("pitch <= marker diameter: markers would overlap")
        if base == "Array":
            centers = _lattice(pitch, half, radius)
        elif base == "Diamond":
            raw = _lattice(pitch, half * 1.5, radius)
            c, s = np.cos(np.pi / 4), np.sin(np.pi / 4)
            rot = raw @ np.array([[c, -s], [s, c]]).T
            keep = np.all(np.abs(rot) + radius <= half - 1e-9, axis=1)
            centers = rot[keep]
        else:  # Circle
            pts = [(0.0, 0.0)]
            m = 1
            while m * pitch + radius <= half - 1e-9:
                R = m * pitch
                cnt = int(np.floor(2 * np.pi * R / pitch))
                ang = np.arange(cnt) * (2 * np.pi / cnt)
                pts.extend(zip(R * np.cos(ang), R * np.sin(ang)))
                m += 1
            centers = np.array(pts)
        markers = Markers(centers, np.full(centers.shape[0], radius))
    else:
        raise ValueError(f"unknown pattern family {family!r}")
    return MarkerPattern(family=family, markers=markers, active_area=active_area)


def warp_markers(pattern, displacement, radius_gain=0.0, thickness_mm=4.0):
    """Displace a pattern's markers through a surface displacement field.

    ``displacement`` is a callable taking (n,2) mm positions and returning
    (n,3) mm displacements (u_x, u_y, u_z). Centers move laterally; each
    radius scales by max(0.2, 1 + radius_gain * u_z / thickness). NaNs in
    the sampled field raise ValueError. The warped set may overlap.
    """
    c = pattern.markers.centers
    u = np.asarray(displacement(c), dtype=float)
    if u.shape != (c.shape[0], 3):
        raise ValueError(f"field returned shape {u.shape}, expected {(c.shape[0], 3)}")
    if not np.all(np.isfinite(u)):
        raise ValueError("displacement field undefined (non-finite) at a marker center")
    new_c = c + u[:, :2]
    scale = np.maximum(0.2, 1.0 + radius_gain * u[:, 2] / thickness_mm)
    return Markers(new_c, pattern.markers.radii * scale)


@dataclass
class BinaryTactileImage:
    """640x480 binary bitmap; pixels[y, x] == 1 marks marker foreground."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (IMG_H, IMG_W):
            raise ValueError(f"image must be {IMG_H}x{IMG_W}, got {px.shape}")
        self.pixels = (px != 0).astype(np.uint8)

    @classmethod
    def blank(cls):
        return cls(np.zeros((IMG_H, IMG_W), dtype=np.uint8))

    def foreground_fraction(self):
        return float(self.pixels.mean())

    def __eq__(self, other):
        return isinstance(other, BinaryTactileImage) and np.array_equal(
            self.pixels, other.pixels
        )


_FIX = 256  # fixed-point scale for the pixel inclusion test


def rasterize_px(centers_px, radii_px, shape=(IMG_H, IMG_W)):
    """Draw filled disks given centers/radii in pixel units.

    A pixel (x, y) is foreground iff its center (x+0.5, y+0.5) lies inside
    some disk. The inclusion test runs in fixed-point integers so output is
    bit-exact across platforms. Disks falling outside the image are clipped.
    """
    h, w = shape
    img = np.zeros((h, w), dtype=np.uint8)
    centers_px = np.atleast_2d(np.asarray(centers_px, dtype=float))
    radii_px = np.atleast_1d(np.asarray(radii_px, dtype=float))
    for (cx, cy), r in zip(centers_px, radii_px):
        if not (np.isfinite(cx) and np.isfinite(cy) and np.isfinite(r)) or r <= 0:
            continue
        x0 = max(0, int(np.floor(cx - r - 1)))
        x1 = min(w - 1, int(np.ceil(cx + r + 1)))
        y0 = max(0, int(np.floor(cy - r - 1)))
        y1 = min(h - 1, int(np.ceil(cy + r + 1)))
        if x1 < x0 or y1 < y0:
            continue
        C_x = int(round(cx * _FIX))
        C_y = int(round(cy * _FIX))
        R2 = int(round(r * _FIX)) ** 2
        xs = np.arange(x0, x1 + 1, dtype=np.int64) * _FIX + _FIX // 2 - C_x
        ys = np.arange(y0, y1 + 1, dtype=np.int64) * _FIX + _FIX // 2 - C_y
        mask = ys[:, None] ** 2 + xs[None, :] ** 2 <= R2
        img[y0:y1 + 1, x0:x1 + 1] |= mask.astype(np.uint8)
    return img


def rasterize(markers, cam=None):
    """Rasterize mm-space markers into a BinaryTactileImage."""
    cam = cam or CameraMap()
    if len(markers) == 0:
        return BinaryTactileImage.blank()
    centers_px = cam.to_px(markers.centers)
    radii_px = markers.radii * cam.px_per_mm
    return BinaryTactileImage(rasterize_px(centers_px, radii_px))


def encode_pbm(img):
    """Encode to PBM P4 bytes: b"P4\\n640 480\\n" + packed rows."""
    header = f"P4\n{IMG_W} {IMG_H}\n".encode("ascii")
    packed = np.packbits(img.pixels, axis=1)
    return header + packed.tobytes()


def _tokens(data):
    """Yield whitespace-separated header tokens, skipping '#' comments."""
    i = 0
    n = len(data)
    while True:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PNM header")
        yield data[i:j], j + 1
        i = j


def decode_pbm(data):
    """Decode P4 bitmaps, or P5 graymaps thresholded at 128 (bright=background).

    Only the fixed 640x480 geometry is accepted; anything else raises
    ValueError.
    """
    if not isinstance(data, (bytes, bytearray)):
        raise ValueError("expected bytes")
    tok = _tokens(bytes(data))
    magic, pos = next(tok)
    if magic not in (b"P4", b"P5"):
        raise ValueError(f"unsupported PNM magic {magic!r}")
    wtok, pos = next(tok)
    htok, pos = next(tok)
    try:
        w, h = int(wtok), int(htok)
    except ValueError:
        raise ValueError("malformed PNM dimensions") from None
    if (w, h) != (IMG_W, IMG_H):
        raise ValueError(f"expected {IMG_W}x{IMG_H}, got {w}x{h}")
    if magic == b"P5":
        mtok, pos = next(tok)
        if int(mtok) != 255:
            raise ValueError("only maxval 255 P5 supported")
        raw = data[pos:pos + w * h]
        if len(raw) < w * h:
            raise ValueError("truncated P5 payload")
        gray = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
        return BinaryTactileImage((gray < 128).astype(np.uint8))
    row_bytes = (w + 7) // 8
    raw = data[pos:pos + row_bytes * h]
    if len(raw) < row_bytes * h:
        raise ValueError("truncated P4 payload")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8).reshape(h, row_bytes),
                         axis=1)[:, :w]
    return BinaryTactileImage(bits)


def write_pbm(path, img):
    with open(path, "wb") as f:
        f.write(encode_pbm(img))


def read_pbm(path):
    with open(path, "rb") as f:
        return decode_pbm(f.read())
