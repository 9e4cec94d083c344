"""Indenter geometry catalog and contact trajectory generation.

Shapes live in a local frame with the pressing tip at z = 0 and the body
extending upward (+z); lengths are millimetres. Every shape evaluates as a
signed distance bound: negative inside, zero on the surface, and 1-Lipschitz
(so |sdf| never exceeds the true Euclidean distance). Poses place the tip in
face coordinates, where (0, 0, 0) is the center of the undeformed elastomer
surface and z < 0 means penetration.
"""

from __future__ import annotations

import enum
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

FACE_SIZE = 20.0  # mm, square elastomer face


class Phase(str, enum.Enum):
    """Four-phase contact cycle labels (normal/shear increase/decrease)."""

    NORMAL_INC = "normal_inc"
    SHEAR_INC = "shear_inc"
    SHEAR_DEC = "shear_dec"
    NORMAL_DEC = "normal_dec"


PHASE_CYCLE = (Phase.NORMAL_INC, Phase.SHEAR_INC, Phase.SHEAR_DEC, Phase.NORMAL_DEC)
LOADING_PHASES = (Phase.NORMAL_INC, Phase.SHEAR_INC)
UNLOADING_PHASES = (Phase.SHEAR_DEC, Phase.NORMAL_DEC)


@dataclass
class Pose:
    translation: np.ndarray  # (3,) mm, tip position in face coordinates
    yaw: float = 0.0

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(self.translation)) and np.isfinite(self.yaw)):
            raise ValueError("pose components must be finite")


@dataclass(frozen=True)
class IndenterSpec:
    id: str
    kind: str
    dims: dict
    seen: bool

    def __post_init__(self):
        if any(v <= 0 for v in self.dims.values()):
            raise ValueError(f"{self.id}: dims must be strictly positive")
        if self.bounding_radius() > 10.0 + 1e-9:
            raise ValueError(f"{self.id}: bounding radius exceeds 10 mm")

    def bounding_radius(self):
        """Radius of a cylinder (about the local z axis) enclosing the shape."""
        d = self.dims
        k = self.kind
        if k == "sphere" or k == "hemisphere":
            return d["r"]
        if k == "cylinder" or k == "cone":
            return d["r"]
        if k == "prism":
            return float(np.hypot(d["w"] / 2, d["d"] / 2))
        if k == "wave":
            return float(np.hypot(d["w"] / 2, d["l"] / 2))
        if k == "torus":
            return d["R"] + d["r"]
        if k == "triangle-prism" or k == "hex-prism" or k == "star-prism":
            return d["r"]
        if k == "pacman-prism":
            return d["r"]
        if k == "capsule":
            return d["r"]
        if k == "pyramid":
            return float(np.hypot(d["a"], d["a"]))
        if k == "cross-prism":
            return float(np.hypot(d["l"] / 2, d["w"] / 2))
        if k == "ring":
            return d["ro"]
        if k == "dome-array":
            return d["pitch"] / np.sqrt(2) + d["r"]
        if k == "edge":
            return float(np.hypot(d["a"], d["l"] / 2))
        if k == "ellipsoid":
            return max(d["ax"], d["ay"])
        raise ValueError(f"unknown indenter kind {k!r}")

    def height(self):
        d = self.dims
        k = self.kind
        if k in ("sphere", "torus"):
            return 2 * d["r"] if k == "sphere" else 2 * d["r"]
        if k == "hemisphere":
            return d["r"]
        if k == "capsule":
            return 2 * d["r"] + d["len"]
        if k == "ellipsoid":
            return 2 * d["az"]
        if k == "dome-array":
            return 2 * d["r"]
        return d["h"]


# unseen split follows the held-out object group used for generalization tests
_UNSEEN = {"sphere", "cone", "torus", "wave", "triangle-prism", "pacman-prism"}

_CATALOG_DIMS = {
    "sphere": {"r": 4.0},
    "cylinder": {"r": 3.0, "h": 6.0},
    "prism": {"w": 4.0, "d": 4.0, "h": 6.0},
    "cone": {"r": 3.5, "h": 6.0},
    "wave": {"w": 8.0, "l": 8.0, "h": 6.0, "amp": 1.0, "wavelength": 4.0},
    "torus": {"R": 2.5, "r": 1.5},
    "triangle-prism": {"r": 3.5, "h": 6.0},
    "pacman-prism": {"r": 3.5, "h": 6.0, "mouth_deg": 60.0},
    "hemisphere": {"r": 4.0},
    "capsule": {"r": 2.5, "len": 3.5},
    "pyramid": {"a": 3.0, "h": 6.0},
    "cross-prism": {"l": 7.0, "w": 2.0, "h": 6.0},
    "hex-prism": {"r": 3.5, "h": 6.0},
    "ring": {"ri": 2.0, "ro": 3.5, "h": 6.0},
    "dome-array": {"r": 1.5, "pitch": 5.0},
    "edge": {"a": 3.0, "h": 6.0, "l": 8.0},
    "star-prism": {"r": 3.5, "ri": 1.75, "h": 6.0},
    "ellipsoid": {"ax": 4.0, "ay": 2.5, "az": 2.5},
}


def build_indenter_catalog():
    """The 18 primitive indenters: 12 seen, 6 unseen, ordered by id."""
    specs = [IndenterSpec(id=k, kind=k, dims=dict(v), seen=k not in _UNSEEN)
             for k, v in _CATALOG_DIMS.items()]
    return sorted(specs, key=lambda s: s.id)


def get_indenter(indenter_id):
    for spec in build_indenter_catalog():
        if spec.id == indenter_id:
            return spec
    raise ValueError(f"unknown indenter id {indenter_id!r}")


# ---------------------------------------------------------------------------
# Signed distance primitives (vectorized over (n,3) / (n,2) points)
# ---------------------------------------------------------------------------

def _sd_polygon(verts, p):
    """Exact signed distance from (n,2) points to a simple polygon."""
    verts = np.asarray(verts, dtype=float)
    m = verts.shape[0]
    d = ((p - verts[0]) ** 2).sum(axis=-1)
    s = np.ones(p.shape[0])
    j = m - 1
    for i in range(m):
        e = verts[j] - verts[i]
        w = p - verts[i]
        t = np.clip((w @ e) / float(e @ e), 0.0, 1.0)
        b = w - e * t[:, None]
        d = np.minimum(d, (b * b).sum(axis=-1))
        c1 = p[:, 1] >= verts[i][1]
        c2 = p[:, 1] < verts[j][1]
        c3 = e[0] * w[:, 1] > e[1] * w[:, 0]
        flip = (c1 & c2 & c3) | (~c1 & ~c2 & ~c3)
        s = np.where(flip, -s, s)
        j = i
    return s * np.sqrt(d)


def _extrude_z(sd2, z, h):
    """Extrude a 2D profile distance field over z in [0, h]."""
    wz = np.abs(z - h / 2.0) - h / 2.0
    inside = np.minimum(np.maximum(sd2, wz), 0.0)
    outside = np.sqrt(np.maximum(sd2, 0.0) ** 2 + np.maximum(wz, 0.0) ** 2)
    return inside + outside


def _revolve(profile_verts, p):
    """Exact SDF of the solid of revolution of a (rho, z) profile polygon."""
    rho = np.hypot(p[:, 0], p[:, 1])
    return _sd_polygon(profile_verts, np.stack([rho, p[:, 2]], axis=1))


def _regular_polygon(radius, sides, phase=0.0):
    ang = phase + np.arange(sides) * (2 * np.pi / sides)
    return np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)


def _local_sdf(spec, p):
    d = spec.dims
    k = spec.kind
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    if k == "sphere":
        return np.linalg.norm(p - [0, 0, d["r"]], axis=1) - d["r"]
    if k == "hemisphere":
        sd_sphere = np.linalg.norm(p - [0, 0, d["r"]], axis=1) - d["r"]
        return np.maximum(sd_sphere, z - d["r"])
    # profiles touching the rotation axis are mirrored across it so the
    # axis itself is interior, not a spurious boundary edge
    if k == "cylinder":
        prof = [(-d["r"], 0.0), (d["r"], 0.0), (d["r"], d["h"]), (-d["r"], d["h"])]
        return _revolve(prof, p)
    if k == "cone":
        prof = [(0.0, 0.0), (d["r"], d["h"]), (-d["r"], d["h"])]
        return _revolve(prof, p)
    if k == "ring":
        prof = [(d["ri"], 0.0), (d["ro"], 0.0), (d["ro"], d["h"]), (d["ri"], d["h"])]
        return _revolve(prof, p)
    if k == "torus":
        q = np.hypot(np.hypot(x, y) - d["R"], z - d["r"])
        return q - d["r"]
    if k == "capsule":
        zz = np.clip(z, d["r"], d["r"] + d["len"])
        return np.sqrt(x * x + y * y + (z - zz) ** 2) - d["r"]
    if k == "ellipsoid":
        ax = np.array([d["ax"], d["ay"], d["az"]])
        q = (p - [0, 0, d["az"]]) / ax
        # scaled-sphere distance bound: sign-exact and 1-Lipschitz
        return (np.linalg.norm(q, axis=1) - 1.0) * ax.min()
    if k == "prism":
        half = np.array([d["w"] / 2, d["d"] / 2, d["h"] / 2])
        q = np.abs(p - [0, 0, d["h"] / 2]) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return outside + inside
    if k == "pyramid":
        a, h = d["a"], d["h"]
        L = np.hypot(a, h)
        sd = np.maximum((np.abs(x) * h - z * a) / L, (np.abs(y) * h - z * a) / L)
        return np.maximum(sd, z - h)
    if k == "dome-array":
        half = d["pitch"] / 2.0
        best = np.full(p.shape[0], np.inf)
        for sx in (-half, half):
            for sy in (-half, half):
                best = np.minimum(
                    best, np.linalg.norm(p - [sx, sy, d["r"]], axis=1) - d["r"])
        return best
    if k == "edge":
        prof = np.array([(-d["a"], d["h"]), (0.0, 0.0), (d["a"], d["h"])])
        sd2 = _sd_polygon(prof, np.stack([x, z], axis=1))
        wy = np.abs(y) - d["l"] / 2.0
        inside = np.minimum(np.maximum(sd2, wy), 0.0)
        outside = np.sqrt(np.maximum(sd2, 0) ** 2 + np.maximum(wy, 0) ** 2)
        return inside + outside
    if k == "wave":
        xs = np.linspace(-d["w"] / 2, d["w"] / 2, 65)
        zs = d["amp"] * (1.0 - np.cos(2 * np.pi * (xs + d["w"] / 2) / d["wavelength"]))
        prof = [(xs[0], d["h"])] + list(zip(xs, zs)) + [(xs[-1], d["h"])]
        sd2 = _sd_polygon(np.array(prof), np.stack([x, z], axis=1))
        wy = np.abs(y) - d["l"] / 2.0
        inside = np.minimum(np.maximum(sd2, wy), 0.0)
        outside = np.sqrt(np.maximum(sd2, 0) ** 2 + np.maximum(wy, 0) ** 2)
        return inside + outside
    # vertical extrusions of 2D profiles
    pxy = np.stack([x, y], axis=1)
    if k == "triangle-prism":
        sd2 = _sd_polygon(_regular_polygon(d["r"], 3, phase=np.pi / 2), pxy)
    elif k == "hex-prism":
        sd2 = _sd_polygon(_regular_polygon(d["r"], 6), pxy)
    elif k == "star-prism":
        ang = np.arange(10) * np.pi / 5 + np.pi / 2
        rad = np.where(np.arange(10) % 2 == 0, d["r"], d["ri"])
        sd2 = _sd_polygon(np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1), pxy)
    elif k == "cross-prism":
        hl, hw = d["l"] / 2, d["w"] / 2
        def box2(px_, hx, hy):
            q = np.abs(px_) - [hx, hy]
            return (np.linalg.norm(np.maximum(q, 0), axis=1)
                    + np.minimum(q.max(axis=1), 0.0))
        sd2 = np.minimum(box2(pxy, hl, hw), box2(pxy, hw, hl))
    elif k == "pacman-prism":
        half = np.deg2rad(d["mouth_deg"]) / 2.0
        disk = np.hypot(x, y) - d["r"]
        u1 = np.array([np.cos(half), np.sin(half)])
        u2 = np.array([np.cos(-half), np.sin(-half)])
        mouth = np.maximum(u1[0] * y - u1[1] * x, -(u2[0] * y - u2[1] * x))
        sd2 = np.maximum(disk, -mouth)
    else:
        raise ValueError(f"unknown indenter kind {k!r}")
    return _extrude_z(sd2, z, d["h"])


def sdf_eval(spec, pose, points):
    """Signed distance (mm) from world points to a posed indenter.

    Accepts a single (3,) point or an (n,3) array; returns matching shape.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    q = p - pose.translation
    if pose.yaw != 0.0:
        c, s = np.cos(-pose.yaw), np.sin(-pose.yaw)
        q = np.stack([c * q[:, 0] - s * q[:, 1],
                      s * q[:, 0] + c * q[:, 1], q[:, 2]], axis=1)
    d = _local_sdf(spec, q)
    return float(d[0]) if single else d


# ---------------------------------------------------------------------------
# Contact trajectories (four-phase press / shear cycles)
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryConfig:
    contact_points: int = 5
    grid_dx: float = 3.0       # mm, lateral offsets of the point layout
    grid_dy: float = 4.0
    depth_step: float = 0.3    # mm
    max_depth: float = 1.2     # mm
    shear_angle: float = np.deg2rad(30.0)  # radians between shear directions
    shear_distance: float = 1.0            # mm
    speed: float = 10.0        # mm/s
    frame_rate: float = 40.0   # Hz

    def __post_init__(self):
        if not (0 < self.depth_step <= self.max_depth):
            raise ValueError("need 0 < depth_step <= max_depth")
        if self.max_depth > 4.5:
            raise ValueError("max_depth exceeds 4.5 mm")
        if self.speed <= 0 or self.frame_rate <= 0:
            raise ValueError("speed and frame_rate must be positive")
        if not (0 <= self.shear_angle <= np.pi / 2):
            raise ValueError("shear_angle must lie in [0, pi/2]")

    @property
    def depth_levels(self):
        return int(np.floor(self.max_depth / self.depth_step + 1e-9))


@dataclass
class ContactSequence:
    """One four-phase contact cycle at a single (point, direction, depth)."""

    indenter: str
    waypoints: list            # [(Pose, Phase)], first waypoint at depth 0
    contact_point: np.ndarray  # (2,) mm
    direction: float           # radians
    depth: float               # mm

    def phases(self):
        return [ph for _, ph in self.waypoints]


def grid_contact_points(n=3, pitch=4.0):
    """n x n lattice of contact points centered on the face."""
    xs = (np.arange(n) - (n - 1) / 2.0) * pitch
    X, Y = np.meshgrid(xs, xs)
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def cross_contact_points(dx=3.0, dy=4.0):
    """Five-point cross layout: center plus +-dx in x and +-dy in y."""
    return np.array([[0.0, 0.0], [dx, 0.0], [-dx, 0.0], [0.0, dy], [0.0, -dy]])


def generate_trajectory(cfg, surface_points, directions_per_point, indenter_id=""):
    """Expand contact points into four-phase sequences.

    One sequence per (surface point, shear direction, depth level); shear
    directions are multiples of cfg.shear_angle starting from +x. Shear
    targets are clamped to the face so waypoints never leave it.
    """
    if directions_per_point < 1:
        raise ValueError("directions_per_point must be >= 1")
    pts = np.atleast_2d(np.asarray(surface_points, dtype=float))
    if pts.size == 0:
        raise ValueError("surface_points must be non-empty")
    half = FACE_SIZE / 2.0
    if np.any(np.abs(pts) > half + 1e-9):
        raise ValueError("contact point outside the elastomer face")
    depths = [(i + 1) * cfg.depth_step for i in range(cfg.depth_levels)]
    seqs = []
    for pt in pts:
        for k in range(directions_per_point):
            ang = k * cfg.shear_angle
            direction = np.array([np.cos(ang), np.sin(ang)])
            for depth in depths:
                p0 = Pose(np.array([pt[0], pt[1], 0.0]))
                p1 = Pose(np.array([pt[0], pt[1], -depth]))
                shear_xy = np.clip(pt + cfg.shear_distance * direction, -half, half)
                p2 = Pose(np.array([shear_xy[0], shear_xy[1], -depth]))
                waypoints = [
                    (p0, Phase.NORMAL_INC),
                    (p1, Phase.NORMAL_INC),
                    (p2, Phase.SHEAR_INC),
                    (Pose(p1.translation.copy()), Phase.SHEAR_DEC),
                    (Pose(p0.translation.copy()), Phase.NORMAL_DEC),
                ]
                seqs.append(ContactSequence(indenter_id, waypoints,
                                            pt.copy(), float(ang), float(depth)))
    return seqs


def load_scenario(path):
    """Read a scenario TOML file -> (TrajectoryConfig, indenter id)."""
    with open(path, "rb") as f:
        doc = _toml.load(f)
    t = doc.get("trajectory", {})
    cfg = TrajectoryConfig(
        grid_dx=t.get("dx_mm", 3.0),
        grid_dy=t.get("dy_mm", 4.0),
        depth_step=t.get("dz_mm", 0.3),
        max_depth=t.get("zmax_mm", 1.2),
        shear_angle=np.deg2rad(t.get("theta_deg", 30.0)),
        shear_distance=t.get("shear_mm", 1.0),
        speed=t.get("speed_mm_s", 10.0),
        frame_rate=t.get("frame_rate_hz", 40.0),
    )
    indenter_id = doc.get("indenter", {}).get("id", "prism")
    return cfg, indenter_id
