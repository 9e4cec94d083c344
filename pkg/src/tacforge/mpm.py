"""Explicit MLS-MPM simulation of the elastomer block under a rigid indenter.

A 20x20x4 mm hyperelastic block (fixed-corotated constitutive model, bottom
face clamped) is driven by a rigid SDF collider following contact sequences
from :mod:`tacforge.scenario`. The particle/grid transfer kernels are numba
compiled; the collider projection runs in numpy between the two transfer
halves so indenter shapes stay in one vectorized SDF implementation.

Internally everything is SI (meters, seconds, kg); the public surface speaks
millimetres in "face coordinates" (origin at the center of the undeformed
top face, z up, z<0 = penetration). Reported contact forces follow the
convention of a force/torque sensor under the skin: F_z > 0 in compression,
F_x/F_y positive along the direction the indenter drags the surface.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from .scenario import Phase, sdf_eval

LATTICE_M = 32          # surface displacement lattice is M x M nodes
SURFACE_BAND_MM = 0.4   # particles initially this close to the face are "surface"
LATTICE_KNN = 8


@dataclass
class MaterialParams:
    youngs_modulus: float = 1.45e5  # Pa
    poisson: float = 0.45
    density: float = 1070.0         # kg/m^3
    damping: float = 0.02           # per-substep grid velocity decay

    def __post_init__(self):
        if self.youngs_modulus <= 0:
            raise ValueError("youngs_modulus must be positive")
        if not (0 <= self.poisson < 0.5):
            raise ValueError("poisson must lie in [0, 0.5)")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if not (0 <= self.damping < 1):
            raise ValueError("damping must lie in [0, 1)")

    @property
    def lame(self):
        E, nu = self.youngs_modulus, self.poisson
        mu = E / (2 * (1 + nu))
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        return mu, lam


@dataclass
class MpmConfig:
    block_size: tuple = (20.0, 20.0, 4.0)  # mm
    grid_spacing: float = 1.0              # mm
    particles_per_cell: int = 8            # must be a perfect cube
    dt: float | None = None                # s; None -> CFL bound
    friction: float = 0.3
    settle_steps: int = 300
    force_noise_floor: float = 1e-3        # N

    def __post_init__(self):
        if self.grid_spacing <= 0:
            raise ValueError("grid_spacing must be positive")
        if self.particles_per_cell < 4:
            raise ValueError("particles_per_cell must be >= 4")
        k = round(self.particles_per_cell ** (1 / 3))
        if k ** 3 != self.particles_per_cell:
            raise ValueError("particles_per_cell must be a perfect cube (8, 27, ...)")
        if self.settle_steps < 0:
            raise ValueError("settle_steps must be >= 0")


def max_stable_dt(mat, cfg):
    """CFL bound 0.3 * dx / sqrt(E / rho)."""
    dx_m = cfg.grid_spacing * 1e-3
    return 0.3 * dx_m / np.sqrt(mat.youngs_modulus / mat.density)


class SimState:
    """Mutable particle/grid state confined to a single worker."""

    def __init__(self, mat, cfg, indenter, seed=0):
        self.mat = mat
        self.cfg = cfg
        self.indenter = indenter
        self.seed = seed

        dt_max = max_stable_dt(mat, cfg)
        if cfg.dt is None:
            self.dt = dt_max
        elif cfg.dt > dt_max * (1 + 1e-12):
            raise ValueError(
                f"dt={cfg.dt:g} s violates the CFL bound; maximum stable dt is "
                f"{dt_max:.6g} s for dx={cfg.grid_spacing} mm")
        else:
            self.dt = cfg.dt

        dx = cfg.grid_spacing * 1e-3
        block = np.asarray(cfg.block_size, dtype=float) * 1e-3
        margin = 3
        k = round(cfg.particles_per_cell ** (1 / 3))
        sp = dx / k
        axes = [np.arange(sp / 2, b - sp / 4, sp) + margin * dx for b in block]
        X, Y, Z = np.meshgrid(*axes, indexing="ij")
        self.x = np.ascontiguousarray(
            np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1))
        n = self.x.shape[0]
        self.x0 = self.x.copy()
        self.v = np.zeros((n, 3))
        self.C = np.zeros((n, 3, 3))
        self.F = np.tile(np.eye(3), (n, 1, 1))
        self.p_vol = sp ** 3
        self.p_mass = mat.density * self.p_vol

        self.dx = dx
        self.margin = margin
        nb = [int(round(b / dx)) for b in block]
        self.nx = nb[0] + 2 * margin + 1
        self.ny = nb[1] + 2 * margin + 1
        self.nz = nb[2] + margin + 6
        nn = self.nx * self.ny * self.nz
        self.grid_m = np.zeros(nn)
        self.grid_v = np.zeros((nn, 3))
        self.n_bottom_z = margin  # grid planes k <= margin are clamped

        # face coordinate frame: origin at center of the undeformed top face
        self.face_center = np.array([margin * dx + block[0] / 2,
                                     margin * dx + block[1] / 2,
                                     margin * dx + block[2]])

        idx = np.arange(nn)
        idx3 = np.stack([idx // (self.ny * self.nz),
                         idx // self.nz % self.ny,
                         idx % self.nz], axis=1)
        self.node_pos = idx3 * dx
        # face-frame node coordinates from integer indices so mirrored nodes
        # get bit-identical |coordinates| (the collider inclusion test is a
        # strict sdf < 0 and must not break mirror symmetry at the ULP level)
        center_idx = np.array([margin + nb[0] / 2.0,
                               margin + nb[1] / 2.0,
                               float(margin + nb[2])])
        band = idx3[:, 2] >= margin + nb[2] - 6
        self.band_idx = idx[band]
        self.band_pos_mm = (idx3[band] - center_idx) * cfg.grid_spacing

        # surface lattice: fixed IDW stencils over the initial surface layer
        surf = self.x0[:, 2] >= self.face_center[2] - SURFACE_BAND_MM * 1e-3
        self.surface_ids = np.flatnonzero(surf)
        half = cfg.block_size[0] / 2.0
        ax = np.linspace(-half, half, LATTICE_M)
        LX, LY = np.meshgrid(ax, ax, indexing="ij")
        nodes_mm = np.stack([LX.ravel(), LY.ravel()], axis=1)
        tree = cKDTree((self.x0[self.surface_ids, :2]
                        - self.face_center[:2]) * 1e3)
        dist, nbr = tree.query(nodes_mm, k=LATTICE_KNN)
        w = 1.0 / (dist + 1e-6)
        self.lat_nbr = nbr
        self.lat_w = w / w.sum(axis=1, keepdims=True)

        self.indenter_pose_mm = np.array([0.0, 0.0, 10.0])  # tip, face frame
        self.indenter_yaw = 0.0
        self.indenter_vel = np.zeros(3)  # m/s
        self.time = 0.0
        self.impulse = np.zeros(3)       # N*s accumulated since last reset
        self.impulse_steps = 0
        self.depth_accum = 0.0           # mm*steps over the same window

    @property
    def n_particles(self):
        return self.x.shape[0]

    def surface_lattice_mm(self):
        """(M, M, 3) lateral+normal surface displacement in mm."""
        u = (self.x[self.surface_ids] - self.x0[self.surface_ids]) * 1e3
        lat = np.einsum("nk,nkc->nc", self.lat_w, u[self.lat_nbr])
        return lat.reshape(LATTICE_M, LATTICE_M, 3)

    def reset_impulse(self):
        self.impulse[:] = 0.0
        self.impulse_steps = 0
        self.depth_accum = 0.0

    def mean_force(self):
        """Average collider reaction over the accumulation window (N)."""
        if self.impulse_steps == 0:
            return np.zeros(3)
        f = self.impulse / (self.impulse_steps * self.dt)
        return np.array([f[0], f[1], -f[2]])

    def mean_depth(self):
        """Mean indentation depth (mm) over the accumulation window.

        Frames record this rather than the instantaneous depth so a moving
        frame's depth pairs fairly with its window-averaged force.
        """
        if self.impulse_steps == 0:
            return max(0.0, -self.indenter_pose_mm[2])
        return self.depth_accum / self.impulse_steps


def init_sim(mat, cfg, indenter, seed=0):
    """Build a fresh simulation state (deterministic given the seed)."""
    return SimState(mat, cfg, indenter, seed)


@numba.njit(cache=True, fastmath=True)
def _p2g(x, v, C, F, grid_m, grid_v, dx, dt, mu0, lam0, p_mass, p_vol,
         ny, nz, n_bottom_z, damping):
    inv_dx = 1.0 / dx
    n = x.shape[0]
    grid_m[:] = 0.0
    grid_v[:, :] = 0.0
    scale = -dt * p_vol * 4.0 * inv_dx * inv_dx
    for p in range(n):
        px = x[p, 0] * inv_dx
        py = x[p, 1] * inv_dx
        pz = x[p, 2] * inv_dx
        bx = int(px - 0.5)
        by = int(py - 0.5)
        bz = int(pz - 0.5)
        fx = px - bx
        fy = py - by
        fz = pz - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2
        f00 = F[p, 0, 0]; f01 = F[p, 0, 1]; f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]; f11 = F[p, 1, 1]; f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]; f21 = F[p, 2, 1]; f22 = F[p, 2, 2]
        # rotation part of F by Higham's polar iteration (F stays near I)
        r00 = f00; r01 = f01; r02 = f02
        r10 = f10; r11 = f11; r12 = f12
        r20 = f20; r21 = f21; r22 = f22
        for _ in range(4):
            a00 = r11 * r22 - r12 * r21
            a01 = r02 * r21 - r01 * r22
            a02 = r01 * r12 - r02 * r11
            a10 = r12 * r20 - r10 * r22
            a11 = r00 * r22 - r02 * r20
            a12 = r02 * r10 - r00 * r12
            a20 = r10 * r21 - r11 * r20
            a21 = r01 * r20 - r00 * r21
            a22 = r00 * r11 - r01 * r10
            det = r00 * a00 + r01 * a10 + r02 * a20
            q = 0.5 / det
            r00 = 0.5 * r00 + q * a00
            r01 = 0.5 * r01 + q * a01
            r02 = 0.5 * r02 + q * a02
            r10 = 0.5 * r10 + q * a10
            r11 = 0.5 * r11 + q * a11
            r12 = 0.5 * r12 + q * a12
            r20 = 0.5 * r20 + q * a20
            r21 = 0.5 * r21 + q * a21
            r22 = 0.5 * r22 + q * a22
        J = (f00 * (f11 * f22 - f12 * f21)
             - f01 * (f10 * f22 - f12 * f20)
             + f02 * (f10 * f21 - f11 * f20))
        # fixed corotated: P F^T = 2 mu (F - R) F^T + lam J (J - 1) I
        two_mu = 2.0 * mu0
        d00 = f00 - r00; d01 = f01 - r01; d02 = f02 - r02
        d10 = f10 - r10; d11 = f11 - r11; d12 = f12 - r12
        d20 = f20 - r20; d21 = f21 - r21; d22 = f22 - r22
        lj = lam0 * J * (J - 1.0)
        s00 = two_mu * (d00 * f00 + d01 * f01 + d02 * f02) + lj
        s01 = two_mu * (d00 * f10 + d01 * f11 + d02 * f12)
        s02 = two_mu * (d00 * f20 + d01 * f21 + d02 * f22)
        s10 = two_mu * (d10 * f00 + d11 * f01 + d12 * f02)
        s11 = two_mu * (d10 * f10 + d11 * f11 + d12 * f12) + lj
        s12 = two_mu * (d10 * f20 + d11 * f21 + d12 * f22)
        s20 = two_mu * (d20 * f00 + d21 * f01 + d22 * f02)
        s21 = two_mu * (d20 * f10 + d21 * f11 + d22 * f12)
        s22 = two_mu * (d20 * f20 + d21 * f21 + d22 * f22) + lj
        a00 = scale * s00 + p_mass * C[p, 0, 0]
        a01 = scale * s01 + p_mass * C[p, 0, 1]
        a02 = scale * s02 + p_mass * C[p, 0, 2]
        a10 = scale * s10 + p_mass * C[p, 1, 0]
        a11 = scale * s11 + p_mass * C[p, 1, 1]
        a12 = scale * s12 + p_mass * C[p, 1, 2]
        a20 = scale * s20 + p_mass * C[p, 2, 0]
        a21 = scale * s21 + p_mass * C[p, 2, 1]
        a22 = scale * s22 + p_mass * C[p, 2, 2]
        mvx = p_mass * v[p, 0]
        mvy = p_mass * v[p, 1]
        mvz = p_mass * v[p, 2]
        for i in range(3):
            wi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
            dpx = (i - fx) * dx
            gi = bx + i
            for j in range(3):
                wij = wi * (wy0 if j == 0 else (wy1 if j == 1 else wy2))
                dpy = (j - fy) * dx
                base = (gi * ny + by + j) * nz + bz
                for kk in range(3):
                    w = wij * (wz0 if kk == 0 else (wz1 if kk == 1 else wz2))
                    dpz = (kk - fz) * dx
                    idx = base + kk
                    grid_m[idx] += w * p_mass
                    grid_v[idx, 0] += w * (mvx + a00 * dpx + a01 * dpy + a02 * dpz)
                    grid_v[idx, 1] += w * (mvy + a10 * dpx + a11 * dpy + a12 * dpz)
                    grid_v[idx, 2] += w * (mvz + a20 * dpx + a21 * dpy + a22 * dpz)
    keep = 1.0 - damping
    nn = grid_m.shape[0]
    for idx in range(nn):
        m = grid_m[idx]
        if m <= 0.0:
            continue
        if idx % nz <= n_bottom_z:
            grid_v[idx, 0] = 0.0
            grid_v[idx, 1] = 0.0
            grid_v[idx, 2] = 0.0
        else:
            grid_v[idx, 0] = grid_v[idx, 0] / m * keep
            grid_v[idx, 1] = grid_v[idx, 1] / m * keep
            grid_v[idx, 2] = grid_v[idx, 2] / m * keep


@numba.njit(cache=True, fastmath=True)
def _g2p(x, v, C, F, grid_v, dx, dt, ny, nz):
    inv_dx = 1.0 / dx
    n = x.shape[0]
    for p in range(n):
        px = x[p, 0] * inv_dx
        py = x[p, 1] * inv_dx
        pz = x[p, 2] * inv_dx
        bx = int(px - 0.5)
        by = int(py - 0.5)
        bz = int(pz - 0.5)
        fx = px - bx
        fy = py - by
        fz = pz - bz
        wx0 = 0.5 * (1.5 - fx) ** 2
        wx1 = 0.75 - (fx - 1.0) ** 2
        wx2 = 0.5 * (fx - 0.5) ** 2
        wy0 = 0.5 * (1.5 - fy) ** 2
        wy1 = 0.75 - (fy - 1.0) ** 2
        wy2 = 0.5 * (fy - 0.5) ** 2
        wz0 = 0.5 * (1.5 - fz) ** 2
        wz1 = 0.75 - (fz - 1.0) ** 2
        wz2 = 0.5 * (fz - 0.5) ** 2
        nvx = 0.0; nvy = 0.0; nvz = 0.0
        c00 = 0.0; c01 = 0.0; c02 = 0.0
        c10 = 0.0; c11 = 0.0; c12 = 0.0
        c20 = 0.0; c21 = 0.0; c22 = 0.0
        for i in range(3):
            wi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
            dpx = i - fx
            gi = bx + i
            for j in range(3):
                wij = wi * (wy0 if j == 0 else (wy1 if j == 1 else wy2))
                dpy = j - fy
                base = (gi * ny + by + j) * nz + bz
                for kk in range(3):
                    w = wij * (wz0 if kk == 0 else (wz1 if kk == 1 else wz2))
                    dpz = kk - fz
                    idx = base + kk
                    gvx = grid_v[idx, 0]
                    gvy = grid_v[idx, 1]
                    gvz = grid_v[idx, 2]
                    nvx += w * gvx
                    nvy += w * gvy
                    nvz += w * gvz
                    c00 += w * gvx * dpx
                    c01 += w * gvx * dpy
                    c02 += w * gvx * dpz
                    c10 += w * gvy * dpx
                    c11 += w * gvy * dpy
                    c12 += w * gvy * dpz
                    c20 += w * gvz * dpx
                    c21 += w * gvz * dpy
                    c22 += w * gvz * dpz
        k4 = 4.0 * inv_dx
        c00 *= k4; c01 *= k4; c02 *= k4
        c10 *= k4; c11 *= k4; c12 *= k4
        c20 *= k4; c21 *= k4; c22 *= k4
        v[p, 0] = nvx; v[p, 1] = nvy; v[p, 2] = nvz
        C[p, 0, 0] = c00; C[p, 0, 1] = c01; C[p, 0, 2] = c02
        C[p, 1, 0] = c10; C[p, 1, 1] = c11; C[p, 1, 2] = c12
        C[p, 2, 0] = c20; C[p, 2, 1] = c21; C[p, 2, 2] = c22
        x[p, 0] += dt * nvx
        x[p, 1] += dt * nvy
        x[p, 2] += dt * nvz
        f00 = F[p, 0, 0]; f01 = F[p, 0, 1]; f02 = F[p, 0, 2]
        f10 = F[p, 1, 0]; f11 = F[p, 1, 1]; f12 = F[p, 1, 2]
        f20 = F[p, 2, 0]; f21 = F[p, 2, 1]; f22 = F[p, 2, 2]
        g00 = 1.0 + dt * c00; g01 = dt * c01; g02 = dt * c02
        g10 = dt * c10; g11 = 1.0 + dt * c11; g12 = dt * c12
        g20 = dt * c20; g21 = dt * c21; g22 = 1.0 + dt * c22
        F[p, 0, 0] = g00 * f00 + g01 * f10 + g02 * f20
        F[p, 0, 1] = g00 * f01 + g01 * f11 + g02 * f21
        F[p, 0, 2] = g00 * f02 + g01 * f12 + g02 * f22
        F[p, 1, 0] = g10 * f00 + g11 * f10 + g12 * f20
        F[p, 1, 1] = g10 * f01 + g11 * f11 + g12 * f21
        F[p, 1, 2] = g10 * f02 + g11 * f12 + g12 * f22
        F[p, 2, 0] = g20 * f00 + g21 * f10 + g22 * f20
        F[p, 2, 1] = g20 * f01 + g21 * f11 + g22 * f21
        F[p, 2, 2] = g20 * f02 + g21 * f12 + g22 * f22


def _project_collider(state):
    """Project grid velocities against the indenter SDF; accumulate impulse."""
    from .scenario import Pose

    pose_mm = state.indenter_pose_mm
    br = state.indenter.bounding_radius()
    pos = state.band_pos_mm
    dxmm = state.cfg.grid_spacing
    box = ((np.abs(pos[:, 0] - pose_mm[0]) <= br + 2 * dxmm)
           & (np.abs(pos[:, 1] - pose_mm[1]) <= br + 2 * dxmm)
           & (pos[:, 2] >= pose_mm[2] - 2 * dxmm))
    if not box.any():
        return
    ids = state.band_idx[box]
    pts = state.band_pos_mm[box]
    has_mass = state.grid_m[ids] > 0.0
    if not has_mass.any():
        return
    ids = ids[has_mass]
    pts = pts[has_mass]
    pose = Pose(pose_mm.copy(), state.indenter_yaw)
    d = sdf_eval(state.indenter, pose, pts)
    inside = d < 0.0
    if not inside.any():
        return
    ids = ids[inside]
    pts = pts[inside]
    eps = 1e-3
    grad = np.stack([
        sdf_eval(state.indenter, pose, pts + [eps, 0, 0])
        - sdf_eval(state.indenter, pose, pts - [eps, 0, 0]),
        sdf_eval(state.indenter, pose, pts + [0, eps, 0])
        - sdf_eval(state.indenter, pose, pts - [0, eps, 0]),
        sdf_eval(state.indenter, pose, pts + [0, 0, eps])
        - sdf_eval(state.indenter, pose, pts - [0, 0, eps])], axis=1)
    nrm = grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-12)
    vv = state.grid_v[ids]
    rel = vv - state.indenter_vel
    vn = np.einsum("ij,ij->i", rel, nrm)
    app = vn < 0.0
    if not app.any():
        return
    ids = ids[app]
    tang = rel[app] - vn[app][:, None] * nrm[app]
    tmag = np.linalg.norm(tang, axis=1)
    slip = np.maximum(0.0, 1.0 + state.cfg.friction * vn[app] / np.maximum(tmag, 1e-12))
    newv = tang * slip[:, None] + state.indenter_vel
    dm = state.grid_m[ids][:, None] * (newv - state.grid_v[ids])
    state.impulse += dm.sum(axis=0)
    state.grid_v[ids] = newv


def _substep(state):
    mu0, lam0 = state.mat.lame
    _p2g(state.x, state.v, state.C, state.F, state.grid_m, state.grid_v,
         state.dx, state.dt, mu0, lam0, state.p_mass, state.p_vol,
         state.ny, state.nz, state.n_bottom_z, state.mat.damping)
    _project_collider(state)
    _g2p(state.x, state.v, state.C, state.F, state.grid_v,
         state.dx, state.dt, state.ny, state.nz)
    state.impulse_steps += 1
    state.depth_accum += max(0.0, -state.indenter_pose_mm[2])
    state.time += state.dt


def step(state):
    """One explicit MPM substep with the current indenter pose/velocity."""
    state.indenter_pose_mm = state.indenter_pose_mm + state.indenter_vel * state.dt * 1e3
    _substep(state)
    if not np.isfinite(state.v).all():
        raise FloatingPointError("simulation unstable: non-finite particle velocity")
    return state


@dataclass
class SimFrame:
    surface_displacement: np.ndarray  # (M, M, 3) mm
    contact_force: np.ndarray         # (3,) N
    indenter_pose: np.ndarray         # (3,) mm, face frame
    depth: float                      # mm
    phase: Phase
    time: float                       # s
    frame_index: int = 0


def _check_stable(state, frame_idx):
    if not (np.isfinite(state.v).all() and np.isfinite(state.x).all()):
        raise FloatingPointError(
            f"simulation unstable at frame {frame_idx}: non-finite state")


def run_contact_sequence(state, seq, speed=10.0, frame_rate=40.0):
    """Drive the indenter through a ContactSequence and record SimFrames.

    The indenter moves at ``speed`` mm/s in straight segments between
    waypoints; a frame is recorded every frame-rate tick while moving, and
    one settled frame at each waypoint (settle_steps of relaxation, force
    averaged over the second half of the settle window). Raises
    FloatingPointError naming the frame index if the state goes non-finite.
    """
    frames = []
    sub_per_tick = max(1, int(round(1.0 / frame_rate / state.dt)))

    def record(phase):
        lattice = state.surface_lattice_mm()
        if not np.isfinite(lattice).all():
            raise FloatingPointError(
                f"simulation unstable at frame {len(frames)}: non-finite lattice")
        frames.append(SimFrame(
            surface_displacement=lattice,
            contact_force=state.mean_force(),
            indenter_pose=state.indenter_pose_mm.copy(),
            depth=state.mean_depth(),
            phase=phase,
            time=state.time,
            frame_index=len(frames)))
        state.reset_impulse()

    def settle(phase):
        n = state.cfg.settle_steps
        state.indenter_vel = np.zeros(3)
        for s in range(n):
            if s == n - n // 2:
                state.reset_impulse()
            _substep(state)
        record(phase)

    # origin waypoint: settle and record the no-contact reference frame
    first_pose, first_phase = seq.waypoints[0]
    state.indenter_pose_mm = first_pose.translation.copy()
    state.indenter_yaw = first_pose.yaw
    state.reset_impulse()
    settle(first_phase)
    _check_stable(state, 0)

    for (_, _), (pose_b, phase) in zip(seq.waypoints[:-1], seq.waypoints[1:]):
        target = pose_b.translation
        seg = target - state.indenter_pose_mm
        dist_mm = float(np.linalg.norm(seg))
        if dist_mm > 1e-12:
            direction = seg / dist_mm
            since_tick = 0
            while dist_mm > 1e-12:
                adv = min(speed * state.dt, dist_mm)
                state.indenter_vel = direction * (adv / state.dt) * 1e-3
                state.indenter_pose_mm = state.indenter_pose_mm + direction * adv
                dist_mm -= adv
                _substep(state)
                since_tick += 1
                if since_tick == sub_per_tick:
                    record(phase)
                    since_tick = 0
            state.indenter_pose_mm = target.copy()
        settle(phase)
        _check_stable(state, len(frames))
    return frames


def flat_punch_force(E, nu, contact_halfwidth_mm, depth_mm):
    """Analytic flat-punch force F = alpha * E* * d_z with alpha = 2a.

    Follows the flat rigid punch relation with E* taken equal to E (uniform
    pressure simplification; ``nu`` is accepted for signature compatibility
    but unused). Inputs in mm, output in N.
    """
    if contact_halfwidth_mm <= 0:
        raise ValueError("contact halfwidth must be positive")
    if depth_mm < 0:
        raise ValueError("depth must be non-negative")
    return 2.0 * (contact_halfwidth_mm * 1e-3) * E * (depth_mm * 1e-3)


# ---------------------------------------------------------------------------
# Persistence: TFLD lattice files and per-sequence force CSVs
# ---------------------------------------------------------------------------

_TFLD_MAGIC = b"TFLD"


def write_lattice(path, lattice_mm):
    lat = np.asarray(lattice_mm, dtype=np.float32)
    m = lat.shape[0]
    if lat.shape != (m, m, 3):
        raise ValueError("lattice must be (M, M, 3)")
    with open(path, "wb") as f:
        f.write(_TFLD_MAGIC)
        f.write(struct.pack("<I", m))
        f.write(lat.astype("<f4").tobytes())


def read_lattice(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _TFLD_MAGIC:
            raise ValueError(f"bad lattice magic {magic!r}")
        (m,) = struct.unpack("<I", f.read(4))
        data = np.frombuffer(f.read(m * m * 3 * 4), dtype="<f4")
    if data.size != m * m * 3:
        raise ValueError("truncated lattice file")
    return data.reshape(m, m, 3).astype(float)


def lattice_sampler(lattice_mm, active_area=20.0):
    """Bilinear displacement sampler over a surface lattice.

    Returns a callable mapping (n,2) mm positions to (n,3) mm displacements;
    positions outside the face come back NaN (undefined).
    """
    lat = np.asarray(lattice_mm, dtype=float)
    m = lat.shape[0]
    half = active_area / 2.0
    scale = (m - 1) / active_area

    def sample(pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        gx = (pts[:, 0] + half) * scale
        gy = (pts[:, 1] + half) * scale
        out = np.full((pts.shape[0], 3), np.nan)
        ok = (gx >= 0) & (gx <= m - 1) & (gy >= 0) & (gy <= m - 1)
        if not ok.any():
            return out
        gx, gy = gx[ok], gy[ok]
        i0 = np.clip(np.floor(gx).astype(int), 0, m - 2)
        j0 = np.clip(np.floor(gy).astype(int), 0, m - 2)
        tx = (gx - i0)[:, None]
        ty = (gy - j0)[:, None]
        v00 = lat[i0, j0]
        v10 = lat[i0 + 1, j0]
        v01 = lat[i0, j0 + 1]
        v11 = lat[i0 + 1, j0 + 1]
        out[ok] = ((1 - tx) * (1 - ty) * v00 + tx * (1 - ty) * v10
                   + (1 - tx) * ty * v01 + tx * ty * v11)
        return out

    return sample


_FORCE_COLS = ["frame", "time_s", "phase", "depth_mm", "fx_N", "fy_N", "fz_N"]


def write_forces_csv(path, frames):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_FORCE_COLS)
        for fr in frames:
            w.writerow([fr.frame_index, repr(float(fr.time)), fr.phase.value,
                        repr(float(fr.depth)),
                        repr(float(fr.contact_force[0])),
                        repr(float(fr.contact_force[1])),
                        repr(float(fr.contact_force[2]))])


def read_forces_csv(path):
    """Read a force CSV -> list of dict rows with typed fields."""
    rows = []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != _FORCE_COLS:
            raise ValueError(f"unexpected force CSV header {header}")
        for row in r:
            if not row:
                continue
            rows.append({
                "frame": int(row[0]),
                "time_s": float(row[1]),
                "phase": Phase(row[2]),
                "depth_mm": float(row[3]),
                "force": np.array([float(row[4]), float(row[5]), float(row[6])]),
            })
    return rows
