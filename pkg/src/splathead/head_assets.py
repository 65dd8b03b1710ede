"""Procedural low-poly head asset.

Builds a head-shaped open surface from a regular (u, v) parameter grid over
an ellipsoid with feature bumps, which makes the UV unwrap trivial (the grid
parameterization itself, inset by a margin so border texels stay invalid).
Shape/expression bases are seeded smooth displacement fields; the pose-
corrective basis couples the jaw rotation features to a field around the
mouth.  Everything is deterministic in the seed.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from .head_model import JOINT_NAMES, HeadModel, UvChart, rasterize_uv_chart

# Ellipsoid semi-axes of the base skull shape (meters).
HEAD_SEMI_AXES = (0.080, 0.110, 0.090)

# Default mouth region: ellipse in UV space, lower center of the chart.
MOUTH_CENTER_UV = (0.5, 0.74)
MOUTH_RADII_UV = (0.11, 0.05)


def _smooth_bumps(rng, grid_u, grid_v, n_bumps, amp_sigma,
                  u_range=(0.0, 1.0), v_range=(0.0, 1.0)):
    """Sum of seeded Gaussian bumps over the (u, v) grid, [n_v, n_u]."""
    field = np.zeros_like(grid_u)
    for _ in range(n_bumps):
        cu = rng.uniform(*u_range)
        cv = rng.uniform(*v_range)
        su = rng.uniform(0.08, 0.25)
        sv = rng.uniform(0.08, 0.25)
        amp = rng.normal(0.0, amp_sigma)
        field += amp * np.exp(-((grid_u - cu) / su) ** 2 - ((grid_v - cv) / sv) ** 2)
    return field


def _vertex_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    v0, v1, v2 = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    fn = np.cross(v1 - v0, v2 - v0)
    out = np.zeros_like(verts)
    for k in range(3):
        np.add.at(out, faces[:, k], fn)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.clip(norms, 1e-12, None)


def build_head_asset(
    seed: int = 0,
    grid_u: int = 48,
    grid_v: int = 40,
    n_shape: int = 16,
    n_expr: int = 16,
    uv_resolution: int = 64,
    uv_margin: float = 0.03,
    with_pose_basis: bool = True,
) -> HeadModel:
    """Deterministically build the synthetic head model."""
    rng = np.random.default_rng(seed)

    # Parameter grid; u sweeps azimuth (face at u=0.5 looking +Z), v sweeps
    # the polar angle from near the crown to below the chin.
    uu = np.linspace(0.0, 1.0, grid_u)
    vv = np.linspace(0.0, 1.0, grid_v)
    gu, gv = np.meshgrid(uu, vv)  # [grid_v, grid_u]
    phi = (gu - 0.5) * 2.0 * math.radians(165.0)
    theta = math.radians(25.0) + gv * math.radians(130.0)

    dirs = np.stack([
        np.sin(theta) * np.sin(phi),
        np.cos(theta),
        np.sin(theta) * np.cos(phi),
    ], axis=-1)
    ax, ay, az = HEAD_SEMI_AXES
    inv_r = np.sqrt((dirs[..., 0] / ax) ** 2 + (dirs[..., 1] / ay) ** 2
                    + (dirs[..., 2] / az) ** 2)
    radius = 1.0 / inv_r

    # Facial feature bumps (radial), fixed rather than seeded so every asset
    # keeps a face-like silhouette.
    def bump(cu, cv, su, sv, amp):
        return amp * np.exp(-((gu - cu) / su) ** 2 - ((gv - cv) / sv) ** 2)

    radius = radius + bump(0.5, 0.55, 0.045, 0.10, 0.016)   # nose
    radius = radius + bump(0.5, 0.40, 0.18, 0.06, 0.004)    # brow
    radius = radius + bump(0.5, 0.92, 0.08, 0.08, 0.007)    # chin
    radius = radius + bump(0.32, 0.62, 0.08, 0.10, 0.005)   # cheeks
    radius = radius + bump(0.68, 0.62, 0.08, 0.10, 0.005)

    verts = (radius[..., None] * dirs).reshape(-1, 3)
    n_verts = verts.shape[0]

    # Two triangles per grid quad, consistent outward winding.
    faces = []
    for j in range(grid_v - 1):
        for i in range(grid_u - 1):
            a = j * grid_u + i
            b = j * grid_u + i + 1
            c = (j + 1) * grid_u + i
            d = (j + 1) * grid_u + i + 1
            faces.append((a, c, b))
            faces.append((b, c, d))
    faces = np.asarray(faces, dtype=np.int64)

    normals = _vertex_normals(verts, faces)

    # Blendshape bases: smooth seeded fields displacing along vertex normals.
    def basis_from_fields(n_basis, amp, u_range, v_range, n_bumps=5):
        basis = np.zeros((n_verts, 3, n_basis))
        for k in range(n_basis):
            f = _smooth_bumps(rng, gu, gv, n_bumps, amp, u_range, v_range)
            basis[:, :, k] = f.reshape(-1, 1) * normals
        return basis

    shape_basis = basis_from_fields(n_shape, 0.004, (0.05, 0.95), (0.05, 0.95))
    expr_basis = basis_from_fields(n_expr, 0.003, (0.2, 0.8), (0.45, 0.98))

    # Pose correctives: only the jaw's 9 rotation features get fields, and
    # those concentrate around the mouth.
    n_posefeat = 9 * (len(JOINT_NAMES) - 1)
    pose_basis = np.zeros((n_verts, 3, n_posefeat))
    if with_pose_basis:
        jaw_block = 9 * (JOINT_NAMES.index("jaw") - 1)
        for k in range(9):
            f = _smooth_bumps(rng, gu, gv, 3, 0.0015, (0.3, 0.7), (0.6, 0.95))
            pose_basis[:, :, jaw_block + k] = f.reshape(-1, 1) * normals

    # Joint regressor: normalized Gaussian vertex weights around target spots.
    joint_targets = np.array([
        [0.0, -0.105, -0.010],   # root (neck base)
        [0.0, -0.080, 0.000],    # neck
        [0.0, -0.030, 0.000],    # head
        [0.0, -0.020, 0.015],    # jaw pivot
    ])
    joint_regressor = np.zeros((len(JOINT_NAMES), n_verts))
    for j, target in enumerate(joint_targets):
        d2 = ((verts - target) ** 2).sum(axis=1)
        w = np.exp(-d2 / (2 * 0.02 ** 2))
        joint_regressor[j] = w / w.sum()

    # Skinning weights: smooth partition by height with a jaw region in the
    # lower front.  Upper head vertices stay fully on the head joint so the
    # single-joint covariance-transport identity is exercised.
    y = verts[:, 1]
    front = verts[:, 2]

    def ramp(x, lo, hi):
        t = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        return t * t * (3 - 2 * t)

    w_neck = ramp(-y, 0.055, 0.085)
    w_root = ramp(-y, 0.090, 0.110) * 0.5
    jaw_region = ramp(-y, 0.015, 0.055) * ramp(front, 0.015, 0.055)
    w_jaw = 0.9 * jaw_region * (1.0 - w_neck)
    w_head = np.clip(1.0 - w_neck - w_root - w_jaw, 0.0, None)
    weights = np.stack([w_root, w_neck, w_head, w_jaw], axis=1)
    weights /= weights.sum(axis=1, keepdims=True)

    # UV coordinates: the grid itself, inset so border texels are invalid.
    uv = np.stack([
        uv_margin + gu.reshape(-1) * (1.0 - 2 * uv_margin),
        uv_margin + gv.reshape(-1) * (1.0 - 2 * uv_margin),
    ], axis=1)

    chart = rasterize_uv_chart(torch.from_numpy(uv), torch.from_numpy(faces),
                               uv_resolution, uv_resolution)

    model = HeadModel(
        template_vertices=torch.from_numpy(verts),
        shape_basis=torch.from_numpy(shape_basis),
        expr_basis=torch.from_numpy(expr_basis),
        pose_basis=torch.from_numpy(pose_basis),
        skinning_weights=torch.from_numpy(weights),
        joint_regressor=torch.from_numpy(joint_regressor),
        joint_parents=torch.tensor([-1, 0, 1, 2], dtype=torch.int64),
        faces=torch.from_numpy(faces),
        uv_coords=torch.from_numpy(uv),
        chart=chart,
        mouth_center_uv=MOUTH_CENTER_UV,
        mouth_radii_uv=MOUTH_RADII_UV,
    )
    return model.validate()
