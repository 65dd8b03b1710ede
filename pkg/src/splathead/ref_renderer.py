"""Deterministic differentiable reference splat renderer.

Projection is EWA-style: the 3D covariance is pushed through the camera
rotation and the pinhole projection Jacobian at the mean, then floored with
a small isotropic low-pass term.  Compositing is front-to-back alpha
blending over a global depth sort (stable, ties by input index).

Two compositing paths share one set of constants and semantics:

* ``composite`` loops splats sequentially per pixel -- the clarity path used
  as the arithmetic ground truth in tests;
* ``render`` vectorizes the same math over (pixel, splat) pairs restricted
  to each splat's support box, which is what training and evaluation call.

A splat contributes to a pixel only when the pixel center lies inside the
splat's axis-aligned support box of ``SUPPORT_SIGMA`` projected standard
deviations; beyond it the Gaussian weight is below exp(-SUPPORT_SIGMA^2/2)
and is treated as zero.  The fast rasterizer implements the identical rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .splat_core import GaussianSet, sh_eval

COV2D_FLOOR = 0.3          # px^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.99         # per-splat opacity ceiling after falloff
TRANSMITTANCE_CUTOFF = 1e-4  # stop compositing once this little light remains
SUPPORT_SIGMA = 5.0        # support box half-width in projected sigmas


@dataclass
class Camera:
    """Pinhole camera with an OpenCV-style world-to-camera rigid transform.

    Camera space: x right, y down, z forward.  Pixel (row r, col c) has its
    center at image coordinates (c + 0.5, r + 0.5).
    """

    rotation: torch.Tensor     # [3, 3] world-to-camera
    translation: torch.Tensor  # [3]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("camera requires near < far")

    def to_world(self):
        """Camera center in world coordinates."""
        return -self.rotation.transpose(0, 1) @ self.translation

    def world_to_cam(self, points: torch.Tensor) -> torch.Tensor:
        rot = self.rotation.to(points.dtype)
        t = self.translation.to(points.dtype)
        return points @ rot.transpose(0, 1) + t

    def cast(self, dtype):
        return Camera(self.rotation.to(dtype), self.translation.to(dtype),
                      self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height, self.near, self.far)

    @staticmethod
    def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg=40.0,
                width=64, height=64, near=0.05, far=100.0) -> "Camera":
        eye = torch.as_tensor(eye, dtype=torch.float64)
        target = torch.as_tensor(target, dtype=torch.float64)
        up = torch.as_tensor(up, dtype=torch.float64)
        fwd = target - eye
        fwd = fwd / torch.linalg.vector_norm(fwd)
        right = torch.linalg.cross(fwd, up)
        right = right / torch.linalg.vector_norm(right)
        down = torch.linalg.cross(fwd, right)
        rot = torch.stack([right, down, fwd])  # rows: camera axes in world
        trans = -rot @ eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return Camera(rotation=rot, translation=trans, fx=f, fy=f,
                      cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height, near=near, far=far)


@dataclass
class Splat2D:
    mean2d: torch.Tensor   # [2] pixel coordinates
    cov2d: torch.Tensor    # [2, 2] symmetric, includes the low-pass floor
    depth: torch.Tensor    # camera-space z
    opacity: torch.Tensor  # scalar
    rgb: torch.Tensor      # [3]


def _support_box(mean_x, mean_y, radius, width, height):
    """Integer pixel box whose centers fall inside the radius; None-equivalent
    boxes are signalled by c0 > c1 / r0 > r1."""
    c0 = torch.ceil(mean_x - radius - 0.5)
    c1 = torch.floor(mean_x + radius - 0.5)
    r0 = torch.ceil(mean_y - radius - 0.5)
    r1 = torch.floor(mean_y + radius - 0.5)
    inside = (c1 >= 0) & (c0 <= width - 1) & (r1 >= 0) & (r0 <= height - 1)
    c0 = c0.clamp(0, width - 1).long()
    c1 = c1.clamp(0, width - 1).long()
    r0 = r0.clamp(0, height - 1).long()
    r1 = r1.clamp(0, height - 1).long()
    return c0, c1, r0, r1, inside


def project_gaussians(gaussians: GaussianSet, cam: Camera):
    """Vectorized projection of all Gaussians.

    Returns a dict of per-splat tensors plus a ``keep`` mask; splats behind
    the near plane, beyond the far plane, or whose support box misses the
    image are culled.  All continuous quantities stay on the autograd graph;
    the support boxes are computed from detached values.
    """
    dtype = gaussians.positions.dtype
    c = cam.cast(dtype)
    p_cam = c.world_to_cam(gaussians.positions)
    x, y, z = p_cam.unbind(-1)

    z_safe = z.clamp_min(1e-9)
    mean_x = c.fx * x / z_safe + c.cx
    mean_y = c.fy * y / z_safe + c.cy

    # J @ R pushes world covariance directly to image space.
    zero = torch.zeros_like(z)
    jac = torch.stack([
        torch.stack([c.fx / z_safe, zero, -c.fx * x / (z_safe * z_safe)], dim=-1),
        torch.stack([zero, c.fy / z_safe, -c.fy * y / (z_safe * z_safe)], dim=-1),
    ], dim=-2)  # [N, 2, 3]
    m = jac @ c.rotation.unsqueeze(0)
    cov2d = m @ gaussians.covariances @ m.transpose(-1, -2)
    floor = torch.eye(2, dtype=dtype) * COV2D_FLOOR
    cov2d = cov2d + floor

    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    d = cov2d[:, 1, 1]
    lam_max = 0.5 * (a + d) + torch.sqrt((0.5 * (a - d)) ** 2 + b * b)
    radius = SUPPORT_SIGMA * torch.sqrt(lam_max)

    with torch.no_grad():
        c0, c1, r0, r1, on_image = _support_box(
            mean_x.detach(), mean_y.detach(), radius.detach(),
            cam.width, cam.height)
        keep = (z.detach() > cam.near) & (z.detach() < cam.far) & on_image

    view_dir = gaussians.positions - c.to_world()
    rgb = sh_eval(gaussians.sh_coeffs, view_dir)

    return {
        "mean_x": mean_x, "mean_y": mean_y, "cov2d": cov2d, "depth": z,
        "opacity": gaussians.opacities, "rgb": rgb,
        "c0": c0, "c1": c1, "r0": r0, "r1": r1, "keep": keep,
    }


def project(gaussians: GaussianSet, cam: Camera, index: int = 0):
    """Single-splat projection; returns a Splat2D or None when culled."""
    fields = project_gaussians(gaussians, cam)
    if not bool(fields["keep"][index]):
        return None
    return Splat2D(
        mean2d=torch.stack([fields["mean_x"][index], fields["mean_y"][index]]),
        cov2d=fields["cov2d"][index],
        depth=fields["depth"][index],
        opacity=fields["opacity"][index],
        rgb=fields["rgb"][index],
    )


def composite(splats, pixel_xy, background=None):
    """Front-to-back over-compositing of depth-sorted splats at one pixel.

    ``splats`` must already be sorted ascending by depth (ties by original
    index).  Returns (rgb, alpha).  This sequential loop is the arithmetic
    reference: the vectorized renderer and the fast rasterizer reproduce it.
    """
    if not splats:
        dtype = pixel_xy.dtype if torch.is_tensor(pixel_xy) else torch.float64
        bg = torch.zeros(3, dtype=dtype) if background is None else background
        return bg.clone(), torch.zeros((), dtype=dtype)
    dtype = splats[0].rgb.dtype
    pixel_xy = torch.as_tensor(pixel_xy, dtype=dtype)
    color = torch.zeros(3, dtype=dtype)
    transmittance = torch.ones((), dtype=dtype)
    for s in splats:
        if float(transmittance) <= TRANSMITTANCE_CUTOFF:
            break
        d = pixel_xy - s.mean2d
        a, b, c = s.cov2d[0, 0], s.cov2d[0, 1], s.cov2d[1, 1]
        det = a * c - b * b
        quad = (c * d[0] * d[0] - 2.0 * b * d[0] * d[1] + a * d[1] * d[1]) / det
        alpha = torch.clamp(s.opacity * torch.exp(-0.5 * quad), max=ALPHA_CLAMP)
        color = color + s.rgb * alpha * transmittance
        transmittance = transmittance * (1.0 - alpha)
    if background is not None:
        color = color + background * transmittance
    return color, 1.0 - transmittance


def render(gaussians: GaussianSet, cam: Camera, background=None,
           full_support: bool = False, clamp: bool = True,
           return_alpha: bool = False):
    """Render a GaussianSet to an [H, W, 3] image in [0, 1].

    Deterministic for fixed inputs and differentiable almost everywhere with
    respect to every Gaussian parameter (and, through the deformation, the
    head parameters).  ``full_support`` disables the per-splat support box
    (every splat reaches every pixel), which removes the last discrete
    boundary for finite-difference probes.  ``clamp=False`` returns the raw
    composited image for training losses.
    """
    height, width = cam.height, cam.width
    dtype = gaussians.positions.dtype if len(gaussians) else torch.float64
    bg = torch.zeros(3, dtype=dtype) if background is None else \
        torch.as_tensor(background, dtype=dtype)

    if len(gaussians) == 0:
        image = bg.expand(height, width, 3).clone()
        if return_alpha:
            return image, torch.zeros(height, width, dtype=dtype)
        return image

    fields = project_gaussians(gaussians, cam)
    keep = fields["keep"]
    if not bool(keep.any()):
        image = bg.expand(height, width, 3).clone()
        if return_alpha:
            return image, torch.zeros(height, width, dtype=dtype)
        return image

    keep_idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    order = torch.argsort(fields["depth"].detach()[keep_idx], stable=True)
    sel = keep_idx[order]

    mean_x = fields["mean_x"][sel]
    mean_y = fields["mean_y"][sel]
    cov2d = fields["cov2d"][sel]
    opacity = fields["opacity"][sel]
    rgb = fields["rgb"][sel]

    if full_support:
        c0 = torch.zeros_like(sel)
        c1 = torch.full_like(sel, width - 1)
        r0 = torch.zeros_like(sel)
        r1 = torch.full_like(sel, height - 1)
    else:
        c0, c1, r0, r1 = (fields[k][sel] for k in ("c0", "c1", "r0", "r1"))

    # Expand (splat, support box) into flat (pixel, splat) pairs; pairs are
    # generated in depth order, so a stable sort by pixel id leaves each
    # pixel's pairs front-to-back.
    box_w = c1 - c0 + 1
    box_h = r1 - r0 + 1
    counts = box_w * box_h
    total = int(counts.sum())
    pair_splat = torch.repeat_interleave(
        torch.arange(sel.shape[0], dtype=torch.int64), counts)
    starts = torch.cumsum(counts, 0) - counts
    offs = torch.arange(total, dtype=torch.int64) - starts[pair_splat]
    local_r = offs // box_w[pair_splat]
    local_c = offs - local_r * box_w[pair_splat]
    pix_r = r0[pair_splat] + local_r
    pix_c = c0[pair_splat] + local_c
    pixel_id = pix_r * width + pix_c

    sort_idx = torch.argsort(pixel_id, stable=True)
    pixel_id = pixel_id[sort_idx]
    pair_splat = pair_splat[sort_idx]
    pix_x = (pixel_id % width).to(dtype) + 0.5
    pix_y = torch.div(pixel_id, width, rounding_mode="floor").to(dtype) + 0.5

    a = cov2d[pair_splat, 0, 0]
    b = cov2d[pair_splat, 0, 1]
    d = cov2d[pair_splat, 1, 1]
    det = a * d - b * b
    dx = pix_x - mean_x[pair_splat]
    dy = pix_y - mean_y[pair_splat]
    quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    alpha = torch.clamp(opacity[pair_splat] * torch.exp(-0.5 * quad),
                        max=ALPHA_CLAMP)

    # Per-pixel exclusive transmittance via segmented cumulative log-products.
    log_keep = torch.log1p(-alpha)
    cum = torch.cumsum(log_keep, 0)
    cum_excl = cum - log_keep
    seg_first = torch.ones_like(pixel_id, dtype=torch.bool)
    seg_first[1:] = pixel_id[1:] != pixel_id[:-1]
    seg_id = torch.cumsum(seg_first.to(torch.int64), 0) - 1
    first_pos = torch.nonzero(seg_first, as_tuple=False).squeeze(-1)
    trans_log = cum_excl - cum_excl[first_pos][seg_id]
    trans = torch.exp(trans_log)
    active = (trans > TRANSMITTANCE_CUTOFF).detach()

    weight = alpha * trans * active
    contrib = rgb[pair_splat] * weight.unsqueeze(-1)
    image = torch.zeros(height * width, 3, dtype=dtype).index_add(
        0, pixel_id, contrib)

    final_log = torch.zeros(height * width, dtype=dtype).index_add(
        0, pixel_id, log_keep * active)
    final_trans = torch.exp(final_log)
    image = image + final_trans.unsqueeze(-1) * bg

    image = image.reshape(height, width, 3)
    if clamp:
        image = image.clamp(0.0, 1.0)
    if return_alpha:
        return image, (1.0 - final_trans).reshape(height, width)
    return image
