"""UV-space conditioning inputs.

Builds everything the generator consumes: identity textures baked from 1-3
views, expression offset maps, Sobel gradient maps masked to the mouth, and
the training-time photometric augmentations.  Baking projects texel anchors
into the source image and samples bilinearly, with visibility decided by a
z-buffer of the rasterized head mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .head_model import FlameParams, HeadModel, posed_mesh, uv_surface_anchors
from .ref_renderer import Camera

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))
SOBEL_Y = ((-1.0, -2.0, -1.0), (0.0, 0.0, 0.0), (1.0, 2.0, 1.0))


@dataclass
class ConditioningBundle:
    """All UV-space inputs for one (subject, frame) sample."""

    identity_texture: torch.Tensor  # [H, W, 3], zero inside the mouth region
    identity_valid: torch.Tensor    # [H, W] bool
    expr_offsets: torch.Tensor      # [H, W, 3] canonical-space offsets
    mouth_map: torch.Tensor         # [H, W, 3] in [-1, 1], zero outside mouth
    mouth_mask: torch.Tensor        # [H, W] bool

    @staticmethod
    def build(identity_texture, identity_valid, expr_offsets, mouth_map,
              mouth_mask) -> "ConditioningBundle":
        """Assemble a bundle, enforcing the masking contracts."""
        mouth = mouth_mask.bool()
        keep_id = identity_valid.bool() & ~mouth
        bundle = ConditioningBundle(
            identity_texture=identity_texture * keep_id.unsqueeze(-1),
            identity_valid=keep_id,
            expr_offsets=expr_offsets,
            mouth_map=mouth_map * mouth.unsqueeze(-1),
            mouth_mask=mouth,
        )
        return bundle.validate()

    def validate(self):
        mouth = self.mouth_mask.unsqueeze(-1)
        if (self.mouth_map * (~self.mouth_mask).unsqueeze(-1)).abs().max() > 0:
            raise ValueError("mouth map must be zero outside the mouth mask")
        if (self.identity_texture * mouth).abs().max() > 0:
            raise ValueError("identity texture must be zero inside the mouth mask")
        for t in (self.identity_texture, self.expr_offsets, self.mouth_map):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite conditioning data")
        return self


def _shifted_sum(padded: torch.Tensor, kernel) -> torch.Tensor:
    """3x3 cross-correlation as row-major shifted adds (fixed arithmetic order)."""
    h = padded.shape[0] - 2
    w = padded.shape[1] - 2
    out = torch.zeros(h, w, dtype=padded.dtype)
    for dy in range(3):
        for dx in range(3):
            k = kernel[dy][dx]
            out = out + k * padded[dy:dy + h, dx:dx + w]
    return out


def sobel_gradient_map(image: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """3-channel gradient map (gx, gy, magnitude) of an RGB image.

    The image is converted to luma, filtered with 3x3 Sobel kernels under a
    replicate border, then gx and gy are jointly scaled into [-1, 1] by the
    maximum absolute value across both, and the magnitude channel by its own
    maximum.  A constant image yields an all-zero map.
    """
    gray = (LUMA_WEIGHTS[0] * image[..., 0] + LUMA_WEIGHTS[1] * image[..., 1]
            + LUMA_WEIGHTS[2] * image[..., 2])
    padded = torch.nn.functional.pad(
        gray.unsqueeze(0).unsqueeze(0), (1, 1, 1, 1), mode="replicate")[0, 0]
    gx = _shifted_sum(padded, SOBEL_X)
    gy = _shifted_sum(padded, SOBEL_Y)
    mag = torch.sqrt(gx * gx + gy * gy)

    grad_max = torch.maximum(gx.abs().max(), gy.abs().max())
    scale = torch.where(grad_max > eps, grad_max, torch.ones_like(grad_max))
    gx = torch.where(grad_max > eps, gx / scale, torch.zeros_like(gx))
    gy = torch.where(grad_max > eps, gy / scale, torch.zeros_like(gy))
    mag_max = mag.max()
    mag = torch.where(mag_max > eps, mag / torch.where(mag_max > eps, mag_max, torch.ones_like(mag_max)),
                      torch.zeros_like(mag))
    return torch.stack([gx, gy, mag], dim=-1)


def rasterize_depth(vertices: torch.Tensor, faces: torch.Tensor,
                    cam: Camera) -> np.ndarray:
    """Z-buffer of the mesh under the camera, [H, W] float64 (inf = empty).

    Depth is interpolated affinely across each triangle, which is accurate
    for the small triangles of the head meshes used here.
    """
    verts = vertices.detach().to(torch.float64)
    p_cam = cam.cast(torch.float64).world_to_cam(verts).numpy()
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = cam.fx * p_cam[:, 0] / z + cam.cx
        py = cam.fy * p_cam[:, 1] / z + cam.cy

    height, width = cam.height, cam.width
    zbuf = np.full((height, width), np.inf)
    tris = faces.numpy()
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5

    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f]
        if z[i0] <= cam.near and z[i1] <= cam.near and z[i2] <= cam.near:
            continue
        if z[i0] <= cam.near or z[i1] <= cam.near or z[i2] <= cam.near:
            # Clipping triangles that straddle the near plane is not needed
            # for the rigs used here; skip them conservatively.
            continue
        ax, ay = px[i0], py[i0]
        bx, by = px[i1], py[i1]
        cx_, cy_ = px[i2], py[i2]
        c0 = max(int(np.floor(min(ax, bx, cx_) - 0.5)), 0)
        c1 = min(int(np.ceil(max(ax, bx, cx_) - 0.5)), width - 1)
        r0 = max(int(np.floor(min(ay, by, cy_) - 0.5)), 0)
        r1 = min(int(np.ceil(max(ay, by, cy_) - 0.5)), height - 1)
        if c1 < c0 or r1 < r0:
            continue
        gx, gy = np.meshgrid(xs[c0:c1 + 1], ys[r0:r1 + 1])
        v0x, v0y = bx - ax, by - ay
        v1x, v1y = cx_ - ax, cy_ - ay
        denom = v0x * v1y - v0y * v1x
        if abs(denom) < 1e-18:
            continue
        pux, puy = gx - ax, gy - ay
        wb = (pux * v1y - puy * v1x) / denom
        wc = (puy * v0x - pux * v0y) / denom
        wa = 1.0 - wb - wc
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        if not inside.any():
            continue
        depth = wa * z[i0] + wb * z[i1] + wc * z[i2]
        patch = zbuf[r0:r1 + 1, c0:c1 + 1]
        update = inside & (depth < patch)
        patch[update] = depth[update]
    return zbuf


def _bilinear_sample(image: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Sample [H, W, C] at continuous image coords (pixel centers at +0.5)."""
    height, width = image.shape[0], image.shape[1]
    gx = (x - 0.5).clamp(0.0, width - 1.0)
    gy = (y - 0.5).clamp(0.0, height - 1.0)
    x0 = gx.floor().long().clamp(0, width - 2) if width > 1 else gx.long() * 0
    y0 = gy.floor().long().clamp(0, height - 2) if height > 1 else gy.long() * 0
    x1 = (x0 + 1).clamp(0, width - 1)
    y1 = (y0 + 1).clamp(0, height - 1)
    fx = (gx - x0.to(gx.dtype)).unsqueeze(-1)
    fy = (gy - y0.to(gy.dtype)).unsqueeze(-1)
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def bake_to_uv(image: torch.Tensor, model: HeadModel, params: FlameParams,
               cam: Camera, resolution: int | None = None,
               depth_tolerance: float | None = None):
    """Project the image onto the UV chart.

    Every valid texel's posed anchor is projected into the camera and the
    image sampled bilinearly there.  Texels behind the camera, outside the
    frame, or failing the z-buffer visibility test are invalid.  Returns
    (texture [H, W, C], valid [H, W]).
    """
    if depth_tolerance is None:
        depth_tolerance = 1e-3 * 2.0 * model.bounding_radius()
    anchors, lin, tr, valid = uv_surface_anchors(model, params, resolution)
    world = (lin @ anchors.unsqueeze(-1)).squeeze(-1) + tr

    posed, _, _ = posed_mesh(model, params)
    zbuf = torch.from_numpy(rasterize_depth(posed, model.faces, cam))

    dtype = world.dtype
    p_cam = cam.cast(dtype).world_to_cam(world.reshape(-1, 3))
    z = p_cam[:, 2]
    in_front = z > cam.near
    z_safe = z.clamp_min(1e-9)
    px = cam.fx * p_cam[:, 0] / z_safe + cam.cx
    py = cam.fy * p_cam[:, 1] / z_safe + cam.cy
    on_image = (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)

    col = px.floor().long().clamp(0, cam.width - 1)
    row = py.floor().long().clamp(0, cam.height - 1)
    visible = z <= (zbuf[row, col] + depth_tolerance)

    ok = valid.reshape(-1) & in_front & on_image & visible
    samples = _bilinear_sample(image.to(dtype), px, py)
    channels = image.shape[-1]
    texture = torch.zeros(world.shape[0] * world.shape[1], channels, dtype=dtype)
    texture[ok] = samples[ok]
    h, w = world.shape[0], world.shape[1]
    return texture.reshape(h, w, channels), ok.reshape(h, w)


def identity_texture(views, model: HeadModel, resolution: int | None = None):
    """Average UV bake of 1-3 neutral-expression views, mouth region removed.

    ``views`` is a sequence of (image, params, camera).  Returns
    (texture [H, W, 3], valid [H, W]); texels inside the mouth region are
    zeroed and marked invalid so the texture carries no mouth appearance.
    """
    if not views:
        raise ValueError("identity texture requires at least one view")
    acc = None
    count = None
    for image, params, cam in views:
        tex, ok = bake_to_uv(image, model, params, cam, resolution)
        if acc is None:
            acc = torch.zeros_like(tex)
            count = torch.zeros(tex.shape[:2], dtype=tex.dtype)
        acc = acc + tex
        count = count + ok.to(tex.dtype)
    valid = count > 0
    texture = acc / count.clamp_min(1.0).unsqueeze(-1)
    mouth = model.mouth_mask_at(resolution)
    texture = texture * (valid & ~mouth).unsqueeze(-1)
    return texture, valid & ~mouth


def mouth_gradient_map(frame: torch.Tensor, model: HeadModel,
                       params: FlameParams, cam: Camera,
                       resolution: int | None = None) -> torch.Tensor:
    """Sobel gradients of the driving frame, baked to UV, masked to the mouth."""
    grad = sobel_gradient_map(frame)
    baked, ok = bake_to_uv(grad, model, params, cam, resolution)
    mouth = model.mouth_mask_at(resolution)
    return baked * (mouth & ok).unsqueeze(-1)


@dataclass
class AugmentParams:
    hue: float
    contrast: float
    brightness: float
    saturation: float
    blur_sigma: float


def sample_augmentation(rng: np.random.Generator,
                        probability: float = 0.5) -> AugmentParams | None:
    """Draw one sample's augmentation parameters; None means leave unchanged."""
    if rng.uniform() >= probability:
        return None
    return AugmentParams(
        hue=float(rng.uniform(-0.1, 0.1)),
        contrast=float(rng.uniform(0.7, 1.3)),
        brightness=float(rng.uniform(0.7, 1.3)),
        saturation=float(rng.uniform(0.7, 1.3)),
        blur_sigma=float(rng.uniform(0.1, 1.0)),
    )


def apply_augmentation(image: torch.Tensor,
                       params: AugmentParams | None) -> torch.Tensor:
    """Apply shared jitter + blur to an [H, W, 3] image in [0, 1]."""
    if params is None:
        return image
    chw = image.permute(2, 0, 1).to(torch.float32)
    chw = TF.adjust_hue(chw, params.hue)
    chw = TF.adjust_contrast(chw, params.contrast)
    chw = TF.adjust_brightness(chw, params.brightness)
    chw = TF.adjust_saturation(chw, params.saturation)
    chw = TF.gaussian_blur(chw, kernel_size=5, sigma=params.blur_sigma)
    return chw.permute(1, 2, 0).clamp(0.0, 1.0).to(image.dtype)


def augment(image: torch.Tensor, rng: np.random.Generator,
            probability: float = 0.5) -> torch.Tensor:
    """Randomly jitter and blur one image; deterministic given the rng state."""
    return apply_augmentation(image, sample_augmentation(rng, probability))
