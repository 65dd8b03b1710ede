"""3D Gaussian primitive algebra.

Primitives live on the UV texel grid as parameter bundles (position offset,
opacity, unit quaternion, per-axis scale, degree-3 SH color coefficients) and
are turned into world-space Gaussians (position, covariance, opacity, SH) by
composing the texel's surface anchor with its blended skinning transform.

All functions are pure torch, differentiable, and dtype/device preserving.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .containers import load_arrays, save_arrays

# Real SH constants for the first four bands, in the normalization used by
# splatting renderers (band ordering: l=0; l=1: -y,z,-x; l=2; l=3).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_NUM_COEFFS = 16
COLOR_OFFSET = 0.5


@dataclass
class GaussianPrimitive:
    """Per-texel primitive parameters in canonical UV space."""

    position_offset: torch.Tensor  # [..., 3] meters
    opacity: torch.Tensor          # [...] in [0, 1]
    orientation: torch.Tensor      # [..., 4] unit quaternion (w, x, y, z)
    scale: torch.Tensor            # [..., 3] positive std deviations
    sh_coeffs: torch.Tensor        # [..., 16, 3]

    def validate(self, atol: float = 1e-6):
        qn = torch.linalg.vector_norm(self.orientation, dim=-1)
        if not torch.all((qn - 1.0).abs() < atol):
            raise ValueError("orientation quaternions must be unit length")
        if not torch.all(self.scale > 0):
            raise ValueError("scales must be positive")
        if not torch.all((self.opacity >= 0) & (self.opacity <= 1)):
            raise ValueError("opacity must lie in [0, 1]")
        for t in (self.position_offset, self.sh_coeffs):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite primitive fields")
        return self


@dataclass
class GaussianSet:
    """Flat list of world-space Gaussians ready for rasterization."""

    positions: torch.Tensor    # [N, 3]
    covariances: torch.Tensor  # [N, 3, 3] symmetric PSD
    opacities: torch.Tensor    # [N]
    sh_coeffs: torch.Tensor    # [N, 16, 3]

    def __len__(self):
        return self.positions.shape[0]

    def to(self, dtype=None):
        return GaussianSet(
            positions=self.positions.to(dtype=dtype),
            covariances=self.covariances.to(dtype=dtype),
            opacities=self.opacities.to(dtype=dtype),
            sh_coeffs=self.sh_coeffs.to(dtype=dtype),
        )

    def detach(self):
        return GaussianSet(
            self.positions.detach(), self.covariances.detach(),
            self.opacities.detach(), self.sh_coeffs.detach(),
        )

    def validate(self, atol: float = 1e-9):
        sym = (self.covariances - self.covariances.transpose(-1, -2)).abs().max()
        if sym > atol:
            raise ValueError(f"covariances not symmetric (max dev {sym:.3e})")
        eigs = torch.linalg.eigvalsh(
            0.5 * (self.covariances + self.covariances.transpose(-1, -2))
        )
        if eigs.min() < -atol:
            raise ValueError(f"covariance not PSD (min eig {eigs.min():.3e})")
        return self

    def save(self, path):
        save_arrays(path, {
            "positions": self.positions.detach().cpu().numpy(),
            "covariances": self.covariances.detach().cpu().numpy(),
            "opacities": self.opacities.detach().cpu().numpy(),
            "sh_coeffs": self.sh_coeffs.detach().cpu().numpy(),
        }, kind="gaussian_set")

    @staticmethod
    def load(path, dtype=torch.float64) -> "GaussianSet":
        data = load_arrays(path, kind="gaussian_set")
        return GaussianSet(
            positions=torch.from_numpy(data["positions"]).to(dtype),
            covariances=torch.from_numpy(data["covariances"]).to(dtype),
            opacities=torch.from_numpy(data["opacities"]).to(dtype),
            sh_coeffs=torch.from_numpy(data["sh_coeffs"]).to(dtype),
        )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit quaternion (w, x, y, z) -> rotation matrix, batched [..., 4] -> [..., 3, 3]."""
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def normalize_quat(q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Normalize and canonicalize (w >= 0); zero-norm inputs fall back to identity."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    identity = torch.zeros_like(q)
    identity[..., 0] = 1.0
    safe = torch.where(norm > eps, q / norm.clamp_min(eps), identity)
    sign = torch.where(safe[..., :1] < 0, -torch.ones_like(norm), torch.ones_like(norm))
    return safe * sign


def covariance_from(orientation: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R(q) diag(s^2) R(q)^T for unit quaternions q and positive scales s."""
    if not torch.isfinite(orientation).all() or not torch.isfinite(scale).all():
        raise ValueError("non-finite quaternion or scale input")
    rot = quat_to_rotmat(orientation)
    s2 = (scale * scale).unsqueeze(-2)  # [..., 1, 3] broadcast over columns
    return (rot * s2) @ rot.transpose(-1, -2)


def gaussian_pdf(x: torch.Tensor, mean: torch.Tensor, cov: torch.Tensor,
                 max_condition: float = 1e12) -> torch.Tensor:
    """Density of the trivariate normal at x.

    p(x) = exp(-0.5 (x-mu)^T Sigma^-1 (x-mu)) / ((2 pi)^{3/2} |Sigma|^{1/2})

    Raises on near-singular covariances (condition number guard).
    """
    cov = 0.5 * (cov + cov.transpose(-1, -2))
    eigs = torch.linalg.eigvalsh(cov)
    if eigs.min() <= 0 or (eigs.max() / eigs.min()) > max_condition:
        raise ValueError("covariance is singular or too ill-conditioned")
    diff = x - mean
    solve = torch.linalg.solve(cov, diff.unsqueeze(-1)).squeeze(-1)
    quad = (diff * solve).sum(-1)
    det = torch.linalg.det(cov)
    norm = (2.0 * math.pi) ** 1.5 * torch.sqrt(det)
    return torch.exp(-0.5 * quad) / norm


def sh_basis(dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate the 16 degree-3 real SH basis functions for unit directions [..., 3]."""
    x, y, z = dirs.unbind(-1)
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    one = torch.ones_like(x)
    basis = [
        SH_C0 * one,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
    return torch.stack(basis, dim=-1)


def sh_eval(sh_coeffs: torch.Tensor, view_dir: torch.Tensor,
            eps: float = 1e-12) -> torch.Tensor:
    """View-dependent RGB from degree-3 SH coefficients [..., 16, 3].

    The conventional 0.5 offset is added and the result clamped at zero, so
    zero coefficients render mid-gray.
    """
    norm = torch.linalg.vector_norm(view_dir, dim=-1, keepdim=True)
    if torch.any(norm <= eps):
        raise ValueError("zero-length view direction")
    basis = sh_basis(view_dir / norm)  # [..., 16]
    rgb = (basis.unsqueeze(-1) * sh_coeffs).sum(-2) + COLOR_OFFSET
    return torch.clamp(rgb, min=0.0)


def polar_rotation(mat: torch.Tensor) -> torch.Tensor:
    """Rotation factor of the polar decomposition M = R P (P symmetric PSD).

    Intended for near-orthogonal linear parts of blended skinning transforms,
    where M^T M is well conditioned.
    """
    mtm = mat.transpose(-1, -2) @ mat
    eigval, eigvec = torch.linalg.eigh(mtm)
    inv_sqrt = eigvec @ (eigval.clamp_min(1e-18).rsqrt().unsqueeze(-1) * eigvec.transpose(-1, -2))
    return mat @ inv_sqrt


def deform_gaussians(
    position_offset: torch.Tensor,   # [N, 3] canonical offsets
    opacity: torch.Tensor,           # [N]
    orientation: torch.Tensor,       # [N, 4] unit quaternions
    scale: torch.Tensor,             # [N, 3]
    sh_coeffs: torch.Tensor,         # [N, 16, 3]
    anchors: torch.Tensor,           # [N, 3] canonical surface anchors
    blend_linear: torch.Tensor,      # [N, 3, 3] blended skinning linear parts
    blend_translation: torch.Tensor,  # [N, 3]
    covariance_transport: str = "polar",
) -> GaussianSet:
    """Map canonical per-texel primitives to world space.

    Positions go through the exact blended affine: X = A (anchor + dx) + t.
    Covariances are transported with the affine's rotation factor (polar
    decomposition) by default, which keeps them valid covariances; set
    ``covariance_transport="affine"`` to use the full linear part instead.
    """
    if anchors.shape != position_offset.shape:
        raise ValueError(
            f"anchor/offset shape mismatch: {tuple(anchors.shape)} vs "
            f"{tuple(position_offset.shape)}"
        )
    canonical = anchors + position_offset
    positions = (blend_linear @ canonical.unsqueeze(-1)).squeeze(-1) + blend_translation

    cov_c = covariance_from(orientation, scale)
    if covariance_transport == "polar":
        transport = polar_rotation(blend_linear)
    elif covariance_transport == "affine":
        transport = blend_linear
    else:
        raise ValueError(f"unknown covariance transport {covariance_transport!r}")
    covariances = transport @ cov_c @ transport.transpose(-1, -2)

    return GaussianSet(
        positions=positions,
        covariances=covariances,
        opacities=opacity,
        sh_coeffs=sh_coeffs,
    )


def rgb_to_dc(rgb: torch.Tensor) -> torch.Tensor:
    """DC SH coefficient reproducing ``rgb`` under the 0.5-offset convention."""
    return (rgb - COLOR_OFFSET) / SH_C0


def dc_to_rgb(dc: torch.Tensor) -> torch.Tensor:
    return torch.clamp(dc * SH_C0 + COLOR_OFFSET, min=0.0)
