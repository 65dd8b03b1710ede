"""Simplified parametric head: linear blendshapes, joint regression, LBS, UV chart.

The model follows the classic morphable-head structure: a template mesh plus
linear shape/expression/pose-corrective bases produces a canonical mesh, a
joint regressor places a 4-joint chain (root, neck, head, jaw), and linear
blend skinning poses the result.  A fixed UV chart binds every texel of an
H x W grid to one (face, barycentric) surface point; that binding is what
anchors generator texels to the head surface.

All tensors are torch; computations preserve the dtype of the pose/shape
parameters so the same code serves float64 oracle tests and float32 training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .containers import load_arrays, save_arrays

JOINT_NAMES = ("root", "neck", "head", "jaw")


@dataclass
class UvChart:
    """Texel -> surface binding over an H x W grid.

    ``face_index`` is -1 for texels outside the chart; ``barycentric`` rows of
    valid texels are nonnegative and sum to one.
    """

    face_index: torch.Tensor   # [H, W] int64
    barycentric: torch.Tensor  # [H, W, 3] float64

    @property
    def resolution(self):
        return tuple(self.face_index.shape)

    @property
    def valid(self) -> torch.Tensor:
        return self.face_index >= 0

    def flat_valid(self):
        """(texel_ids, face_ids, barycentric) for valid texels, row-major order."""
        mask = self.valid.reshape(-1)
        idx = torch.nonzero(mask, as_tuple=False).squeeze(-1)
        return idx, self.face_index.reshape(-1)[idx], self.barycentric.reshape(-1, 3)[idx]


@dataclass
class FlameParams:
    """Shape, expression and pose of one head instance.

    Rotations are axis-angle per joint in the order (root, neck, head, jaw);
    ``from_quaternions`` accepts unit quaternions instead.
    """

    shape: torch.Tensor          # [n_shape]
    expression: torch.Tensor     # [n_expr]
    joint_rotvecs: torch.Tensor  # [n_joints, 3] axis-angle
    translation: torch.Tensor    # [3]

    @staticmethod
    def neutral(model: "HeadModel", dtype=torch.float64) -> "FlameParams":
        n_joints = model.n_joints
        return FlameParams(
            shape=torch.zeros(model.n_shape, dtype=dtype),
            expression=torch.zeros(model.n_expr, dtype=dtype),
            joint_rotvecs=torch.zeros(n_joints, 3, dtype=dtype),
            translation=torch.zeros(3, dtype=dtype),
        )

    @staticmethod
    def from_quaternions(shape, expression, joint_quats, translation,
                         atol: float = 1e-5) -> "FlameParams":
        joint_quats = torch.as_tensor(joint_quats)
        norms = torch.linalg.vector_norm(joint_quats, dim=-1)
        if not torch.all((norms - 1.0).abs() < atol):
            raise ValueError("joint quaternions must be normalized")
        w = joint_quats[..., 0].clamp(-1.0, 1.0)
        angle = 2.0 * torch.arccos(w)
        sin_half = torch.sqrt((1.0 - w * w).clamp_min(0.0))
        axis = torch.where(
            sin_half.unsqueeze(-1) > 1e-8,
            joint_quats[..., 1:] / sin_half.clamp_min(1e-8).unsqueeze(-1),
            torch.zeros_like(joint_quats[..., 1:]),
        )
        return FlameParams(
            shape=torch.as_tensor(shape),
            expression=torch.as_tensor(expression),
            joint_rotvecs=axis * angle.unsqueeze(-1),
            translation=torch.as_tensor(translation),
        )

    def validate(self):
        for t in (self.shape, self.expression, self.joint_rotvecs, self.translation):
            if not torch.isfinite(t).all():
                raise ValueError("non-finite head parameters")
        return self

    def clone(self):
        return FlameParams(
            self.shape.clone(), self.expression.clone(),
            self.joint_rotvecs.clone(), self.translation.clone(),
        )


@dataclass
class HeadModel:
    template_vertices: torch.Tensor   # [V, 3]
    shape_basis: torch.Tensor         # [V, 3, n_shape]
    expr_basis: torch.Tensor          # [V, 3, n_expr]
    pose_basis: torch.Tensor          # [V, 3, 9*(n_joints-1)]
    skinning_weights: torch.Tensor    # [V, n_joints]
    joint_regressor: torch.Tensor     # [n_joints, V]
    joint_parents: torch.Tensor       # [n_joints] int64, -1 for root
    faces: torch.Tensor               # [F, 3] int64
    uv_coords: torch.Tensor           # [V, 2] in [0, 1]
    chart: UvChart
    mouth_center_uv: tuple            # (u, v) of the mouth region ellipse
    mouth_radii_uv: tuple             # (ru, rv)
    _chart_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expr_basis.shape[2]

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def jaw_index(self):
        return JOINT_NAMES.index("jaw")

    def validate(self):
        row_sums = self.skinning_weights.sum(dim=1)
        if (row_sums - 1.0).abs().max() > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        if self.skinning_weights.min() < 0:
            raise ValueError("skinning weights must be nonnegative")
        for name in ("template_vertices", "shape_basis", "expr_basis",
                     "pose_basis", "joint_regressor"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ValueError(f"non-finite {name}")
        mask = self.chart.valid
        bary = self.chart.barycentric[mask]
        if bary.numel():
            if bary.min() < 0 or (bary.sum(-1) - 1.0).abs().max() > 1e-9:
                raise ValueError("chart barycentrics must be >= 0 and sum to 1")
        return self

    def chart_at(self, resolution: int | None) -> UvChart:
        """Chart at the asset's baked resolution or re-rasterized on demand."""
        if resolution is None or resolution == self.chart.resolution[0]:
            return self.chart
        if resolution not in self._chart_cache:
            self._chart_cache[resolution] = rasterize_uv_chart(
                self.uv_coords, self.faces, resolution, resolution)
        return self._chart_cache[resolution]

    def mouth_mask_at(self, resolution: int | None) -> torch.Tensor:
        """Boolean [H, W] mouth-region mask on the chart grid (valid texels only)."""
        chart = self.chart_at(resolution)
        h, w = chart.resolution
        v, u = torch.meshgrid(
            (torch.arange(h, dtype=torch.float64) + 0.5) / h,
            (torch.arange(w, dtype=torch.float64) + 0.5) / w,
            indexing="ij",
        )
        cu, cv = self.mouth_center_uv
        ru, rv = self.mouth_radii_uv
        inside = ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0
        return inside & chart.valid

    def mean_edge_length(self) -> float:
        v = self.template_vertices
        f = self.faces
        e = torch.cat([
            v[f[:, 0]] - v[f[:, 1]],
            v[f[:, 1]] - v[f[:, 2]],
            v[f[:, 2]] - v[f[:, 0]],
        ])
        return float(torch.linalg.vector_norm(e, dim=-1).mean())

    def bounding_radius(self) -> float:
        return float(torch.linalg.vector_norm(self.template_vertices, dim=-1).max())

    def to(self, dtype):
        return HeadModel(
            template_vertices=self.template_vertices.to(dtype),
            shape_basis=self.shape_basis.to(dtype),
            expr_basis=self.expr_basis.to(dtype),
            pose_basis=self.pose_basis.to(dtype),
            skinning_weights=self.skinning_weights.to(dtype),
            joint_regressor=self.joint_regressor.to(dtype),
            joint_parents=self.joint_parents,
            faces=self.faces,
            uv_coords=self.uv_coords,
            chart=self.chart,
            mouth_center_uv=self.mouth_center_uv,
            mouth_radii_uv=self.mouth_radii_uv,
        )

    def save(self, path):
        save_arrays(path, {
            "template_vertices": self.template_vertices.numpy(),
            "shape_basis": self.shape_basis.numpy(),
            "expr_basis": self.expr_basis.numpy(),
            "pose_basis": self.pose_basis.numpy(),
            "skinning_weights": self.skinning_weights.numpy(),
            "joint_regressor": self.joint_regressor.numpy(),
            "joint_parents": self.joint_parents.numpy(),
            "faces": self.faces.numpy(),
            "uv_coords": self.uv_coords.numpy(),
            "chart_face_index": self.chart.face_index.numpy(),
            "chart_barycentric": self.chart.barycentric.numpy(),
            "mouth_center_uv": np.asarray(self.mouth_center_uv, dtype=np.float64),
            "mouth_radii_uv": np.asarray(self.mouth_radii_uv, dtype=np.float64),
        }, kind="head_model")

    @staticmethod
    def load(path) -> "HeadModel":
        d = load_arrays(path, kind="head_model")
        model = HeadModel(
            template_vertices=torch.from_numpy(d["template_vertices"]),
            shape_basis=torch.from_numpy(d["shape_basis"]),
            expr_basis=torch.from_numpy(d["expr_basis"]),
            pose_basis=torch.from_numpy(d["pose_basis"]),
            skinning_weights=torch.from_numpy(d["skinning_weights"]),
            joint_regressor=torch.from_numpy(d["joint_regressor"]),
            joint_parents=torch.from_numpy(d["joint_parents"]),
            faces=torch.from_numpy(d["faces"]),
            uv_coords=torch.from_numpy(d["uv_coords"]),
            chart=UvChart(
                face_index=torch.from_numpy(d["chart_face_index"]),
                barycentric=torch.from_numpy(d["chart_barycentric"]),
            ),
            mouth_center_uv=tuple(d["mouth_center_uv"].tolist()),
            mouth_radii_uv=tuple(d["mouth_radii_uv"].tolist()),
        )
        return model.validate()


def rodrigues(rotvec: torch.Tensor) -> torch.Tensor:
    """Axis-angle [..., 3] -> rotation matrix [..., 3, 3]; exact identity at zero."""
    angle = torch.linalg.vector_norm(rotvec, dim=-1, keepdim=True)
    axis = rotvec / angle.clamp_min(1e-30)
    x, y, z = axis.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand(k.shape)
    s = torch.sin(angle).unsqueeze(-1)
    c = torch.cos(angle).unsqueeze(-1)
    return eye + s * k + (1.0 - c) * (k @ k)


def pose_features(model: HeadModel, joint_rotvecs: torch.Tensor) -> torch.Tensor:
    """Flattened (R_k - I) features for the non-root joints, [9*(n_joints-1)]."""
    rots = rodrigues(joint_rotvecs[1:])
    eye = torch.eye(3, dtype=rots.dtype, device=rots.device)
    return (rots - eye).reshape(-1)


def _check_dim(name, got, want):
    if got != want:
        raise ValueError(f"{name}: expected length {want}, got {got}")


def canonical_mesh(model: HeadModel, params: FlameParams) -> torch.Tensor:
    """Template plus shape/expression/pose-corrective blendshape offsets, [V, 3]."""
    _check_dim("shape", params.shape.shape[0], model.n_shape)
    _check_dim("expression", params.expression.shape[0], model.n_expr)
    _check_dim("joint_rotvecs", params.joint_rotvecs.shape[0], model.n_joints)
    dtype = params.shape.dtype
    verts = model.template_vertices.to(dtype)
    verts = verts + model.shape_basis.to(dtype) @ params.shape
    verts = verts + model.expr_basis.to(dtype) @ params.expression
    feats = pose_features(model, params.joint_rotvecs.to(dtype))
    verts = verts + model.pose_basis.to(dtype) @ feats
    return verts


def regress_joints(model: HeadModel, shape: torch.Tensor) -> torch.Tensor:
    """Joint rest positions from the shaped (expression-free) mesh, [n_joints, 3]."""
    _check_dim("shape", shape.shape[0], model.n_shape)
    dtype = shape.dtype
    shaped = model.template_vertices.to(dtype) + model.shape_basis.to(dtype) @ shape
    return model.joint_regressor.to(dtype) @ shaped


def forward_kinematics(rest_joints: torch.Tensor, joint_rotvecs: torch.Tensor,
                       parents: torch.Tensor, translation: torch.Tensor):
    """World-space rigid transform of every joint.

    Returns (rot [J, 3, 3], trans [J, 3], posed_joints [J, 3]) such that a
    point rigidly attached to joint k maps via x' = rot_k x + trans_k.  With
    all rotations identity and zero translation this is the identity map.
    """
    n_joints = rest_joints.shape[0]
    local = rodrigues(joint_rotvecs)
    rots, trans, posed = [], [], []
    for k in range(n_joints):
        p = int(parents[k])
        if p < 0:
            rots.append(local[k])
            posed.append(rest_joints[k])
        else:
            if p >= k:
                raise ValueError("joint parents must precede children")
            rots.append(rots[p] @ local[k])
            posed.append(rots[p] @ (rest_joints[k] - rest_joints[p]) + posed[p])
        trans.append(posed[k] - rots[k] @ rest_joints[k] + translation)
    return (torch.stack(rots), torch.stack(trans),
            torch.stack(posed) + translation)


def skin(mesh_c: torch.Tensor, rest_joints: torch.Tensor,
         joint_rotvecs: torch.Tensor, weights: torch.Tensor,
         parents: torch.Tensor, translation: torch.Tensor | None = None):
    """Linear blend skinning.

    Returns (posed [V, 3], blend_linear [V, 3, 3], blend_translation [V, 3])
    where posed = blend_linear @ v + blend_translation is the per-vertex
    weighted sum of the joints' rigid transforms.  The blended affine is
    returned so covariances can be transported along the same deformation.
    """
    if weights.shape != (mesh_c.shape[0], rest_joints.shape[0]):
        raise ValueError(
            f"skinning weights {tuple(weights.shape)} do not match "
            f"V={mesh_c.shape[0]}, n_joints={rest_joints.shape[0]}")
    row_sums = weights.sum(dim=1)
    if (row_sums - 1.0).abs().max() > 1e-6:
        raise ValueError("skinning weight rows must sum to 1")
    if translation is None:
        translation = torch.zeros(3, dtype=mesh_c.dtype, device=mesh_c.device)
    rot, trans, _ = forward_kinematics(rest_joints, joint_rotvecs, parents, translation)
    w = weights.to(mesh_c.dtype)
    blend_linear = torch.einsum("vj,jab->vab", w, rot)
    blend_translation = w @ trans
    posed = (blend_linear @ mesh_c.unsqueeze(-1)).squeeze(-1) + blend_translation
    return posed, blend_linear, blend_translation


def posed_mesh(model: HeadModel, params: FlameParams):
    """Canonical mesh followed by LBS; returns (posed, blend_linear, blend_translation)."""
    mesh_c = canonical_mesh(model, params)
    joints = regress_joints(model, params.shape)
    return skin(mesh_c, joints, params.joint_rotvecs.to(mesh_c.dtype),
                model.skinning_weights.to(mesh_c.dtype), model.joint_parents,
                params.translation.to(mesh_c.dtype))


def interpolate_texels(chart: UvChart, faces: torch.Tensor,
                       vertex_values: torch.Tensor) -> torch.Tensor:
    """Barycentric interpolation of per-vertex values onto valid texels.

    Returns a full [H, W, ...] grid with zeros at invalid texels.
    """
    h, w = chart.resolution
    idx, face_ids, bary = chart.flat_valid()
    tri = vertex_values[faces[face_ids]]  # [T, 3, ...]
    bary = bary.to(vertex_values.dtype)
    shaped_bary = bary.reshape(bary.shape + (1,) * (tri.dim() - 2))
    vals = (shaped_bary * tri).sum(dim=1)
    out = torch.zeros((h * w,) + vals.shape[1:], dtype=vertex_values.dtype)
    out[idx] = vals
    return out.reshape((h, w) + vals.shape[1:])


def expression_offset_map(model: HeadModel, expression: torch.Tensor,
                          jaw_rotvec: torch.Tensor,
                          resolution: int | None = None) -> torch.Tensor:
    """Canonical-space position offsets induced by (expression, jaw), [H, W, 3].

    Shape and non-jaw pose stay at their canonical defaults; the jaw enters
    through the pose-corrective basis only, so the map lives entirely in
    canonical space.  Invalid texels are zero.
    """
    _check_dim("expression", expression.shape[0], model.n_expr)
    dtype = expression.dtype
    rotvecs = torch.zeros(model.n_joints, 3, dtype=dtype)
    rotvecs[model.jaw_index] = jaw_rotvec.to(dtype)
    offsets = model.expr_basis.to(dtype) @ expression
    offsets = offsets + model.pose_basis.to(dtype) @ pose_features(model, rotvecs)
    chart = model.chart_at(resolution)
    return interpolate_texels(chart, model.faces, offsets)


def uv_surface_anchors(model: HeadModel, params: FlameParams,
                       resolution: int | None = None):
    """Per-texel canonical anchor and blended skinning transform.

    Returns (anchors [H, W, 3], blend_linear [H, W, 3, 3],
    blend_translation [H, W, 3], valid [H, W]).  Anchors are barycentric
    interpolations of the canonical mesh; transforms are barycentric blends
    of the per-vertex skinning affines.
    """
    mesh_c = canonical_mesh(model, params)
    joints = regress_joints(model, params.shape)
    _, blend_linear, blend_translation = skin(
        mesh_c, joints, params.joint_rotvecs.to(mesh_c.dtype),
        model.skinning_weights.to(mesh_c.dtype), model.joint_parents,
        params.translation.to(mesh_c.dtype))
    chart = model.chart_at(resolution)
    anchors = interpolate_texels(chart, model.faces, mesh_c)
    lin = interpolate_texels(chart, model.faces, blend_linear)
    tr = interpolate_texels(chart, model.faces, blend_translation)
    return anchors, lin, tr, chart.valid


def rasterize_uv_chart(uv_coords: torch.Tensor, faces: torch.Tensor,
                       height: int, width: int) -> UvChart:
    """Bake texel -> (face, barycentric) by rasterizing the UV triangles.

    Texel centers are ((c + 0.5)/W, (r + 0.5)/H).  Ties on shared edges go to
    the lowest face index; barycentric coordinates are clamped to >= 0 and
    renormalized so they sum to exactly one.
    """
    uv = np.asarray(uv_coords, dtype=np.float64)
    tris = np.asarray(faces, dtype=np.int64)
    face_index = np.full((height, width), -1, dtype=np.int64)
    bary = np.zeros((height, width, 3), dtype=np.float64)

    us = (np.arange(width, dtype=np.float64) + 0.5) / width
    vs = (np.arange(height, dtype=np.float64) + 0.5) / height

    for f in range(tris.shape[0]):
        a, b, c = uv[tris[f, 0]], uv[tris[f, 1]], uv[tris[f, 2]]
        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        c0 = max(int(np.floor(lo[0] * width - 0.5)), 0)
        c1 = min(int(np.ceil(hi[0] * width - 0.5)), width - 1)
        r0 = max(int(np.floor(lo[1] * height - 0.5)), 0)
        r1 = min(int(np.ceil(hi[1] * height - 0.5)), height - 1)
        if c1 < c0 or r1 < r0:
            continue
        uu, vv = np.meshgrid(us[c0:c1 + 1], vs[r0:r1 + 1])
        v0 = b - a
        v1 = c - a
        denom = v0[0] * v1[1] - v0[1] * v1[0]
        if abs(denom) < 1e-18:
            continue
        pu = uu - a[0]
        pv = vv - a[1]
        wb = (pu * v1[1] - pv * v1[0]) / denom
        wc = (pv * v0[0] - pu * v0[1]) / denom
        wa = 1.0 - wb - wc
        inside = (wa >= -1e-12) & (wb >= -1e-12) & (wc >= -1e-12)
        sub = face_index[r0:r1 + 1, c0:c1 + 1]
        take = inside & (sub < 0)
        sub[take] = f
        w_stack = np.stack([wa, wb, wc], axis=-1).clip(min=0.0)
        w_stack /= w_stack.sum(axis=-1, keepdims=True)
        bary[r0:r1 + 1, c0:c1 + 1][take] = w_stack[take]

    return UvChart(
        face_index=torch.from_numpy(face_index),
        barycentric=torch.from_numpy(bary),
    )
