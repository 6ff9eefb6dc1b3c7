"""Global integration, template query tokens, the fusion transformer, graph-conv
decoding, mesh upsampling and the camera head.

``AdaptiveFusion`` wires these together for any nonempty set of inputs with a
single parameter set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SLOTS, Profile, Slot, slot_index
from .encoders import encode_all
from .sampling import CombinationError
from .geometry import BodyTemplate, Camera, TemplateError, upsample_init
from .tensorops import (ParamStore, Tensor, as_tensor, concat, gelu, linear, matmul, mlp,
                        multi_head_attention, stack)


class BuildError(ValueError):
    pass


@dataclass
class MeshPrediction:
    joints: Tensor            # [B, n_J, 3]
    verts_coarse: Tensor      # [B, n_c, 3]
    verts_mid: Tensor         # [B, n_m, 3]
    verts_full: Tensor        # [B, n_V, 3]
    cameras: dict = field(default_factory=dict)        # view -> CameraEstimate or list[Camera]
    attention: list = field(default_factory=list)      # last FTM layer [B, heads, q, t]
    local_outputs: list = field(default_factory=list)  # (Slot, Tensor [B, k, 3])
    token_sources: list = field(default_factory=list)  # (label, start, stop) along the token axis

    def numpy(self) -> dict[str, np.ndarray]:
        return {"joints": self.joints.data, "verts_coarse": self.verts_coarse.data,
                "verts_mid": self.verts_mid.data, "verts_full": self.verts_full.data}


@dataclass
class CameraEstimate:
    """Differentiable weak-perspective camera lifted to a pinhole with fixed focal.

    ``raw`` is [B, 5]: log scale, 2D translation, and an unnormalized
    (cos, sin) pair for the yaw about the world vertical.
    """

    raw: Tensor
    focal: float
    principal: float

    def project(self, points: Tensor) -> Tensor:
        raw = self.raw
        scale = (raw[:, 0:1]).exp() * (self.focal / 3.0)            # [B, 1]
        c, s = raw[:, 3:4] + 1.0, raw[:, 4:5]
        norm = (c.square() + s.square() + 1e-6).sqrt()
        c, s = c / norm, s / norm
        # canonical horizontal camera looking along +y, yawed about z
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        xr = c * x - s * y
        yr = s * x + c * y
        depth = yr + self.focal / scale
        u = self.focal * xr / depth + raw[:, 1:2] + self.principal
        v = -self.focal * z / depth + raw[:, 2:3] + self.principal
        return stack([u, v], axis=-1)

    def to_camera(self, b: int = 0) -> Camera:
        """The equivalent pinhole camera for batch item ``b``."""
        raw = np.asarray(self.raw.data[b], dtype=np.float64)
        depth = self.focal / (np.exp(raw[0]) * (self.focal / 3.0))
        c, s = raw[3] + 1.0, raw[4]
        norm = np.sqrt(c * c + s * s + 1e-6)
        c, s = c / norm, s / norm
        yaw = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        axes = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        R = axes @ yaw
        # a unit-norm (c, s) keeps R proper; the 1e-6 regularizer shrinks it slightly
        U, _, Vt = np.linalg.svd(R)
        return Camera(U @ Vt, (0.0, 0.0, depth), (self.focal, self.focal),
                      (self.principal + raw[1], self.principal + raw[2]))


def _slot_embedding(params: ParamStore, path: str, slot: Slot, width: int) -> Tensor:
    # additive like a bias, so it starts at zero and never swamps the features it tags
    table = params.get(path, (len(SLOTS), width), "zeros")
    return table[slot_index(*slot)]


def gim_fuse(globals_, params: ParamStore, profile: Profile, prefix: str = "") -> Tensor:
    """Fuse per-input global vectors [(Tensor [B, d_g], kind, view), ...] into one [B, d_g]."""
    if not globals_:
        raise CombinationError("global integration needs at least one input")
    globals_ = [(g.reshape(1, -1) if g.ndim == 1 else g, kind, view) for g, kind, view in
                ((as_tensor(g, params.dtype), kind, view) for g, kind, view in globals_)]
    rows = [g + _slot_embedding(params, f"{prefix}gim.slot_embed", Slot(kind, view), profile.d_global)
            for g, kind, view in globals_]
    x = stack(rows, axis=1)
    for layer in range(profile.gim_layers):
        x = multi_head_attention(x, x, params, profile.heads, path=f"{prefix}gim.layer{layer}")
    return x.sum(axis=1)


def build_query_tokens(template: BodyTemplate, g: Tensor, profile: Profile | None = None) -> Tensor:
    """Rows of (template xyz, fused global): [B, n_J + n_c, 3 + d_g].

    With a ``profile`` the template coordinates are given in its network units.
    """
    g = as_tensor(g)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    B, d = g.shape
    pos = template.query_positions()
    pos = (profile.to_net(pos) if profile is not None else pos).astype(g.dtype)
    nq = len(pos)
    return concat([as_tensor(np.broadcast_to(pos, (B, nq, 3))),
                   g.reshape(B, 1, d).broadcast_to((B, nq, d))], axis=-1)


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    A = np.asarray(adjacency, dtype=np.float64)
    if not np.array_equal(A, A.T):
        raise TemplateError("adjacency must be symmetric")
    A = A + np.eye(len(A))
    return A / A.sum(axis=1, keepdims=True)


def graph_conv(features: Tensor, adjacency_norm: np.ndarray, params: ParamStore, path: str,
               d_out: int) -> Tensor:
    """``A_norm @ X @ W + b`` with A_norm the row-normalized (A + I)."""
    if adjacency_norm.shape[0] != features.shape[-2]:
        raise TemplateError(f"adjacency of size {adjacency_norm.shape[0]} does not match "
                            f"{features.shape[-2]} graph nodes")
    h = linear(params, f"{path}", features, d_out, bias=False)
    return matmul(as_tensor(adjacency_norm.astype(params.dtype)), h) \
        + params.get(f"{path}.b", (d_out,), "zeros")


def graph_decode(q: Tensor, adjacency_norm: np.ndarray, params: ParamStore, profile: Profile,
                 prefix: str = "") -> Tensor:
    h = gelu(graph_conv(q, adjacency_norm, params, f"{prefix}ftm.gc0", profile.gc_hidden))
    h = gelu(graph_conv(h, adjacency_norm, params, f"{prefix}ftm.gc1", profile.gc_hidden))
    return linear(params, f"{prefix}ftm.gc.out", h, 3)


def ftm_forward(queries: Tensor, locals_, params: ParamStore, profile: Profile,
                template: BodyTemplate, prefix: str = "", adjacency_norm: np.ndarray | None = None):
    """Self-attention over query rows plus every local token, then graph-conv decoding.

    ``locals_`` is a list of (Tensor [B, k, d_tok], kind, view). Returns the
    decoded joint/coarse-vertex block [B, n_J + n_c, 3], the decoded local
    rows, the last layer's attention weights and the token layout.
    """
    if not locals_:
        raise CombinationError("the fusion transformer needs local tokens from at least one input")
    nq = queries.shape[1]
    blocks = [queries]
    layout = [("queries", 0, nq)]
    pos = nq
    for tokens, kind, view in locals_:
        if tokens.shape[-1] != queries.shape[-1]:
            raise BuildError(f"{kind}{view} token width {tokens.shape[-1]} != query width {queries.shape[-1]}")
        blocks.append(tokens + _slot_embedding(params, f"{prefix}ftm.slot_embed", Slot(kind, view),
                                               queries.shape[-1]))
        layout.append((Slot(kind, view).label, pos, pos + tokens.shape[1]))
        pos += tokens.shape[1]
    x = concat(blocks, axis=1)
    kept: list = []
    widths = profile.ftm_widths
    for layer, w in enumerate(widths):
        x = linear(params, f"{prefix}ftm.proj{layer}", x, w)
        x = multi_head_attention(x, x, params, profile.heads, path=f"{prefix}ftm.layer{layer}",
                                 keep=kept if layer == len(widths) - 1 else None)
    if adjacency_norm is None:
        adjacency_norm = normalized_adjacency(template.adjacency)
    decoded = graph_decode(x[:, :nq], adjacency_norm, params, profile, prefix)
    coarse = decoded * profile.length_unit + template.query_positions().astype(params.dtype)
    local_out = []
    for (tokens, kind, view), (_, lo, hi) in zip(locals_, layout[1:]):
        rows = linear(params, f"{prefix}ftm.gc.out", x[:, lo:hi], 3) * profile.length_unit
        local_out.append((Slot(kind, view), rows))
    return coarse, local_out, kept, layout


def upsample_mesh(verts_coarse: Tensor, params: ParamStore, template: BodyTemplate,
                  prefix: str = "") -> tuple[Tensor, Tensor]:
    """Learned linear maps coarse -> mid -> full, shared over the xyz channels."""
    up1 = params.get(f"{prefix}upsample.mid.W", (template.n_mid, template.n_coarse),
                     lambda shape, rng: upsample_init(template.down2))
    up2 = params.get(f"{prefix}upsample.full.W", (template.n_full, template.n_mid),
                     lambda shape, rng: upsample_init(template.down1))
    mid = matmul(up1, verts_coarse) + params.get(f"{prefix}upsample.mid.b", (template.n_mid, 3), "zeros")
    full = matmul(up2, mid) + params.get(f"{prefix}upsample.full.b", (template.n_full, 3), "zeros")
    return mid, full


def estimate_cameras(g_per_view, params: ParamStore, profile: Profile, prefix: str = "",
                     gt_cameras: dict | None = None) -> dict:
    """One camera per image view from its global feature (shared head).

    With ``gt_cameras`` ({view: [Camera] * B}) the dataset cameras are returned
    verbatim instead.
    """
    out = {}
    for view, g in g_per_view:
        if gt_cameras is not None:
            out[view] = gt_cameras[view]
            continue
        raw = mlp(params, f"{prefix}camera", g, [profile.d_global // 2, 5])
        out[view] = CameraEstimate(raw, profile.focal, profile.image_size / 2.0)
    return out


class AdaptiveFusion:
    """Mesh regressor over any nonempty subset of the sensor slots."""

    kind = "adaptive"

    def __init__(self, profile: Profile, template: BodyTemplate, params: ParamStore):
        if template.n_queries != profile_queries(template):
            raise BuildError("template query count mismatch")
        self.profile = profile
        self.template = template
        self.params = params
        self._adj = normalized_adjacency(template.adjacency)

    def forward(self, inputs, training: bool = False, rng: np.random.Generator | None = None,
                gt_cameras: dict | None = None, use_gt_cameras: bool = True) -> MeshPrediction:
        if not inputs:
            raise CombinationError("empty input combination")
        p, prof, tpl = self.params, self.profile, self.template
        # a fixed slot order makes the result independent of input order down to the last bit
        inputs = sorted(inputs, key=lambda i: slot_index(i.kind, i.view))
        feats = encode_all(inputs, p, prof, training=training, rng=rng)
        G = gim_fuse([(g, ts.kind, ts.view) for ts, g in feats], p, prof)
        # the summed global grows with the input count; queries see its per-input mean
        queries = build_query_tokens(tpl, G * (1.0 / len(feats)), prof)
        coarse, local_out, kept, layout = ftm_forward(
            queries, [(ts.values, ts.kind, ts.view) for ts, _ in feats], p, prof, tpl,
            adjacency_norm=self._adj)
        joints = coarse[:, :tpl.n_joints]
        verts_c = coarse[:, tpl.n_joints:]
        mid, full = upsample_mesh(verts_c, p, tpl)
        image_globals = [(ts.view, g) for ts, g in feats if ts.kind == "image"]
        cams = estimate_cameras(image_globals, p, prof,
                                gt_cameras=gt_cameras if use_gt_cameras else None)
        return MeshPrediction(joints, verts_c, mid, full, cams, kept, local_out, layout)

    __call__ = forward


def profile_queries(template: BodyTemplate) -> int:
    return template.n_joints + template.n_coarse
