"""Projection-painting baseline: every 3D point is decorated with the image features
found at its projected pixel, then encoded by a widened point encoder that feeds
the same query/transformer/graph-conv head as the adaptive model.

Unlike :class:`fusion.AdaptiveFusion` this model needs calibrated cameras.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Profile, slot_index
from .encoders import image_grid_features
from .fusion import MeshPrediction, build_query_tokens, ftm_forward, gim_fuse, normalized_adjacency, upsample_mesh
from .geometry import BodyTemplate, Camera
from .pointops import encode_point_cloud
from .tensorops import ParamStore, Tensor, as_tensor, matmul


class BaselineError(ValueError):
    pass


@dataclass
class PaintedCloud:
    points: np.ndarray     # [N, 3]
    features: Tensor       # [N, d_img]


def bilinear_weights(points: np.ndarray, cam: Camera, image_size: int, patch: int) -> np.ndarray:
    """[N, g] weights sampling a (size/patch)^2 feature grid at each point's projection.

    Grid features sit at patch centers; samples between the outermost centers
    and the image border clamp to the edge. Points behind the camera or outside
    the image get an all-zero row; every other row sums to 1.
    """
    pts = np.asarray(points, dtype=np.float64)
    gw = image_size // patch
    pc = cam.to_camera_frame(pts)
    z = pc[:, 2]
    front = z > 0
    uv = np.zeros((len(pts), 2))
    uv[front] = pc[front, :2] / z[front, None] * cam.focal + cam.principal
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < image_size) & (uv[:, 1] >= 0) & (uv[:, 1] < image_size)
    g = np.clip(uv / patch - 0.5, 0.0, gw - 1)
    i0 = np.floor(g).astype(int)
    i1 = np.minimum(i0 + 1, gw - 1)
    f = g - i0
    W = np.zeros((len(pts), gw * gw))
    rows = np.arange(len(pts))
    for cx, wx in ((i0[:, 0], 1 - f[:, 0]), (i1[:, 0], f[:, 0])):
        for cy, wy in ((i0[:, 1], 1 - f[:, 1]), (i1[:, 1], f[:, 1])):
            np.add.at(W, (rows, cy * gw + cx), wx * wy)
    W[~inside] = 0.0
    return W


def paint_points(points: np.ndarray, cam: Camera, grid_feats: Tensor, image_size: int, patch: int
                 ) -> PaintedCloud:
    """Paint one cloud [N, 3] from one grid feature map [g, d]."""
    W = bilinear_weights(points, cam, image_size, patch)
    feats = as_tensor(grid_feats)
    return PaintedCloud(np.asarray(points), matmul(as_tensor(W.astype(feats.dtype)), feats))


def paint_batch(points: np.ndarray, cams_per_view: list, grids: list, profile: Profile) -> Tensor:
    """Mean over image views of the painted features: [B, N, d_g]."""
    B = points.shape[0]
    out = None
    for cams, grid in zip(cams_per_view, grids):
        W = np.stack([bilinear_weights(points[b], cams[b], profile.image_size, profile.patch)
                      for b in range(B)])
        term = matmul(as_tensor(W.astype(grid.dtype)), grid)
        out = term if out is None else out + term
    return out * (1.0 / len(grids))


class BaselineFusion:
    """Point-painting regressor; requires >= 1 image, >= 1 point input and cameras."""

    kind = "baseline"
    prefix = "baseline."

    def __init__(self, profile: Profile, template: BodyTemplate, params: ParamStore):
        self.profile = profile
        self.template = template
        self.params = params
        self._adj = normalized_adjacency(template.adjacency)

    def forward(self, inputs, training: bool = False, rng: np.random.Generator | None = None,
                gt_cameras: dict | None = None, use_gt_cameras: bool = True) -> MeshPrediction:
        inputs = sorted(inputs, key=lambda i: slot_index(i.kind, i.view))
        images = [i for i in inputs if i.kind == "image"]
        clouds = [i for i in inputs if i.kind != "image"]
        if not images:
            raise BaselineError("the painting baseline needs at least one image view")
        if not clouds:
            raise BaselineError("the painting baseline needs at least one point input")
        if gt_cameras is None or any(i.view not in gt_cameras for i in images):
            raise BaselineError("the painting baseline needs calibrated cameras for every image view")
        p, prof, tpl, pre = self.params, self.profile, self.template, self.prefix
        grids = [image_grid_features(i.batched(), p, prof, prefix=f"{pre}image")[0] for i in images]
        cams = [gt_cameras[i.view] for i in images]
        feats = []
        for inp in clouds:
            pts = np.asarray(inp.batched(), dtype=np.float64)
            if pts.shape[1] < prof.k_tokens:
                raise BaselineError(f"{inp.slot.label} holds fewer than {prof.k_tokens} points")
            painted = paint_batch(pts, cams, grids, prof)
            start = None
            if training and rng is not None:
                start = rng.integers(0, pts.shape[1], size=pts.shape[0])
            tokens, glob = encode_point_cloud(pts, p, f"{pre}{inp.kind}", prof, start=start,
                                              point_features=painted)
            feats.append((tokens, glob, inp.kind, inp.view))
        G = gim_fuse([(g, k, v) for _, g, k, v in feats], p, prof, prefix=pre)
        queries = build_query_tokens(tpl, G * (1.0 / len(feats)), prof)
        coarse, local_out, kept, layout = ftm_forward(
            queries, [(t, k, v) for t, _, k, v in feats], p, prof, tpl, prefix=pre,
            adjacency_norm=self._adj)
        joints = coarse[:, :tpl.n_joints]
        verts_c = coarse[:, tpl.n_joints:]
        mid, full = upsample_mesh(verts_c, p, tpl, prefix=pre)
        return MeshPrediction(joints, verts_c, mid, full, {i.view: gt_cameras[i.view] for i in images},
                              kept, local_out, layout)

    __call__ = forward
