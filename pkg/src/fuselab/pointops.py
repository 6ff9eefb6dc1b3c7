"""Farthest point sampling, ball grouping and the shared point-cloud encoder."""
from __future__ import annotations

import numpy as np

from .config import Profile
from .tensorops import ParamStore, Tensor, as_tensor, concat, mlp


class SamplingError(ValueError):
    pass


class EncoderError(ValueError):
    pass


def farthest_point_sample(points: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy FPS from ``seed_index``; ties go to the lowest unchosen index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise SamplingError(f"cannot sample {k} seeds from {n} points")
    if not 0 <= seed_index < n:
        raise SamplingError(f"seed index {seed_index} out of range for {n} points")
    return fps_batch(pts[None], k, np.array([seed_index]))[0]


def fps_batch(points: np.ndarray, k: int, start: np.ndarray) -> np.ndarray:
    """Batched FPS over [B, N, 3]; returns [B, k] indices."""
    B, n, _ = points.shape
    out = np.empty((B, k), dtype=np.int64)
    rows = np.arange(B)
    cur = np.asarray(start, dtype=np.int64)
    mind = np.full((B, n), np.inf)
    chosen = np.zeros((B, n), dtype=bool)
    for i in range(k):
        out[:, i] = cur
        chosen[rows, cur] = True
        d = ((points - points[rows, cur][:, None, :]) ** 2).sum(-1)
        np.minimum(mind, d, out=mind)
        if i + 1 < k:
            cur = np.where(chosen, -1.0, mind).argmax(axis=1)
    return out


def group_neighbors(points: np.ndarray, seeds: np.ndarray, radius: float, max_pts: int) -> list[np.ndarray]:
    """Per seed: indices of points closer than ``radius``, nearest first, at most ``max_pts``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = np.asarray(points, dtype=np.float64)
    groups = []
    for s in np.asarray(seeds):
        d = np.linalg.norm(pts - pts[s], axis=1)
        order = np.argsort(d, kind="stable")
        inside = order[d[order] < radius][:max_pts]
        groups.append(inside if inside.size else np.array([s]))
    return groups


def group_index_array(points: np.ndarray, seeds: np.ndarray, radius: float, max_pts: int) -> np.ndarray:
    """Fixed-size version of :func:`group_neighbors` for [B, N, 3] clouds.

    Groups shorter than ``max_pts`` are padded with their nearest member, which
    leaves a max-pool over the group unchanged.
    """
    B, n, _ = points.shape
    rows = np.arange(B)[:, None]
    centers = points[rows, seeds]                                   # [B, k, 3]
    d = ((centers[:, :, None, :] - points[:, None, :, :]) ** 2).sum(-1)
    m = min(max_pts, n)
    order = np.argsort(d, axis=-1, kind="stable")[..., :m]
    dsorted = np.take_along_axis(d, order, axis=-1)
    idx = np.where(dsorted < radius * radius, order, order[..., :1])
    if m < max_pts:
        idx = np.concatenate([idx, np.repeat(idx[..., :1], max_pts - m, axis=-1)], axis=-1)
    return idx


def pad_cloud(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Pad [B, N, 3] (or [N, 3]) to at least ``n`` points by repeating random members."""
    if points.shape[-2] >= n:
        return points
    if points.shape[-2] == 0:
        raise EncoderError("cannot encode an empty point cloud")
    extra = rng.integers(0, points.shape[-2], size=n - points.shape[-2])
    return np.concatenate([points, points[..., extra, :]], axis=-2)


def encode_point_cloud(points: np.ndarray, params: ParamStore, branch: str, profile: Profile,
                       start: np.ndarray | None = None, rng: np.random.Generator | None = None,
                       point_features: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Cluster tokens [B, k, 3 + d_g] and a global vector [B, d_g] for a batch of clouds.

    ``start`` holds the FPS start index per cloud (index 0 when omitted).
    ``point_features`` ([B, N, F]) are appended to the neighbor offsets before
    the pointwise MLP, which is how the painting baseline widens the input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    B, n, _ = pts.shape
    if n == 0:
        raise EncoderError("cannot encode an empty point cloud")
    k = profile.k_tokens
    if n < k:
        if point_features is not None:
            raise EncoderError("painted clouds must already hold at least k points")
        pts = pad_cloud(pts, k, rng or np.random.default_rng(0))
        n = k
    if start is None:
        start = np.zeros(B, dtype=np.int64)
    seeds = fps_batch(pts, k, start)
    groups = group_index_array(pts, seeds, profile.group_radius, profile.group_size)
    rows = np.arange(B)
    seed_xyz = pts[rows[:, None], seeds]                              # [B, k, 3]
    # neighbor offsets in units of the grouping radius
    offsets = (pts[rows[:, None, None], groups] - seed_xyz[:, :, None, :]) / profile.group_radius
    x = as_tensor(offsets.astype(params.dtype))
    if point_features is not None:
        x = concat([x, point_features[rows[:, None, None], groups]], axis=-1)
    h = mlp(params, f"{branch}.local", x, [profile.point_hidden, profile.d_global], final_act=True)
    pooled = h.max(axis=2)                                            # [B, k, d_g]
    tokens = concat([as_tensor(profile.to_net(seed_xyz).astype(params.dtype)), pooled], axis=-1)
    # per-token MLP over (seed xyz, local feature) before pooling, so the global
    # vector knows where each local shape sits
    glob = mlp(params, f"{branch}.global", tokens, [profile.d_global, profile.d_global]).max(axis=1)
    return tokens, glob
