"""Body template, cameras, Procrustes alignment and the evaluation metrics.

Coordinates are meters in a z-up world frame. Metrics are reported in
centimeters unless asked otherwise.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from . import arrayio


class TemplateError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class MetricError(ValueError):
    pass


# -- rigs ---------------------------------------------------------------------------
# (name, parent, rest position, capsule radius of the bone parent->joint, angle limits deg xyz)

DESK_RIG = (
    ("pelvis", -1, (0.00, 0.0, 0.95), 0.00, (0, 0, 45)),
    ("spine", 0, (0.00, 0.0, 1.25), 0.14, (25, 15, 20)),
    ("neck", 1, (0.00, 0.0, 1.50), 0.12, (15, 10, 15)),
    ("head", 2, (0.00, 0.0, 1.72), 0.10, (25, 15, 30)),
    ("left_hand", 2, (0.42, 0.0, 0.98), 0.045, (70, 40, 20)),
    ("right_hand", 2, (-0.42, 0.0, 0.98), 0.045, (70, 40, 20)),
    ("left_foot", 0, (0.12, 0.0, 0.05), 0.065, (45, 15, 10)),
    ("right_foot", 0, (-0.12, 0.0, 0.05), 0.065, (45, 15, 10)),
)

# 22 body joints in the usual SMPL-X body ordering.
PAPER_RIG = (
    ("pelvis", -1, (0.00, 0.0, 0.95), 0.00, (0, 0, 45)),
    ("left_hip", 0, (0.09, 0.0, 0.88), 0.10, (5, 5, 5)),
    ("right_hip", 0, (-0.09, 0.0, 0.88), 0.10, (5, 5, 5)),
    ("spine1", 0, (0.00, 0.0, 1.07), 0.14, (20, 10, 10)),
    ("left_knee", 1, (0.10, 0.0, 0.50), 0.065, (45, 15, 10)),
    ("right_knee", 2, (-0.10, 0.0, 0.50), 0.065, (45, 15, 10)),
    ("spine2", 3, (0.00, 0.0, 1.20), 0.14, (15, 10, 10)),
    ("left_ankle", 4, (0.10, 0.0, 0.09), 0.05, (60, 5, 5)),
    ("right_ankle", 5, (-0.10, 0.0, 0.09), 0.05, (60, 5, 5)),
    ("spine3", 6, (0.00, 0.0, 1.33), 0.14, (15, 10, 10)),
    ("left_foot", 7, (0.11, -0.12, 0.03), 0.04, (20, 5, 5)),
    ("right_foot", 8, (-0.11, -0.12, 0.03), 0.04, (20, 5, 5)),
    ("neck", 9, (0.00, 0.0, 1.52), 0.06, (15, 10, 15)),
    ("left_collar", 9, (0.07, 0.0, 1.45), 0.06, (5, 5, 10)),
    ("right_collar", 9, (-0.07, 0.0, 1.45), 0.06, (5, 5, 10)),
    ("head", 12, (0.00, 0.0, 1.68), 0.10, (25, 15, 30)),
    ("left_shoulder", 13, (0.18, 0.0, 1.43), 0.06, (30, 40, 20)),
    ("right_shoulder", 14, (-0.18, 0.0, 1.43), 0.06, (30, 40, 20)),
    ("left_elbow", 16, (0.44, 0.0, 1.43), 0.045, (60, 40, 20)),
    ("right_elbow", 17, (-0.44, 0.0, 1.43), 0.045, (60, 40, 20)),
    ("left_wrist", 18, (0.68, 0.0, 1.43), 0.035, (10, 60, 20)),
    ("right_wrist", 19, (-0.68, 0.0, 1.43), 0.035, (10, 60, 20)),
)

RIGS = {"desk": DESK_RIG, "paper": PAPER_RIG}


@dataclass
class BodyTemplate:
    """Canonical joints and the three-level vertex hierarchy of a procedural body."""

    joints: np.ndarray          # [n_J, 3]
    verts_coarse: np.ndarray    # [n_c, 3]
    verts_mid: np.ndarray       # [n_m, 3]
    verts_full: np.ndarray      # [n_V, 3]
    down1: np.ndarray           # [n_m, n_V], row-stochastic
    down2: np.ndarray           # [n_c, n_m], row-stochastic
    adjacency: np.ndarray       # [n_J + n_c] square, symmetric, zero diagonal
    parents: np.ndarray         # [n_J] int, -1 for the root
    joint_names: tuple
    angle_limits: np.ndarray    # [n_J, 3] degrees
    skin_weights: np.ndarray    # [n_V, n_J]
    dense_surface: np.ndarray   # [n_dense, 3] rest-pose surface samples used by sensors
    dense_weights: np.ndarray   # [n_dense, n_J]
    name: str = "desk"
    _hash: str | None = field(default=None, repr=False)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_coarse(self) -> int:
        return len(self.verts_coarse)

    @property
    def n_mid(self) -> int:
        return len(self.verts_mid)

    @property
    def n_full(self) -> int:
        return len(self.verts_full)

    @property
    def n_queries(self) -> int:
        return self.n_joints + self.n_coarse

    def query_positions(self) -> np.ndarray:
        return np.concatenate([self.joints, self.verts_coarse], axis=0)

    def validate(self) -> None:
        for name, m in (("down1", self.down1), ("down2", self.down2)):
            if (m < 0).any() or not np.allclose(m.sum(axis=1), 1.0, atol=1e-5):
                raise TemplateError(f"{name} rows must be nonnegative and sum to 1")
        if self.down1.shape != (self.n_mid, self.n_full) or self.down2.shape != (self.n_coarse, self.n_mid):
            raise TemplateError("down-sampling matrices do not match vertex counts")
        A = self.adjacency
        if A.shape != (self.n_queries, self.n_queries):
            raise TemplateError("adjacency must cover joints and coarse vertices")
        if not np.array_equal(A, A.T) or np.any(np.diag(A) != 0):
            raise TemplateError("adjacency must be symmetric with zero diagonal")

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "joints": self.joints, "verts_coarse": self.verts_coarse,
            "verts_mid": self.verts_mid, "verts_full": self.verts_full,
            "down1": self.down1, "down2": self.down2, "adjacency": self.adjacency,
            "parents": self.parents, "angle_limits": self.angle_limits,
            "skin_weights": self.skin_weights, "dense_surface": self.dense_surface,
            "dense_weights": self.dense_weights,
        }

    def to_bytes(self) -> bytes:
        return arrayio.dumps(self.to_arrays(), {"kind": "template", "name": self.name,
                                                "joint_names": list(self.joint_names)})

    @property
    def hash(self) -> str:
        if self._hash is None:
            self._hash = hashlib.sha256(self.to_bytes()).hexdigest()[:16]
        return self._hash

    def save(self, path) -> str:
        arrayio.write(path, self.to_arrays(), {"kind": "template", "name": self.name,
                                               "joint_names": list(self.joint_names)})
        return self.hash

    @classmethod
    def load(cls, path) -> "BodyTemplate":
        header, a = arrayio.read(path)
        if header.get("kind") != "template":
            raise TemplateError(f"{path} is not a template file")
        t = cls(joints=a["joints"].astype(np.float64), verts_coarse=a["verts_coarse"].astype(np.float64),
                verts_mid=a["verts_mid"].astype(np.float64), verts_full=a["verts_full"].astype(np.float64),
                down1=a["down1"].astype(np.float64), down2=a["down2"].astype(np.float64),
                adjacency=a["adjacency"].astype(np.float64), parents=a["parents"].astype(int),
                joint_names=tuple(header["joint_names"]), angle_limits=a["angle_limits"].astype(np.float64),
                skin_weights=a["skin_weights"].astype(np.float64),
                dense_surface=a["dense_surface"].astype(np.float64),
                dense_weights=a["dense_weights"].astype(np.float64), name=header["name"])
        t.validate()
        return t


def _f32(a: np.ndarray) -> np.ndarray:
    # round through float32 so a saved template reloads bit-identically
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _capsule_samples(rig, n_total: int) -> tuple[np.ndarray, np.ndarray]:
    """Spiral samples on the cylinder around every bone, with linear blend weights."""
    rest = np.array([r[2] for r in rig], dtype=np.float64)
    parents = [r[1] for r in rig]
    bones = [j for j in range(len(rig)) if parents[j] >= 0]
    area = np.array([rig[j][3] * np.linalg.norm(rest[j] - rest[parents[j]]) for j in bones])
    counts = np.maximum(4, np.floor(area / area.sum() * n_total)).astype(int)
    # hand out the remainder to the largest bones first
    order = np.argsort(-area, kind="stable")
    i = 0
    while counts.sum() < n_total:
        counts[order[i % len(order)]] += 1
        i += 1
    while counts.sum() > n_total:
        k = order[i % len(order)]
        if counts[k] > 4:
            counts[k] -= 1
        i += 1
    golden = np.pi * (3.0 - np.sqrt(5.0))
    pts, weights = [], []
    for j, n in zip(bones, counts):
        a, b, r = rest[parents[j]], rest[j], rig[j][3]
        axis = b - a
        axis /= np.linalg.norm(axis)
        helper = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u = np.cross(axis, helper)
        u /= np.linalg.norm(u)
        w = np.cross(axis, u)
        k = np.arange(n)
        t = (k + 0.5) / n
        th = k * golden
        p = a + t[:, None] * (b - a) + r * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * w)
        wt = np.zeros((n, len(rig)))
        own = np.where(t < 0.2, 0.5 + 2.5 * t, 1.0)
        wt[:, j] = own
        wt[:, parents[j]] += 1.0 - own
        pts.append(p)
        weights.append(wt)
    return np.concatenate(pts), np.concatenate(weights)


def kmeans_membership(points: np.ndarray, k: int, seed: int, iters: int = 25) -> np.ndarray:
    """Seeded Lloyd clustering; returns the row-stochastic [k, n] averaging matrix."""
    n = len(points)
    if not 1 <= k <= n:
        raise TemplateError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centers = points[np.sort(rng.choice(n, size=k, replace=False))].copy()
    labels = np.zeros(n, dtype=int)
    for _ in range(iters):
        _, labels = cKDTree(centers).query(points)
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the point worst served by its center
            far = np.argmax(np.linalg.norm(points - centers[labels], axis=1))
            labels[far] = c
            centers[c] = points[far]
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        centers = sums / counts[:, None]
    M = np.zeros((k, n))
    M[labels, np.arange(n)] = 1.0
    return M / M.sum(axis=1, keepdims=True)


def _adjacency(joints: np.ndarray, parents, coarse: np.ndarray, k: int = 4) -> np.ndarray:
    nJ, nc = len(joints), len(coarse)
    A = np.zeros((nJ + nc, nJ + nc))
    tree = cKDTree(coarse)
    _, nn = tree.query(coarse, k=min(k + 1, nc))
    for i, row in enumerate(np.atleast_2d(nn)):
        for j in row[1:]:
            A[nJ + i, nJ + j] = 1.0
    _, jn = tree.query(joints, k=min(2, nc))
    for i, row in enumerate(np.atleast_2d(jn.reshape(nJ, -1))):
        for j in row:
            A[i, nJ + j] = 1.0
    for j, p in enumerate(parents):
        if p >= 0:
            A[j, p] = 1.0
    A = np.maximum(A, A.T)
    np.fill_diagonal(A, 0.0)
    return A


def build_template(profile: str = "desk", n_coarse: int | None = None, n_mid: int | None = None,
                   n_full: int | None = None, n_dense: int | None = None, seed: int = 0) -> BodyTemplate:
    """Procedural capsule body with k-means down-sampling matrices."""
    defaults = {"desk": (48, 128, 384, 2048), "paper": (655, 2619, 10475, 8192)}[profile]
    n_coarse = n_coarse or defaults[0]
    n_mid = n_mid or defaults[1]
    n_full = n_full or defaults[2]
    n_dense = n_dense or defaults[3]
    if not n_coarse <= n_mid <= n_full:
        raise TemplateError("need n_coarse <= n_mid <= n_full")
    rig = RIGS[profile]
    joints = np.array([r[2] for r in rig], dtype=np.float64)
    parents = np.array([r[1] for r in rig], dtype=int)
    verts, skin = _capsule_samples(rig, n_full)
    dense, dense_w = _capsule_samples(rig, n_dense)
    down1 = kmeans_membership(verts, n_mid, seed)
    mid = down1 @ verts
    down2 = kmeans_membership(mid, n_coarse, seed + 1)
    coarse = down2 @ mid
    adjacency = _adjacency(joints, parents, coarse)
    t = BodyTemplate(joints=_f32(joints), verts_coarse=_f32(coarse), verts_mid=_f32(mid),
                     verts_full=_f32(verts), down1=_f32(down1), down2=_f32(down2),
                     adjacency=adjacency, parents=parents, joint_names=tuple(r[0] for r in rig),
                     angle_limits=np.array([r[4] for r in rig], dtype=np.float64),
                     skin_weights=_f32(skin), dense_surface=_f32(dense), dense_weights=_f32(dense_w),
                     name=profile)
    t.validate()
    return t


@lru_cache(maxsize=4)
def cached_template(profile: str = "desk") -> BodyTemplate:
    return build_template(profile)


def upsample_init(down: np.ndarray) -> np.ndarray:
    """Transpose membership of a clustering matrix: each fine vertex copies its cluster center."""
    return (down > 0).T.astype(np.float64)


def downsample_mesh(V_full: np.ndarray, template: BodyTemplate, level: int) -> np.ndarray:
    V_full = np.asarray(V_full)
    if level not in (1, 2):
        raise TemplateError(f"level must be 1 or 2, got {level}")
    if V_full.shape[-2:] != (template.n_full, 3):
        raise TemplateError(f"mesh shape {V_full.shape} does not match template ({template.n_full}, 3)")
    out = template.down1 @ V_full
    if level == 2:
        out = template.down2 @ out
    return out


# -- cameras -------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world points to camera frame."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: np.ndarray
    principal: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = np.asarray(self.focal, dtype=np.float64).reshape(2)
        self.principal = np.asarray(self.principal, dtype=np.float64).reshape(2)
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ProjectionError("camera rotation must be proper (det = +1)")

    def to_camera_frame(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rotation.ravel(), self.translation, self.focal, self.principal])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "Camera":
        a = np.asarray(a, dtype=np.float64)
        R = a[:9].reshape(3, 3)
        # rows were stored as float32; re-orthonormalize
        U, _, Vt = np.linalg.svd(R)
        return cls(U @ Vt, a[9:12], a[12:14], a[14:16])

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


def look_at(eye, target, up=(0.0, 0.0, 1.0), focal=(42.0, 42.0), principal=(16.0, 16.0)) -> Camera:
    """Camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Camera(R, -R @ eye, focal, principal)


def project_points(points: np.ndarray, cam: Camera) -> np.ndarray:
    pc = cam.to_camera_frame(np.asarray(points, dtype=np.float64))
    bad = np.flatnonzero(pc[..., 2] <= 0)
    if bad.size:
        raise ProjectionError(f"point {int(bad[0])} has nonpositive depth {pc.reshape(-1, 3)[bad[0], 2]:.4g}")
    return pc[..., :2] / pc[..., 2:3] * cam.focal + cam.principal


# -- alignment and metrics --------------------------------------------------------------

def procrustes_align(source: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Similarity transform (s, R, t) minimizing ||target - (s * source @ R.T + t)||_F."""
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise AlignmentError(f"shape mismatch {X.shape} vs {Y.shape}")
    if len(X) < 3:
        raise AlignmentError("need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise AlignmentError("source points are degenerate (rank < 2)")
    U, D, Vt = np.linalg.svd(Yc.T @ Xc)
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[-1] = -1.0
    R = (U * S) @ Vt
    s = float((D * S).sum() / (Xc ** 2).sum())
    t = my - s * R @ mx
    return s, R, t


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if np.isnan(pred).any() or np.isnan(gt).any():
        raise MetricError("NaN in metric input")
    return pred, gt


_UNIT = {"m": 1.0, "cm": 100.0, "mm": 1000.0}


def mpjpe(pred_J: np.ndarray, gt_J: np.ndarray, unit: str = "cm") -> float:
    pred, gt = _check(pred_J, gt_J)
    return float(np.linalg.norm(pred - gt, axis=-1).mean() * _UNIT[unit])


def mpve(pred_V: np.ndarray, gt_V: np.ndarray, unit: str = "cm") -> float:
    return mpjpe(pred_V, gt_V, unit)


def pa_mpjpe(pred_J: np.ndarray, gt_J: np.ndarray, unit: str = "cm") -> float:
    pred, gt = _check(pred_J, gt_J)
    s, R, t = procrustes_align(pred, gt)
    return mpjpe(s * pred @ R.T + t, gt, unit)
