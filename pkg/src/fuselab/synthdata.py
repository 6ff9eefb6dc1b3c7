"""Procedural scenes: posed bodies, a two-view camera rig, simulated image, depth and
radar sensors, and the adverse-condition corruptions.

Every sample is drawn from its own generator seeded by ``(run_seed, index)`` so
datasets can be produced in any order and are byte-reproducible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import arrayio
from .config import DESK, Profile
from .encoders import ModalityInput
from .geometry import BodyTemplate, Camera, cached_template, downsample_mesh, look_at

CONDITIONS = ("clean", "noisy_depth", "dropout", "dark")
LIMB_JOINTS_EXCLUDE = ("pelvis",)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    point_keep_fraction: float = 1.0
    limb_drop_count: tuple = (0, 0)
    target_point_count: int | None = None
    pixel_noise_sigma: float = 0.0
    brightness_scale: float = 1.0
    lower_body_margin: float | None = None   # None keeps the lower body
    limb_radius: float = 0.15

    def __post_init__(self):
        if not 0.0 < self.point_keep_fraction <= 1.0:
            raise ValueError(f"keep fraction must lie in (0, 1], got {self.point_keep_fraction}")
        if self.target_point_count is not None and self.target_point_count < 1:
            raise ValueError("target point count must be at least 1")
        lo, hi = self.limb_drop_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad limb drop range {self.limb_drop_count}")


def noisy_depth_spec(profile: Profile = DESK) -> CorruptionSpec:
    return CorruptionSpec(limb_drop_count=(1, 5), target_point_count=profile.noisy_depth_points,
                          lower_body_margin=0.05)


DARK_SPEC = CorruptionSpec(pixel_noise_sigma=0.05, brightness_scale=0.25)


@dataclass
class SceneConfig:
    profile: Profile = DESK
    template: BodyTemplate | None = None
    depth_noise: float = 0.005
    radar_noise: float = 0.03
    radar_outlier_rate: float = 0.05
    camera_jitter: float = 0.05          # meters, applied to each camera center
    root_translation: float = 0.15
    visibility_raster: int = 64
    visibility_tolerance: float = 0.04

    def __post_init__(self):
        if self.template is None:
            self.template = cached_template(self.profile.name)


@dataclass
class SceneSample:
    joints: np.ndarray                    # [n_J, 3]
    verts: np.ndarray                     # [n_V, 3]
    inputs: list                          # ModalityInput per slot
    cameras: dict                         # view -> Camera
    condition: str = "clean"
    sample_id: str = ""
    surface: np.ndarray | None = field(default=None, repr=False)  # posed dense surface, not stored

    def input(self, kind: str, view: int) -> ModalityInput:
        for inp in self.inputs:
            if inp.kind == kind and inp.view == view:
                return inp
        raise KeyError(f"sample has no {kind} view {view}")


# -- articulation ----------------------------------------------------------------------

def random_pose(rng: np.random.Generator, template: BodyTemplate, root_translation: float = 0.15
                ) -> tuple[np.ndarray, np.ndarray]:
    """Euler angles [n_J, 3] in degrees within the limits, and a root xy offset."""
    lim = template.angle_limits
    angles = rng.uniform(-1.0, 1.0, size=lim.shape) * lim
    shift = np.zeros(3)
    shift[:2] = rng.uniform(-root_translation, root_translation, size=2)
    return angles, shift


def joint_transforms(template: BodyTemplate, angles: np.ndarray, shift=None
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Global rotations [n_J, 3, 3], posed joints, and per-bone affine maps.

    Bone ``j`` (parent -> j) maps a rest point ``x`` to
    ``p[parent] + G[j] (x - r[parent])``; the root maps ``x`` to
    ``p[0] + G[0] (x - r[0])``.
    """
    rest = template.joints
    parents = template.parents
    n = len(rest)
    local = Rotation.from_euler("xyz", np.asarray(angles), degrees=True).as_matrix()
    G = np.zeros((n, 3, 3))
    p = np.zeros((n, 3))
    origin_rest = np.zeros((n, 3))
    origin_posed = np.zeros((n, 3))
    shift = np.zeros(3) if shift is None else np.asarray(shift, dtype=np.float64)
    for j in range(n):
        par = parents[j]
        if par < 0:
            G[j] = local[j]
            p[j] = rest[j] + shift
            origin_rest[j], origin_posed[j] = rest[j], p[j]
        else:
            G[j] = G[par] @ local[j]
            p[j] = p[par] + G[j] @ (rest[j] - rest[par])
            origin_rest[j], origin_posed[j] = rest[par], p[par]
    return G, p, np.stack([origin_rest, origin_posed], axis=1)


def skin(points: np.ndarray, weights: np.ndarray, G: np.ndarray, origins: np.ndarray) -> np.ndarray:
    """Linear blend of the per-bone maps; ``weights`` is [n, n_J] with rows summing to 1."""
    local = points[:, None, :] - origins[None, :, 0, :]                  # [n, n_J, 3]
    moved = np.einsum("jab,njb->nja", G, local) + origins[None, :, 1, :]
    return np.einsum("nj,nja->na", weights, moved)


def pose_body(template: BodyTemplate, angles: np.ndarray, shift=None):
    """Posed joints, full vertices and dense surface samples."""
    G, p, origins = joint_transforms(template, angles, shift)
    verts = skin(template.verts_full, template.skin_weights, G, origins)
    dense = skin(template.dense_surface, template.dense_weights, G, origins)
    return p, verts, dense


# -- cameras and sensors ---------------------------------------------------------------

def camera_rig(profile: Profile, rng: np.random.Generator | None = None, jitter: float = 0.0) -> dict:
    """Front camera (view 1) and an oblique side camera (view 2), both aimed at the torso."""
    c = profile.image_size / 2.0
    f = (profile.focal, profile.focal)
    eyes = {1: np.array([0.0, -3.0, 0.9]), 2: np.array([2.6, -1.5, 0.9])}
    target = np.array([0.0, 0.0, 0.9])
    cams = {}
    for view in (1, 2):
        eye = eyes[view]
        if rng is not None and jitter > 0:
            eye = eye + rng.normal(0.0, jitter, size=3)
        cams[view] = look_at(eye, target, focal=f, principal=(c, c))
    return cams


def _pixel_coords(points: np.ndarray, cam: Camera, scale: float = 1.0):
    pc = cam.to_camera_frame(points)
    z = pc[:, 2]
    uv = pc[:, :2] / np.maximum(z, 1e-9)[:, None] * (cam.focal * scale) + cam.principal * scale
    return uv, z


def render_image(surface: np.ndarray, cam: Camera, profile: Profile) -> np.ndarray:
    """Z-buffered splat of the surface samples shaded by inverse depth; background 0."""
    size = profile.image_size
    uv, z = _pixel_coords(surface, cam)
    ij = np.floor(uv).astype(int)
    ok = (z > 0) & (ij[:, 0] >= 0) & (ij[:, 0] < size) & (ij[:, 1] >= 0) & (ij[:, 1] < size)
    zbuf = np.full(size * size, np.inf)
    np.minimum.at(zbuf, ij[ok, 1] * size + ij[ok, 0], z[ok])
    ref = np.linalg.norm(cam.center - np.array([0.0, 0.0, 0.9]))
    shade = np.where(np.isfinite(zbuf), np.clip(0.6 + (ref - zbuf) * 0.8, 0.1, 1.0), 0.0)
    img = np.repeat(shade.reshape(size, size, 1), profile.image_channels, axis=2)
    return img.astype(np.float32)


def visible_mask(surface: np.ndarray, cam: Camera, raster: int, size: int, tol: float) -> np.ndarray:
    scale = raster / size
    uv, z = _pixel_coords(surface, cam, scale)
    ij = np.floor(uv).astype(int)
    ok = (z > 0) & (ij[:, 0] >= 0) & (ij[:, 0] < raster) & (ij[:, 1] >= 0) & (ij[:, 1] < raster)
    flat = np.where(ok, ij[:, 1] * raster + ij[:, 0], 0)
    zbuf = np.full(raster * raster, np.inf)
    np.minimum.at(zbuf, flat[ok], z[ok])
    return ok & (z <= zbuf[flat] + tol)


def depth_cloud(surface: np.ndarray, cam: Camera, n: int, cfg: SceneConfig, rng) -> np.ndarray:
    vis = np.flatnonzero(visible_mask(surface, cam, cfg.visibility_raster, cfg.profile.image_size,
                                      cfg.visibility_tolerance))
    pick = np.sort(rng.choice(vis, size=n, replace=len(vis) < n))
    pts = surface[pick] + rng.normal(0.0, cfg.depth_noise, size=(n, 3))
    return pts.astype(np.float32)


def radar_cloud(surface: np.ndarray, cam: Camera, n: int, cfg: SceneConfig, rng,
                center: np.ndarray) -> np.ndarray:
    pts = depth_cloud(surface, cam, n, replace(cfg, depth_noise=cfg.radar_noise), rng).astype(np.float64)
    outlier = rng.random(n) < cfg.radar_outlier_rate
    box = center + rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([1.0, 1.0, 0.9])
    pts[outlier] = box[outlier]
    return pts.astype(np.float32)


# -- samples -----------------------------------------------------------------------------

def sample_rng(run_seed: int, index: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(run_seed), int(index), *extra])


def generate_sample(rng: np.random.Generator, config: SceneConfig | None = None,
                    angles: np.ndarray | None = None, shift=None) -> SceneSample:
    """One clean scene. ``angles``/``shift`` override the random pose when given."""
    cfg = config or SceneConfig()
    tpl, prof = cfg.template, cfg.profile
    if angles is None:
        angles, shift = random_pose(rng, tpl, cfg.root_translation)
    joints, verts, dense = pose_body(tpl, angles, shift)
    cams = camera_rig(prof, rng, cfg.camera_jitter)
    inputs = [ModalityInput("image", v, render_image(dense, cams[v], prof)) for v in (1, 2)]
    inputs += [ModalityInput("depth", v, depth_cloud(dense, cams[v], prof.n_depth, cfg, rng)) for v in (1, 2)]
    inputs.append(ModalityInput("radar", 1, radar_cloud(dense, cams[1], prof.n_radar, cfg, rng, joints[0])))
    return SceneSample(joints=joints.astype(np.float32).astype(np.float64),
                       verts=verts.astype(np.float32).astype(np.float64),
                       inputs=inputs, cameras=cams, surface=dense)


# -- corruption --------------------------------------------------------------------------

def pad_by_repetition(points: np.ndarray, n: int, fallback: np.ndarray) -> np.ndarray:
    """Cycle through ``points`` until ``n`` rows; an empty cloud becomes ``fallback`` repeated."""
    if len(points) == 0:
        points = np.asarray(fallback).reshape(1, 3)
    return points[np.arange(n) % len(points)]


def corrupt(inp: ModalityInput, spec: CorruptionSpec, gt_joints: np.ndarray, rng: np.random.Generator,
            template: BodyTemplate | None = None) -> ModalityInput:
    """Apply ``spec`` to one input; point identity is preserved, only sensor noise is added."""
    if inp.kind == "image":
        img = np.asarray(inp.payload, dtype=np.float64) * spec.brightness_scale
        if spec.pixel_noise_sigma > 0:
            img = img + rng.normal(0.0, spec.pixel_noise_sigma, size=img.shape)
        return ModalityInput(inp.kind, inp.view, np.clip(img, 0.0, 1.0).astype(np.float32))
    pts = np.asarray(inp.payload)
    keep = np.ones(len(pts), dtype=bool)
    if spec.lower_body_margin is not None:
        keep &= pts[:, 2] >= gt_joints[0, 2] - spec.lower_body_margin
    lo, hi = spec.limb_drop_count
    if hi > 0:
        names = template.joint_names if template is not None else None
        limbs = [j for j in range(1, len(gt_joints))
                 if names is None or names[j] not in LIMB_JOINTS_EXCLUDE]
        count = min(int(rng.integers(lo, hi + 1)), len(limbs))
        for j in rng.choice(limbs, size=count, replace=False):
            keep &= np.linalg.norm(pts - gt_joints[j], axis=1) >= spec.limb_radius
    idx = np.flatnonzero(keep)
    if spec.point_keep_fraction < 1.0 and len(idx):
        m = max(1, int(round(spec.point_keep_fraction * len(idx))))
        idx = np.sort(rng.choice(idx, size=m, replace=False))
    target = spec.target_point_count or len(pts)
    if len(idx) > target:
        idx = np.sort(rng.choice(idx, size=target, replace=False))
    nearest = pts[np.argmin(np.linalg.norm(pts - gt_joints[0], axis=1))]
    out = pad_by_repetition(pts[idx], target, nearest)
    return ModalityInput(inp.kind, inp.view, out.astype(np.float32))


def occlude(sample: SceneSample) -> list:
    """Blank the left half of image 1 and drop view-1 points behind that half."""
    cam = sample.cameras[1]
    half = cam.principal[0]
    out = []
    for inp in sample.inputs:
        payload = np.array(inp.payload)
        if inp.kind == "image" and inp.view == 1:
            payload[:, : int(half)] = 0.0
        elif inp.view == 1 and inp.kind in ("depth", "radar"):
            uv, z = _pixel_coords(payload.astype(np.float64), cam)
            kept = payload[(uv[:, 0] >= half) | (z <= 0)]
            nearest = payload[np.argmin(np.linalg.norm(payload - sample.joints[0], axis=1))]
            payload = pad_by_repetition(kept, len(payload), nearest)
        out.append(ModalityInput(inp.kind, inp.view, payload.astype(np.float32)))
    return out


def apply_condition(sample: SceneSample, condition: str, rng: np.random.Generator,
                    profile: Profile = DESK, template: BodyTemplate | None = None) -> SceneSample:
    if condition not in CONDITIONS:
        raise DatasetError(f"unknown condition {condition!r}; choose from {CONDITIONS}")
    if condition == "clean":
        inputs = list(sample.inputs)
    elif condition == "noisy_depth":
        spec = noisy_depth_spec(profile)
        inputs = [corrupt(i, spec, sample.joints, rng, template) if i.kind == "depth" else i
                  for i in sample.inputs]
    elif condition == "dark":
        inputs = [corrupt(i, DARK_SPEC, sample.joints, rng) if i.kind == "image" else i
                  for i in sample.inputs]
    else:
        inputs = occlude(sample)
    return replace(sample, inputs=inputs, condition=condition)


# -- dataset on disk ----------------------------------------------------------------------

INDEX_NAME = "index.json"


def sample_arrays(sample: SceneSample) -> dict[str, np.ndarray]:
    arrays = {"gt.joints": sample.joints, "gt.verts": sample.verts}
    for inp in sample.inputs:
        arrays[f"input.{inp.slot.label}"] = np.asarray(inp.payload)
    for view, cam in sample.cameras.items():
        arrays[f"camera.{view}"] = cam.to_array()
    return arrays


def write_split(directory, run_seed: int, n_samples: int, conditions=("clean",),
                config: SceneConfig | None = None, offset: int = 0) -> dict:
    """Write ``n_samples`` base scenes, each paired across ``conditions``."""
    cfg = config or SceneConfig()
    for c in conditions:
        if c not in CONDITIONS:
            raise DatasetError(f"unknown condition {c!r}; choose from {CONDITIONS}")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_samples):
        index = offset + i
        base = generate_sample(sample_rng(run_seed, index), cfg)
        for ci, cond in enumerate(conditions):
            s = apply_condition(base, cond, sample_rng(run_seed, index, CONDITIONS.index(cond) + 1),
                                cfg.profile, cfg.template)
            sid = f"{index:06d}_{cond}"
            fname = f"{sid}.fla"
            digest = arrayio.write(d / fname, sample_arrays(s),
                                   {"sample_id": sid, "condition": cond, "index": index})
            entries.append({"id": sid, "condition": cond, "file": fname, "sha256": digest})
    index = {"profile": cfg.profile.name, "template_hash": cfg.template.hash, "seed": int(run_seed),
             "conditions": list(conditions), "samples": entries}
    (d / INDEX_NAME).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return index


def read_index(directory) -> dict:
    path = Path(directory) / INDEX_NAME
    if not path.is_file():
        raise DatasetError(f"no dataset index at {path}")
    return json.loads(path.read_text())


def load_sample(directory, entry: dict) -> SceneSample:
    header, a = arrayio.read(Path(directory) / entry["file"])
    inputs = []
    for name in sorted(a):
        if not name.startswith("input."):
            continue
        label = name.split(".", 1)[1]
        kind = {"img": "image", "dep": "depth", "radar": "radar"}[label.rstrip("12")]
        view = int(label[-1]) if label[-1].isdigit() else 1
        inputs.append(ModalityInput(kind, view, a[name]))
    inputs.sort(key=lambda i: (("image", "depth", "radar").index(i.kind), i.view))
    cams = {int(k.split(".")[1]): Camera.from_array(v) for k, v in a.items() if k.startswith("camera.")}
    return SceneSample(joints=a["gt.joints"].astype(np.float64), verts=a["gt.verts"].astype(np.float64),
                       inputs=inputs, cameras=cams, condition=header["condition"],
                       sample_id=header["sample_id"])


class Dataset:
    """Read-only view of one split, optionally restricted to some conditions."""

    def __init__(self, directory, conditions=None):
        self.directory = Path(directory)
        self.index = read_index(directory)
        entries = self.index["samples"]
        if conditions is not None:
            entries = [e for e in entries if e["condition"] in conditions]
        self.entries = entries
        self._cache: dict[str, SceneSample] = {}

    @property
    def template_hash(self) -> str:
        return self.index["template_hash"]

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> SceneSample:
        e = self.entries[i]
        if e["id"] not in self._cache:
            self._cache[e["id"]] = load_sample(self.directory, e)
        return self._cache[e["id"]]

    def by_condition(self, condition: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e["condition"] == condition]


def gt_coarse(verts: np.ndarray, template: BodyTemplate) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (mid, coarse) meshes for the auxiliary loss terms."""
    return downsample_mesh(verts, template, 1), downsample_mesh(verts, template, 2)
