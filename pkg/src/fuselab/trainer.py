"""Training loss, Adam, the training loop with combination sampling and masking,
evaluation sweeps and the mask-proportion ablation.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baseline import BaselineError, BaselineFusion
from .config import SLOTS, Profile, get_profile
from .encoders import ModalityInput
from .fusion import AdaptiveFusion, CameraEstimate, MeshPrediction
from .geometry import BodyTemplate, cached_template, downsample_mesh, mpjpe, mpve, pa_mpjpe
from .sampling import Combination, combination_from_id, enumerate_combinations, mask_modalities, sample_combination
from .tensorops import (NonFiniteError, ParamStore, Tensor, as_tensor, backward, concat, load_checkpoint,
                        matmul, save_checkpoint, stack)

BASELINE_COMBO_ID = 0b01111        # img1 + img2 + dep1 + dep2
CORRUPTED = ("noisy_depth", "dropout", "dark")


class LossError(ArithmeticError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class TemplateMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1000.0
    beta: float = 100.0
    gamma: float = 100.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mask_prop: float = 0.3
    profile: str = "desk"
    model: str = "adaptive"
    combo_id: int | None = None          # fixed training combination; None samples all 31
    use_gt_cameras: bool = True
    val_samples: int = 64
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if not 0.0 <= self.mask_prop < 1.0:
            raise ValueError("mask proportion must lie in [0, 1)")
        if self.model not in ("adaptive", "baseline"):
            raise ValueError(f"unknown model {self.model!r}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)

    def to_dict(self) -> dict:
        return asdict(self)


# -- batches ------------------------------------------------------------------------------

@dataclass
class Batch:
    inputs: list                 # ModalityInput with a leading batch axis, one per slot
    cameras: dict                # view -> [Camera] * B
    joints: np.ndarray           # [B, n_J, 3]
    verts: np.ndarray            # [B, n_V, 3]
    verts_mid: np.ndarray
    verts_coarse: np.ndarray

    def __len__(self) -> int:
        return len(self.joints)

    def select(self, combo: Combination) -> list:
        return combo.select(self.inputs)


def make_batch(samples, template: BodyTemplate) -> Batch:
    first = samples[0]
    inputs = []
    for inp in first.inputs:
        payload = np.stack([np.asarray(s.input(inp.kind, inp.view).payload) for s in samples])
        inputs.append(ModalityInput(inp.kind, inp.view, payload))
    cams = {v: [s.cameras[v] for s in samples] for v in first.cameras}
    verts = np.stack([s.verts for s in samples])
    return Batch(inputs, cams, np.stack([s.joints for s in samples]), verts,
                 downsample_mesh(verts, template, 1), downsample_mesh(verts, template, 2))


# -- loss ----------------------------------------------------------------------------------

def project_tensor(points: Tensor, cams: list, image_size: float) -> Tensor:
    """Differentiable pinhole projection of [B, n, 3] with per-item cameras, in [0, 1] units."""
    R = np.stack([c.rotation.T for c in cams]).astype(points.dtype)
    t = np.stack([c.translation for c in cams])[:, None, :].astype(points.dtype)
    f = np.stack([c.focal for c in cams])[:, None, :].astype(points.dtype)
    pp = np.stack([c.principal for c in cams])[:, None, :].astype(points.dtype)
    pc = matmul(points, as_tensor(R)) + t
    uv = pc[..., 0:2] / pc[..., 2:3] * f + pp
    return uv * (1.0 / image_size)


def _project_np(points: np.ndarray, cams: list, image_size: float) -> np.ndarray:
    out = []
    for b, c in enumerate(cams):
        pc = c.to_camera_frame(points[b])
        out.append((pc[:, :2] / pc[:, 2:3] * c.focal + c.principal) / image_size)
    return np.stack(out)


def _l1(pred: Tensor, gt: np.ndarray, name: str) -> Tensor:
    if not np.all(np.isfinite(pred.data)) or not np.all(np.isfinite(gt)):
        raise LossError(f"non-finite values in loss term {name!r}")
    return (pred - gt.astype(pred.dtype)).abs().mean()


def compute_loss(pred: MeshPrediction, gt, gt_cameras: dict | None = None, w: LossWeights = LossWeights(),
                 image_size: float = 32.0) -> tuple[Tensor, dict]:
    """Weighted sum of mean-per-element L1 terms.

    ``gt`` provides ``joints``, ``verts``, ``verts_mid`` and ``verts_coarse``
    (a :class:`Batch` or a dict). The 2D term covers the image views in
    ``pred.cameras`` and is 0 when there are none.
    """
    get = (lambda k: gt[k]) if isinstance(gt, dict) else (lambda k: getattr(gt, k))
    terms = {
        "joints": _l1(pred.joints, np.asarray(get("joints")), "joints"),
        "verts": _l1(pred.verts_full, np.asarray(get("verts")), "verts"),
        "verts_mid": _l1(pred.verts_mid, np.asarray(get("verts_mid")), "verts_mid"),
        "verts_coarse": _l1(pred.verts_coarse, np.asarray(get("verts_coarse")), "verts_coarse"),
    }
    pred2d, gt2d = [], []
    for view, cam in sorted(pred.cameras.items()):
        if gt_cameras is None or view not in gt_cameras:
            raise LossError(f"2D term needs ground-truth cameras for view {view}")
        target = _project_np(np.asarray(get("joints")), gt_cameras[view], image_size)
        if isinstance(cam, CameraEstimate):
            pred2d.append(cam.project(pred.joints) * (1.0 / image_size))
        else:
            pred2d.append(project_tensor(pred.joints, cam, image_size))
        gt2d.append(target)
    if pred2d:
        terms["joints_2d"] = _l1(concat(pred2d, axis=1), np.concatenate(gt2d, axis=1), "joints_2d")
    for name, t in terms.items():
        if not np.isfinite(t.data):
            raise LossError(f"loss term {name!r} is not finite")
    total = terms["joints"] * w.alpha \
        + (terms["verts"] + terms["verts_mid"] + terms["verts_coarse"]) * w.gamma
    if "joints_2d" in terms:
        total = total + terms["joints_2d"] * w.beta
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown.setdefault("joints_2d", 0.0)
    breakdown["total"] = float(total.data)
    return total, breakdown


# -- optimizer -------------------------------------------------------------------------------

class Adam:
    """Adaptive-moment update with bias correction (defaults 0.9 / 0.999 / 1e-8)."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for path, g in sorted(grads.items()):
            t = params[path]
            m = self.m.setdefault(path, np.zeros_like(t.data))
            v = self.v.setdefault(path, np.zeros_like(t.data))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(t.data.dtype)


# -- models -------------------------------------------------------------------------------------

def build_model(kind: str, profile: Profile, template: BodyTemplate, params: ParamStore):
    if kind == "adaptive":
        return AdaptiveFusion(profile, template, params)
    if kind == "baseline":
        return BaselineFusion(profile, template, params)
    raise ValueError(f"unknown model {kind!r}")


def supports(model, combo: Combination) -> bool:
    if model.kind == "adaptive":
        return True
    # the painting baseline is trained on images plus depth only
    kinds = {m[0] for m in combo.members}
    return "image" in kinds and "depth" in kinds and "radar" not in kinds


def training_combos(cfg: TrainConfig) -> list[Combination]:
    if cfg.combo_id is not None:
        return [combination_from_id(cfg.combo_id)]
    if cfg.model == "baseline":
        return [combination_from_id(BASELINE_COMBO_ID)]
    return enumerate_combinations(SLOTS)


def init_model(cfg: TrainConfig, sample, template: BodyTemplate | None = None, dtype=np.float32):
    """Fresh model with every parameter materialized by one full forward."""
    profile = get_profile(cfg.profile)
    template = template or cached_template(profile.name)
    params = ParamStore(cfg.seed, dtype)
    model = build_model(cfg.model, profile, template, params)
    batch = make_batch([sample], template)
    full = combination_from_id(BASELINE_COMBO_ID if cfg.model == "baseline" else (1 << len(SLOTS)) - 1)
    model.forward(batch.select(full), gt_cameras=batch.cameras, use_gt_cameras=cfg.use_gt_cameras)
    params.freeze()
    return model


def load_model(path, dtype=np.float32):
    params, header = load_checkpoint(path, dtype)
    cfg = header["config"]
    profile = get_profile(cfg["profile"])
    template = cached_template(profile.name)
    if header["meta"].get("template_hash") not in (None, template.hash):
        raise TemplateMismatch("checkpoint was trained on a different body template")
    model = build_model(cfg["model"], profile, template, params)
    return model, header


# -- training ------------------------------------------------------------------------------------

def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("shuffle", "combo", "mask", "fps")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


def _fmt(x: float) -> float:
    return float(f"{x:.6g}")


def train(dataset, cfg: TrainConfig, out_dir, val_dataset=None, log_steps: bool = False):
    """Train one model; returns (model, list of epoch records).

    Writes ``metrics.ndjson`` plus ``checkpoint.bin`` (latest) and
    ``epoch{e:03d}.bin`` under ``out_dir``. A non-finite loss or gradient aborts
    with :class:`TrainingDiverged`; the last completed epoch's checkpoint is kept.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile = get_profile(cfg.profile)
    template = cached_template(profile.name)
    if dataset.template_hash != template.hash:
        raise TemplateMismatch("dataset was generated with a different body template")
    model = init_model(cfg, dataset[0], template)
    params = model.params
    opt = Adam(cfg.lr)
    rng = _streams(cfg.seed)
    combos = training_combos(cfg)
    mask_p = cfg.mask_prop if cfg.model == "adaptive" else 0.0
    meta = {"template_hash": template.hash, "profile": profile.name}
    log_path = out / "metrics.ndjson"
    records = []
    step = 0
    with open(log_path, "w") as log:
        for epoch in range(1, cfg.epochs + 1):
            order = rng["shuffle"].permutation(len(dataset))
            sums: dict[str, float] = {}
            nb = 0
            for lo in range(0, len(order), cfg.batch_size):
                batch = make_batch([dataset[int(i)] for i in order[lo:lo + cfg.batch_size]], template)
                combo = sample_combination(rng["combo"], combos)
                combo = mask_modalities(combo, mask_p, rng["mask"])
                try:
                    pred = model.forward(batch.select(combo), training=True, rng=rng["fps"],
                                         gt_cameras=batch.cameras, use_gt_cameras=cfg.use_gt_cameras)
                    loss, parts = compute_loss(pred, batch, batch.cameras, cfg.weights, profile.image_size)
                    grads = backward(loss, params)
                except (NonFiniteError, LossError) as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}") from exc
                if not all(np.isfinite(g).all() for g in grads.values()):
                    raise TrainingDiverged(f"epoch {epoch} step {step}: non-finite gradient")
                opt.step(params, grads)
                step += 1
                nb += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                if log_steps:
                    log.write(json.dumps({"epoch": epoch, "step": step, "combo": combo.id,
                                          "loss": {k: _fmt(v) for k, v in sorted(parts.items())}},
                                         sort_keys=True) + "\n")
            rec = {"epoch": epoch, "step": step,
                   "loss": {k: _fmt(v / nb) for k, v in sorted(sums.items())}}
            if val_dataset is not None and len(val_dataset):
                val = quick_validate(model, val_dataset, cfg.val_samples)
                rec.update({k: _fmt(v) for k, v in val.items()})
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            log.flush()
            records.append(rec)
            save_checkpoint(params, out / f"epoch{epoch:03d}.bin", cfg.to_dict(), {**meta, "epoch": epoch})
            save_checkpoint(params, out / "checkpoint.bin", cfg.to_dict(), {**meta, "epoch": epoch})
    if cfg.epochs == 0:
        save_checkpoint(params, out / "checkpoint.bin", cfg.to_dict(), {**meta, "epoch": 0})
    return model, records


# -- evaluation ------------------------------------------------------------------------------------

def predict(model, samples, combo: Combination, batch_size: int = 32, use_gt_cameras: bool = True):
    """Joints and full vertices for every sample under one combination."""
    joints, verts = [], []
    for lo in range(0, len(samples), batch_size):
        batch = make_batch(samples[lo:lo + batch_size], model.template)
        pred = model.forward(batch.select(combo), gt_cameras=batch.cameras, use_gt_cameras=use_gt_cameras)
        joints.append(pred.joints.data)
        verts.append(pred.verts_full.data)
    return np.concatenate(joints), np.concatenate(verts)


def sample_metrics(pred_j, pred_v, samples) -> np.ndarray:
    """[n, 3] per-sample (MPJPE, MPVE, PA-MPJPE) in centimeters."""
    return np.array([[mpjpe(pj, s.joints), mpve(pv, s.verts), pa_mpjpe(pj, s.joints)]
                     for pj, pv, s in zip(pred_j, pred_v, samples)])


def quick_validate(model, dataset, n: int) -> dict:
    idx = dataset.by_condition("clean")[:n] if hasattr(dataset, "by_condition") else range(min(n, len(dataset)))
    samples = [dataset[i] for i in idx]
    combo = combination_from_id(BASELINE_COMBO_ID if model.kind == "baseline" else (1 << len(SLOTS)) - 1)
    pj, pv = predict(model, samples, combo)
    m = sample_metrics(pj, pv, samples)
    return {"val_mpjpe": float(m[:, 0].mean()), "val_mpve": float(m[:, 1].mean())}


@dataclass
class EvalRow:
    combo_id: int
    combo: str
    condition: str
    n: int
    mpjpe: float
    mpve: float
    pa_mpjpe: float
    per_sample: np.ndarray | None = field(default=None, repr=False)


def evaluate(model, dataset, combos, conditions, batch_size: int = 32,
             template_hash: str | None = None, keep_per_sample: bool = False, jobs: int = 1) -> list[EvalRow]:
    """One row per (combination, condition) the model supports, single weight set throughout.

    ``jobs`` > 1 evaluates cells on a thread pool; forwards only read the parameters,
    and the row order does not depend on it.
    """
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    expected = template_hash or model.template.hash
    if dataset.template_hash != expected:
        raise TemplateMismatch(f"dataset template {dataset.template_hash} != checkpoint template {expected}")
    cells = []
    for cond in conditions:
        samples = [dataset[i] for i in dataset.by_condition(cond)]
        if samples:
            cells += [(cond, combo, samples) for combo in combos if supports(model, combo)]

    def run(cell):
        cond, combo, samples = cell
        pj, pv = predict(model, samples, combo, batch_size)
        m = sample_metrics(pj, pv, samples)
        return EvalRow(combo.id, combo.label, cond, len(samples), float(m[:, 0].mean()),
                       float(m[:, 1].mean()), float(m[:, 2].mean()), m if keep_per_sample else None)

    if jobs == 1:
        rows = [run(c) for c in cells]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            rows = list(pool.map(run, cells))
    rows.sort(key=lambda r: (r.combo_id, conditions.index(r.condition)))
    return rows


def write_table(rows: list[EvalRow], path) -> None:
    """Tab-separated table: one line per combination, metric columns per condition."""
    conds = list(dict.fromkeys(r.condition for r in rows))
    cells = {(r.combo_id, r.condition): r for r in rows}
    combos = list(dict.fromkeys((r.combo_id, r.combo) for r in rows))
    head = ["combo_id", "combo"] + [f"{c}.{m}" for c in conds for m in ("mpjpe", "mpve", "pa_mpjpe")]
    lines = ["\t".join(head)]
    for cid, label in combos:
        vals = []
        for c in conds:
            r = cells.get((cid, c))
            vals += ["nan"] * 3 if r is None else [f"{r.mpjpe:.4f}", f"{r.mpve:.4f}", f"{r.pa_mpjpe:.4f}"]
        lines.append("\t".join([str(cid), label] + vals))
    Path(path).write_text("\n".join(lines) + "\n")


def ablate_mask(train_set, test_set, proportions, base: TrainConfig, out_dir,
                conditions=CORRUPTED) -> list[dict]:
    """Train one model per mask proportion; full-combination MPJPE per condition."""
    full = [combination_from_id((1 << len(SLOTS)) - 1)]
    rows = []
    for p in proportions:
        cfg = TrainConfig(**{**base.to_dict(), "mask_prop": float(p), "weights": base.weights})
        model, _ = train(train_set, cfg, Path(out_dir) / f"mask_{p:.2f}")
        res = evaluate(model, test_set, full, list(conditions))
        row = {"mask_prop": float(p)}
        row.update({r.condition: r.mpjpe for r in res})
        row["mean"] = float(np.mean([r.mpjpe for r in res])) if res else math.nan
        rows.append(row)
    return rows
