"""Command-line entry point: ``fuselab <command> [flags]``.

Every command writes under ``--out`` and finishes with a ``manifest.json``
listing the produced files and the hash of the resolved configuration.
Settings resolve as flags > ``--config`` JSON file > built-in defaults;
``FUSELAB_SEED`` replaces the built-in default seed.

Exit codes: 0 success, 1 internal failure (including a failed gradient
check), 2 usage or input error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import BaselineFusion
from .config import SLOTS, get_profile
from .fusion import AdaptiveFusion
from .geometry import cached_template
from .sampling import CombinationError, combination_from_id, enumerate_combinations
from .synthdata import CONDITIONS, Dataset, DatasetError, SceneConfig, generate_sample, sample_rng, write_split
from .tensorops import ParamStore, as_tensor, config_hash, grad_check_detailed, multi_head_attention
from .trainer import (BASELINE_COMBO_ID, CORRUPTED, TemplateMismatch, TrainConfig, ablate_mask, compute_loss,
                      evaluate, load_model, make_batch, train, write_table)

GRAD_TOLERANCE = 1e-4
GRAD_MODULES = ("attention", "pointops", "encoders", "fusion", "baseline")
FULL_COMBO = (1 << len(SLOTS)) - 1


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 2."""


# -- argument parsing --------------------------------------------------------------

DEFAULTS = {
    "gen-data": {"samples": 256, "conditions": "clean", "offset": 0, "profile": "desk"},
    "train": {"epochs": 4, "batch_size": 16, "lr": 1e-3, "mask_prop": 0.3, "combo_id": None,
              "model": "adaptive", "profile": "desk", "val_data": None, "log_steps": False},
    "eval": {"combo_id": None, "conditions": None, "batch_size": 32, "jobs": 1},
    "ablate": {"proportions": "0.0,0.1,0.3,0.5", "epochs": 4, "batch_size": 16, "lr": 1e-3,
               "profile": "desk", "conditions": ",".join(CORRUPTED)},
    "grad-check": {"modules": ",".join(GRAD_MODULES), "entries": 2, "min_total": 200,
                   "inject_error": False},
    "attn-dump": {"samples": 4, "condition": "clean", "combo_id": FULL_COMBO},
    "compare": {"epochs": 4, "batch_size": 16, "lr": 1e-3, "mask_prop": 0.3, "profile": "desk",
                "adaptive_ckpt": None, "baseline_ckpt": None},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuselab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--config", help="JSON file of settings (overridden by flags)")
        s.add_argument("--seed", type=int)
        return s

    s = cmd("gen-data", "generate a synthetic split")
    s.add_argument("--samples", type=int)
    s.add_argument("--conditions", help=f"comma list from {','.join(CONDITIONS)}")
    s.add_argument("--offset", type=int, help="first sample index (keeps splits disjoint)")
    s.add_argument("--profile")

    s = cmd("train", "train one model")
    s.add_argument("--data", help="training split directory")
    s.add_argument("--val-data", dest="val_data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mask-prop", dest="mask_prop", type=float)
    s.add_argument("--combo-id", dest="combo_id", type=int)
    s.add_argument("--model", choices=("adaptive", "baseline"))
    s.add_argument("--profile")
    s.add_argument("--log-steps", dest="log_steps", action="store_true")

    s = cmd("eval", "evaluate a checkpoint over combinations and conditions")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--combo-id", dest="combo_id", type=int)
    s.add_argument("--conditions")
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--jobs", type=int, help="parallel evaluation workers")

    s = cmd("ablate", "train one model per mask proportion and compare")
    s.add_argument("--data")
    s.add_argument("--test-data", dest="test_data")
    s.add_argument("--proportions")
    s.add_argument("--conditions")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--profile")

    s = cmd("grad-check", "finite-difference check of every module's gradients")
    s.add_argument("--modules", help=f"comma list from {','.join(GRAD_MODULES)}; empty checks nothing")
    s.add_argument("--entries", type=int, help="entries checked per parameter tensor")
    s.add_argument("--min-total", dest="min_total", type=int)
    s.add_argument("--inject-error", dest="inject_error", action="store_true",
                   help="perturb the analytic gradients (negative control)")

    s = cmd("attn-dump", "export last-layer fusion attention weights")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--samples", type=int)
    s.add_argument("--condition")
    s.add_argument("--combo-id", dest="combo_id", type=int)

    s = cmd("compare", "adaptive vs painting baseline under clean and noisy depth")
    s.add_argument("--data")
    s.add_argument("--test-data", dest="test_data")
    s.add_argument("--adaptive-ckpt", dest="adaptive_ckpt")
    s.add_argument("--baseline-ckpt", dest="baseline_ckpt")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mask-prop", dest="mask_prop", type=float)
    s.add_argument("--profile")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags (in increasing priority)."""
    flags = vars(args).copy()
    command = flags.pop("command")
    cfg = {"seed": int(os.environ.get("FUSELAB_SEED", 0)), **DEFAULTS[command]}
    path = flags.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        unknown = set(loaded) - set(cfg) - {"out", "data", "test_data", "checkpoint"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    cfg.update(flags)
    cfg["command"] = command
    return cfg


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg.get(k) is None:
            raise UsageError(f"--{k.replace('_', '-')} is required")


def _dataset(path, conditions=None) -> Dataset:
    if path is None or not Path(path).is_dir():
        raise UsageError(f"dataset directory {path} does not exist")
    try:
        return Dataset(path, conditions)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc


def _checkpoint(path):
    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_model(path)


def _split(text, cast=str) -> list:
    if text is None:
        return []
    if isinstance(text, (list, tuple)):
        return [cast(t) for t in text]
    return [cast(t) for t in str(text).split(",") if t.strip()]


def _conditions(text) -> list[str]:
    conds = _split(text)
    bad = [c for c in conds if c not in CONDITIONS]
    if bad:
        raise UsageError(f"unknown conditions {bad}; choose from {list(CONDITIONS)}")
    return conds


def _combos(combo_id) -> list:
    if combo_id is None:
        return enumerate_combinations(SLOTS)
    try:
        return [combination_from_id(int(combo_id))]
    except CombinationError as exc:
        raise UsageError(str(exc)) from exc


def _train_config(cfg: dict, **over) -> TrainConfig:
    keys = ("epochs", "batch_size", "lr", "seed", "mask_prop", "profile", "model", "combo_id")
    kw = {k: cfg[k] for k in keys if k in cfg}
    kw.update(over)
    try:
        return TrainConfig(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: dict) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    # the output location is not part of the run's identity
    cfg = {k: v for k, v in cfg.items() if k != "out"}
    manifest = {"command": cfg["command"], "config_hash": config_hash(cfg),
                "config": cfg,
                "files": [{"path": p.relative_to(out).as_posix(), "sha256": _sha256(p)} for p in files]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: Path) -> int:
    conds = _conditions(cfg["conditions"])
    if not conds:
        raise UsageError("at least one condition is required")
    if cfg["samples"] < 0:
        raise UsageError("--samples must be >= 0")
    profile = get_profile(cfg["profile"])
    scene = SceneConfig(profile, cached_template(profile.name))
    index = write_split(out, cfg["seed"], cfg["samples"], tuple(conds), scene, cfg["offset"])
    print(f"wrote {len(index['samples'])} samples to {out}")
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    _require(cfg, "data")
    data = _dataset(cfg["data"], ["clean"])
    val = _dataset(cfg["val_data"], ["clean"]) if cfg.get("val_data") else None
    tc = _train_config(cfg)
    _, records = train(data, tc, out, val_dataset=val, log_steps=bool(cfg.get("log_steps")))
    for r in records:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    _require(cfg, "checkpoint", "data")
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be at least 1")
    model, header = _checkpoint(cfg["checkpoint"])
    data = _dataset(cfg["data"])
    conds = _conditions(cfg["conditions"]) or list(data.index["conditions"])
    rows = evaluate(model, data, _combos(cfg["combo_id"]), conds, cfg["batch_size"], jobs=cfg["jobs"])
    write_table(rows, out / "table.tsv")
    print((out / "table.tsv").read_text(), end="")
    return 0


def cmd_ablate(cfg: dict, out: Path) -> int:
    _require(cfg, "data", "test_data")
    train_set = _dataset(cfg["data"], ["clean"])
    test_set = _dataset(cfg["test_data"])
    props = _split(cfg["proportions"], float)
    if not props:
        raise UsageError("--proportions needs at least one value")
    base = _train_config(cfg, model="adaptive")
    rows = ablate_mask(train_set, test_set, props, base, out / "runs", _conditions(cfg["conditions"]))
    conds = _conditions(cfg["conditions"])
    lines = ["\t".join(["mask_prop"] + conds + ["mean"])]
    lines += ["\t".join([f"{r['mask_prop']:.2f}"] + [f"{r.get(c, float('nan')):.4f}" for c in conds]
                        + [f"{r['mean']:.4f}"]) for r in rows]
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    print((out / "ablation.tsv").read_text(), end="")
    return 0


def grad_check_forwards(module: str, seed: int):
    """(forward, params) pairs for one module at double precision."""
    rng = np.random.default_rng(seed)
    profile = get_profile("desk")
    template = cached_template(profile.name)
    params = ParamStore(seed, np.float64)
    if module == "attention":
        x = rng.normal(size=(2, 5, 8))
        # a random projection; layer-normed outputs have a fixed sum of squares
        w = rng.normal(size=(2, 5, 8))
        return (lambda p: (multi_head_attention(as_tensor(x), as_tensor(x), p, 2, "mha") * w).sum()), params
    if module == "pointops":
        from .pointops import encode_point_cloud
        pts = rng.normal(scale=0.3, size=(1, profile.n_depth, 3)) + np.array(profile.origin)

        def f(p):
            tokens, glob = encode_point_cloud(pts, p, "depth", profile)
            return tokens.square().mean() + glob.square().mean()
        return f, params
    if module == "encoders":
        from .encoders import encode_image
        img = rng.random((1, profile.image_size, profile.image_size, profile.image_channels))

        def f(p):
            tokens, glob = encode_image(img, p, profile)
            return tokens.square().mean() + glob.square().mean()
        return f, params
    if module in ("fusion", "baseline"):
        sample = generate_sample(sample_rng(seed, 0), SceneConfig(profile, template))
        batch = make_batch([sample], template)
        cls = AdaptiveFusion if module == "fusion" else BaselineFusion
        model = cls(profile, template, params)
        combo = combination_from_id(FULL_COMBO if module == "fusion" else BASELINE_COMBO_ID)

        def f(p):
            pred = model.forward(batch.select(combo), gt_cameras=batch.cameras)
            return compute_loss(pred, batch, batch.cameras, image_size=profile.image_size)[0]
        return f, params
    raise UsageError(f"unknown module {module!r}; choose from {list(GRAD_MODULES)}")


def _inject(grads: dict) -> None:
    for g in grads.values():
        g *= 1.01


def cmd_grad_check(cfg: dict, out: Path) -> int:
    modules = _split(cfg["modules"])
    report = {}
    for m in modules:
        forward, params = grad_check_forwards(m, cfg["seed"])
        per_path = grad_check_detailed(forward, params, max_entries_per_tensor=cfg["entries"],
                                       seed=cfg["seed"], min_total=cfg["min_total"],
                                       tamper=_inject if cfg["inject_error"] else None)
        worst = max(per_path.values(), default=0.0)
        report[m] = {"max_rel_err": worst, "passed": worst <= GRAD_TOLERANCE, "per_path": per_path}
        print(f"{m}: max_rel_err={worst:.3e} {'PASS' if worst <= GRAD_TOLERANCE else 'FAIL'}")
    ok = all(r["passed"] for r in report.values())
    (out / "grad_check.json").write_text(json.dumps({"passed": ok, "modules": report}, indent=1,
                                                    sort_keys=True) + "\n")
    return 0 if ok else 1


def attention_rows(model, sample, combo) -> list[tuple]:
    """(query, source, token, weight) for one sample, weights averaged over heads."""
    batch = make_batch([sample], model.template)
    pred = model.forward(batch.select(combo), gt_cameras=batch.cameras)
    att = np.asarray(pred.attention[0])[0].mean(axis=0)               # [tokens, tokens]
    tpl = model.template
    names = list(tpl.joint_names) + [f"vertex{i}" for i in range(tpl.n_coarse)]
    sources = []
    for label, lo, hi in pred.token_sources:
        sources += [(label, j) for j in range(hi - lo)]
    return [(names[q], sources[t][0], sources[t][1], float(att[q, t]))
            for q in range(len(names)) for t in range(att.shape[1])]


def source_mass(rows) -> dict[str, float]:
    """Total attention weight per token source, summed over queries."""
    mass: dict[str, float] = {}
    for _, src, _, w in rows:
        mass[src] = mass.get(src, 0.0) + w
    return mass


def cmd_attn_dump(cfg: dict, out: Path) -> int:
    _require(cfg, "checkpoint", "data")
    model, _ = _checkpoint(cfg["checkpoint"])
    cond = _conditions(cfg["condition"])
    data = _dataset(cfg["data"], cond)
    combo = _combos(cfg["combo_id"])[0]
    if model.kind != "adaptive":
        raise UsageError("attention export needs an adaptive checkpoint")
    summary = {}
    for i in range(min(cfg["samples"], len(data))):
        s = data[i]
        rows = attention_rows(model, s, combo)
        lines = ["query\tsource\ttoken\tweight"] + [f"{q}\t{src}\t{t}\t{w:.6e}" for q, src, t, w in rows]
        (out / f"{s.sample_id}.tsv").write_text("\n".join(lines) + "\n")
        summary[s.sample_id] = {k: round(v, 6) for k, v in source_mass(rows).items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def degradation(clean: float, noisy: float) -> float:
    """Relative increase in percent."""
    return 100.0 * (noisy - clean) / clean


def cmd_compare(cfg: dict, out: Path) -> int:
    need_training = cfg.get("adaptive_ckpt") is None or cfg.get("baseline_ckpt") is None
    if need_training:
        _require(cfg, "data")
    _require(cfg, "test_data")
    test = _dataset(cfg["test_data"], ["clean", "noisy_depth"])
    train_set = _dataset(cfg["data"], ["clean"]) if need_training else None
    combo = [combination_from_id(BASELINE_COMBO_ID)]
    lines = ["model\tclean.mpjpe\tclean.mpve\tnoisy_depth.mpjpe\tnoisy_depth.mpve\t"
             "degradation.mpjpe\tdegradation.mpve"]
    for kind in ("adaptive", "baseline"):
        ck = cfg.get(f"{kind}_ckpt")
        if ck is None:
            model, _ = train(train_set, _train_config(cfg, model=kind), out / kind)
        else:
            model, _ = _checkpoint(ck)
        rows = {r.condition: r for r in evaluate(model, test, combo, ["clean", "noisy_depth"])}
        if set(rows) != {"clean", "noisy_depth"}:
            raise UsageError("test split needs clean and noisy_depth samples")
        c, n = rows["clean"], rows["noisy_depth"]
        lines.append("\t".join([kind] + [f"{v:.4f}" for v in (c.mpjpe, c.mpve, n.mpjpe, n.mpve)]
                               + [f"{degradation(c.mpjpe, n.mpjpe):.2f}",
                                  f"{degradation(c.mpve, n.mpve):.2f}"]))
    (out / "compare.tsv").write_text("\n".join(lines) + "\n")
    print((out / "compare.tsv").read_text(), end="")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "grad-check": cmd_grad_check, "attn-dump": cmd_attn_dump, "compare": cmd_compare}


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[cfg["command"]](cfg, out)
        write_manifest(out, cfg)
        return code
    except (UsageError, TemplateMismatch, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 1
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
