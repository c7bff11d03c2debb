"""Config-driven runner: one subcommand per workflow phase.

Usage::

    signprior gen-data  --config run.yaml [--out DIR]
    signprior pretrain  --config run.yaml --branch F|O
    signprior train     --config run.yaml --ckpt-f signs-F.ckpt --ckpt-o signs-O.ckpt
    signprior ablate    --config run.yaml [--seed N]
    signprior evaluate  --config run.yaml --ckpt model.ckpt [--split test]
    signprior explain   --config run.yaml --ckpt model.ckpt --ids g00001 g00002 [--class 1]
    signprior report    RUN_DIR [RUN_DIR ...] [--out DIR]

Config file (YAML or JSON; unknown keys are rejected)::

    profile: desk            # desk: 30/20 epochs, full: 500/100 epochs
    dataset:
      synthetic: {counts: {train: 600, valid: 100, test: 100}, seed: 0}
      # or: path: runs/data/dataset
    split: {ratios: [0.8, 0.1, 0.1], seed: 0}   # optional re-split of a path dataset
    trunk: {name: small_cnn, widths: [16, 32, 32, 32], pool: max, pooled_blocks: 3}
    hyperparams: {base_lr: 0.001, batch_size: 8}  # any Hyperparams field
    seeds: [0, 1, 2]
    out: runs/desk
    overlay_alpha: 0.5

Exit codes: 0 ok, 2 config error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .data import (
    ImageStore,
    Modality,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_pixels,
    read_manifest,
    split_dataset,
    write_dataset,
)
from .data.schema import DiseaseLabel, FUNDUS_SIGNS, OCT_SIGNS
from .data.synthetic import spec_from_dict
from .errors import ConfigError, MissingArtifactError, SignPriorError
from .experiment import ARMS, localization_scores, run_seed, summarize
from .explain import gradcam, localization_score, render_overlay
from .metrics import STAGE1_METRICS, STAGE2_METRICS, build_report, format_table
from .model import TrunkConfig
from .train import (
    Hyperparams,
    evaluate_diagnosis,
    evaluate_signs,
    file_sha256,
    finetune_diagnosis,
    load_checkpoint,
    pretrain_signs,
    save_checkpoint,
    train_scratch_baseline,
)

log = logging.getLogger("signprior")

PROFILES = {"desk": {"epochs_stage1": 30, "epochs_stage2": 20},
            "full": {"epochs_stage1": 500, "epochs_stage2": 100}}
CONFIG_KEYS = {"profile", "dataset", "split", "trunk", "hyperparams", "seeds", "out", "overlay_alpha"}


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    dataset_path: str = None
    synthetic: SyntheticSpec = None
    split: dict = None
    trunk: TrunkConfig = field(default_factory=TrunkConfig)
    hyperparams: Hyperparams = field(default_factory=lambda: Hyperparams(**PROFILES["desk"]))
    seeds: tuple = (0,)
    out: str = "runs/default"
    overlay_alpha: float = 0.5
    profile: str = "desk"

    def canonical(self) -> dict:
        """Everything that determines results; ``out`` is excluded."""
        return {
            "profile": self.profile,
            "dataset": ({"path": self.dataset_path} if self.dataset_path
                        else {"synthetic": self.synthetic.to_dict()}),
            "split": self.split,
            "trunk": self.trunk.to_dict(),
            "hyperparams": self.hyperparams.to_dict(),
            "seeds": list(self.seeds),
            "overlay_alpha": self.overlay_alpha,
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _section(d, key, kind=dict):
    v = d.get(key)
    if v is None:
        return kind()
    if not isinstance(v, kind):
        raise ConfigError(f"config.{key}: expected a {kind.__name__}, got {type(v).__name__}")
    return v


def parse_config(d: dict) -> RunConfig:
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("config: top level must be a mapping")
    extra = set(d) - CONFIG_KEYS
    if extra:
        raise ConfigError(f"config: unknown keys {sorted(extra)}")
    profile = d.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"config.profile: must be one of {sorted(PROFILES)}, got {profile!r}")

    ds = _section(d, "dataset")
    if set(ds) - {"path", "synthetic"}:
        raise ConfigError(f"config.dataset: unknown keys {sorted(set(ds) - {'path', 'synthetic'})}")
    if "path" in ds and "synthetic" in ds:
        raise ConfigError("config.dataset: give either path or synthetic, not both")
    path = ds.get("path")
    synthetic = None if path else spec_from_dict(_section(ds, "synthetic"))

    split = d.get("split")
    if split is not None:
        if not isinstance(split, dict) or set(split) - {"ratios", "seed"}:
            raise ConfigError("config.split: expected {ratios: [..], seed: int}")
        split = {"ratios": [float(r) for r in split.get("ratios", (0.8, 0.1, 0.1))],
                 "seed": int(split.get("seed", 0))}

    trunk_d, hyper_d = _section(d, "trunk"), _section(d, "hyperparams")
    try:
        trunk = TrunkConfig.from_dict(trunk_d)
    except (TypeError, ValueError, ConfigError) as exc:
        raise ConfigError(f"config.trunk: {exc}") from exc
    try:
        h = Hyperparams.from_dict({**PROFILES[profile], **hyper_d})
    except (TypeError, ValueError, ConfigError) as exc:
        msg = str(exc)
        raise ConfigError(f"config.{msg}" if msg.startswith("hyperparams.") else f"config.hyperparams: {msg}") from exc

    seeds = d.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError(f"config.seeds: expected a non-empty list of integers, got {seeds!r}")
    alpha = d.get("overlay_alpha", 0.5)
    if not isinstance(alpha, (int, float)) or not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"config.overlay_alpha: must be in [0, 1], got {alpha!r}")
    return RunConfig(path, synthetic, split, trunk, replace(h, seed=seeds[0]), tuple(seeds),
                     str(d.get("out", "runs/default")), float(alpha), profile)


def load_config(path) -> RunConfig:
    if path is None:
        return parse_config({})
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"config file not found: {p}")
    try:
        d = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML/JSON ({exc})") from exc
    return parse_config(d)


# ------------------------------------------------------------------ run bookkeeping


def _atomic_write(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode("utf-8")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


class Run:
    """Collects artifacts, input hashes and timings; writes ``run_manifest.json`` at the end."""

    def __init__(self, cfg: RunConfig, command: str, argv):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.argv = list(argv)
        self.artifacts: list[str] = []
        self.inputs: dict = {}
        self.timings: dict = {}
        self._t0 = time.perf_counter()

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, path):
        rel = str(Path(path).relative_to(self.out))
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return path

    def write(self, rel, data):
        return self.record(_atomic_write(self.path(rel), data))

    def input(self, path):
        self.inputs[str(path)] = file_sha256(path)

    def timed(self, name, fn, *a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[name] = round(time.perf_counter() - t, 3)
        return out

    def finish(self):
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        man = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": self.cfg.hash,
            "config": self.cfg.canonical(),
            "tool_version": __version__,
            "seeds": list(self.cfg.seeds),
            "inputs": self.inputs,
            "artifacts": sorted(self.artifacts),
            "timings": self.timings,
        }
        _atomic_write(self.out / "run_manifest.json", json.dumps(man, sort_keys=True, indent=2) + "\n")


def _manifest(cfg: RunConfig, run: Run = None):
    if cfg.dataset_path:
        man = read_manifest(cfg.dataset_path)
        mpath = Path(cfg.dataset_path)
        if run is not None:
            run.input(mpath / "manifest.json" if mpath.is_dir() else mpath)
    else:
        man = generate_synthetic_dataset(cfg.synthetic)
    if cfg.split is not None:
        man = split_dataset(man, cfg.split["ratios"], cfg.split["seed"])
    return man


def _store(cfg: RunConfig, run: Run):
    man = run.timed("load_data", _manifest, cfg, run)
    return run.timed("preprocess", ImageStore, man)


def _load(run: Run, path, stage=None):
    ck = load_checkpoint(path, stage)
    run.input(path)
    return ck


# ------------------------------------------------------------------ commands


def cmd_gen_data(cfg: RunConfig, run: Run, args):
    if cfg.dataset_path:
        raise ConfigError("gen-data needs dataset.synthetic in the config, not dataset.path")
    man = run.timed("generate", generate_synthetic_dataset, cfg.synthetic)
    root = run.path("dataset")
    written = run.timed("write", write_dataset, man, root)
    for r in sorted(written.records, key=lambda g: g.id):
        for m in (Modality.FUNDUS, Modality.OCT):
            run.record(root / r.image(m).source)
    run.record(root / "manifest.json")
    print(f"wrote {len(written)} groups to {root}")


def cmd_pretrain(cfg: RunConfig, run: Run, args):
    store = _store(cfg, run)
    ck = run.timed(f"pretrain_{args.branch}", pretrain_signs, args.branch, store, cfg.hyperparams, cfg.trunk,
                   run.path(f"signs-{args.branch}.jsonl"), cfg.hash)
    run.record(run.path(f"signs-{args.branch}.jsonl"))
    path = run.record(save_checkpoint(ck, run.path(f"signs-{args.branch}.ckpt")))
    print(f"{path}: best epoch {ck.metrics['best_epoch']}, validation AUROC {ck.metrics['val_auroc']:.4f}")


def cmd_train(cfg: RunConfig, run: Run, args):
    ck_f = _load(run, args.ckpt_f, "signs-F")
    ck_o = _load(run, args.ckpt_o, "signs-O")
    store = _store(cfg, run)
    ck = run.timed("finetune", finetune_diagnosis, ck_f, ck_o, store, cfg.hyperparams,
                   run.path("diagnosis-knowledge.jsonl"), cfg.hash)
    run.record(run.path("diagnosis-knowledge.jsonl"))
    path = run.record(save_checkpoint(ck, run.path("diagnosis-knowledge.ckpt")))
    print(f"{path}: best epoch {ck.metrics['best_epoch']}, validation AUROC {ck.metrics['val_auroc']:.4f}")


def _ablation_text(summary: dict, cfg: RunConfig) -> str:
    rows = [(arm, summary["test"][arm]) for arm in ARMS]
    loc = summary["localization"]
    return (f"config {cfg.hash}  seeds {list(cfg.seeds)}  (median over seeds, test split)\n"
            + format_table(rows, STAGE2_METRICS, "Model")
            + f"\nlocalization (median heat mass in dilated boxes): "
              f"{ARMS[0]} {loc[ARMS[0]]:.4f}, {ARMS[1]} {loc[ARMS[1]]:.4f}\n")


def cmd_ablate(cfg: RunConfig, run: Run, args):
    store = _store(cfg, run)
    per_seed = []
    for s in cfg.seeds:
        h = replace(cfg.hyperparams, seed=s)
        cks = {}
        logs = run.path(f"seed{s}")
        logs.mkdir(parents=True, exist_ok=True)
        summary = run.timed(f"seed{s}", run_seed, store, h, cfg.trunk, cfg.hash, logs, cks)
        for name in ("signs-F", "signs-O", "diagnosis-knowledge", "diagnosis-scratch"):
            run.record(logs / f"seed{s}-{name}.jsonl")
        for role, ck in cks.items():
            fname = role.replace("/", "").replace("with-knowledge", "diagnosis-knowledge")
            fname = fname.replace("wo-knowledge", "diagnosis-scratch")
            run.record(save_checkpoint(ck, logs / f"{fname}.ckpt"))
        per_seed.append(summary)
    med = summarize(per_seed)
    report = {
        "kind": "ablation",
        "config_hash": cfg.hash,
        "seeds": list(cfg.seeds),
        "rows": {arm: med["test"][arm] for arm in ARMS},
        "row_order": list(ARMS),
        "localization": med["localization"],
        "stage1_val_auroc": med["stage1_val_auroc"],
        "auroc_gain": med["auroc_gain"],
        "per_seed": per_seed,
    }
    run.write("report.json", _dumps(report))
    text = _ablation_text(med, cfg)
    run.write("report.txt", text)
    print(text, end="")


def _dumps(obj) -> str:
    from .metrics import _round_floats

    return json.dumps(_round_floats(obj), sort_keys=True, indent=2) + "\n"


def cmd_evaluate(cfg: RunConfig, run: Run, args):
    ck = _load(run, args.ckpt)
    store = _store(cfg, run)
    model = ck.build_model()
    if ck.stage == "diagnosis":
        batch = evaluate_diagnosis(model, store, args.split)
        rep = build_report(2, batch, [d.name for d in DiseaseLabel], cfg.hash, ck.seed)
        label = ck.extra.get("arm", "diagnosis")
    else:
        batch = evaluate_signs(model, store, ck.branch, args.split)
        names = FUNDUS_SIGNS if ck.branch == "F" else OCT_SIGNS
        rep = build_report(1, batch, list(names), cfg.hash, ck.seed)
        label = ck.stage
    d = rep.to_dict()
    d.update(kind="evaluation", split=args.split, checkpoint_stage=ck.stage,
             rows={label: rep.metrics}, row_order=[label])
    run.write("report.json", _dumps(d))
    text = f"config {cfg.hash}  seed {ck.seed}  split {args.split}  n={rep.n}\n" + rep.to_text(label)
    run.write("report.txt", text)
    print(text, end="")


def _save_png(path: Path, rgb01: np.ndarray, cfg_hash: str):
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    info.add_text("config_hash", cfg_hash)
    img = Image.fromarray(np.clip(np.round(rgb01 * 255), 0, 255).astype(np.uint8))
    tmp = path.with_name(path.name + ".tmp")
    img.save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)
    return path


def _chw(img):
    return torch.from_numpy(img.transpose(2, 0, 1).copy())[None]


def cmd_explain(cfg: RunConfig, run: Run, args):
    ck = _load(run, args.ckpt, "diagnosis")
    store = _store(cfg, run)
    man = store.manifest
    model = ck.build_model()
    ids = args.ids or list(man.splits["test"])
    out = {"kind": "explanation", "config_hash": cfg.hash, "seed": ck.seed, "samples": {}}
    for gid in ids:
        try:
            g = man[gid]
        except KeyError:
            raise MissingArtifactError(f"sample id not in dataset: {gid}") from None
        with torch.no_grad():
            pred = model.predict(_chw(store.image(Modality.FUNDUS, g.fundus.id)),
                                 _chw(store.image(Modality.OCT, g.oct.id)))
        cls = int(args.class_id) if args.class_id is not None else int(pred["diagnosis"][0])
        heats = gradcam(model, g, cls, store=store)
        entry = {"class": DiseaseLabel(cls).name, "truth": DiseaseLabel(int(g.disease)).name,
                 "predicted": DiseaseLabel(int(pred["diagnosis"][0])).name, "localization": {}}
        for heat, m in zip(heats, (Modality.FUNDUS, Modality.OCT)):
            original = load_pixels(g.image(m), man.root)
            name = f"{gid}_{heat.branch}_{DiseaseLabel(cls).name}.png"
            run.record(_save_png(run.path("overlays", name), render_overlay(heat, original, cfg.overlay_alpha),
                                 cfg.hash))
            boxes = g.boxes(m)
            entry["localization"][heat.branch] = (
                localization_score(heat, boxes, original.shape[:2]) if boxes else None)
        out["samples"][gid] = entry
    run.write("explanations.json", _dumps(out))
    for gid, e in out["samples"].items():
        loc = " ".join(f"{b}={v:.3f}" if v is not None else f"{b}=n/a" for b, v in e["localization"].items())
        print(f"{gid}: class {e['class']} (truth {e['truth']}, predicted {e['predicted']}) localization {loc}")


def _read_report(run_dir) -> dict:
    p = Path(run_dir)
    p = p / "report.json" if p.is_dir() else p
    if not p.exists():
        raise MissingArtifactError(f"no report.json in {run_dir}")
    return json.loads(p.read_text())


def merge_reports(reports: list[tuple[str, dict]], target=None, baseline=None) -> dict:
    """Stack the rows of several reports and compute the target-minus-baseline row.

    Row names collide across runs, so they are prefixed with the run label when
    needed. ``target`` defaults to the first row and ``baseline`` to the last;
    within a report, rows follow its ``row_order`` since the JSON keys are sorted.
    """
    rows = []
    for label, rep in reports:
        table = rep.get("rows", {})
        order = [n for n in rep.get("row_order", []) if n in table]
        for name in order + [n for n in table if n not in order]:
            rows.append((name, label, table[name]))
    names = [r[0] for r in rows]
    merged = {}
    for name, label, metrics in rows:
        key = name if names.count(name) == 1 else f"{label}/{name}"
        merged[key] = metrics
    keys = list(merged)
    if len(keys) < 2:
        raise ConfigError("report needs at least two rows to compare")
    target = target or keys[0]
    baseline = baseline or keys[-1]
    for k in (target, baseline):
        if k not in merged:
            raise ConfigError(f"row {k!r} not found; available: {keys}")
    columns = [c for c in STAGE2_METRICS + STAGE1_METRICS if c in merged[target] and c in merged[baseline]]
    columns = list(dict.fromkeys(columns))

    def delta(a, b):
        return {c: (None if merged[a].get(c) is None or merged[b].get(c) is None
                    else merged[a][c] - merged[b][c]) for c in columns}

    pairwise = {f"{a} - {b}": delta(a, b) for a in keys for b in keys if a != b}
    return {"kind": "comparison", "rows": merged, "row_order": keys, "columns": columns, "target": target, "baseline": baseline,
            "Improve": delta(target, baseline), "pairwise": pairwise}


def cmd_report(args, argv):
    reports = [(Path(d).name or str(d), _read_report(d)) for d in args.runs]
    merged = merge_reports(reports, args.target, args.baseline)
    hashes = sorted({r.get("config_hash", "") for _, r in reports})
    merged["config_hashes"] = hashes
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = list(merged["rows"].items()) + [("Improve", merged["Improve"])]
    text = (f"Improve = {merged['target']} - {merged['baseline']}\n"
            + format_table(rows, merged["columns"], "Model"))
    _atomic_write(out / "report.json", _dumps(merged))
    _atomic_write(out / "report.txt", text)
    man = {"command": "report", "argv": list(argv), "config_hashes": hashes, "tool_version": __version__,
           "inputs": {str(Path(d)): file_sha256(Path(d) / "report.json" if Path(d).is_dir() else d)
                      for d in args.runs},
           "artifacts": ["report.json", "report.txt"]}
    _atomic_write(out / "run_manifest.json", json.dumps(man, sort_keys=True, indent=2) + "\n")
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signprior", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML or JSON run config")
        sp.add_argument("--seed", type=int, help="override config seeds with this single seed")
        sp.add_argument("--out", help="output directory (overrides config.out)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    sp = common(sub.add_parser("pretrain", help="stage-1 sign pre-training for one branch"))
    sp.add_argument("--branch", required=True, choices=["F", "O"])
    sp = common(sub.add_parser("train", help="stage-2 diagnosis training from stage-1 checkpoints"))
    sp.add_argument("--ckpt-f", required=True)
    sp.add_argument("--ckpt-o", required=True)
    common(sub.add_parser("ablate", help="knowledge vs scratch over all config seeds"))
    sp = common(sub.add_parser("evaluate", help="metrics for one checkpoint"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test", choices=["train", "valid", "test"])
    sp = common(sub.add_parser("explain", help="Grad-CAM overlays and localization"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--ids", nargs="*", help="group ids (default: the whole test split)")
    sp.add_argument("--class", dest="class_id", type=int, choices=[0, 1, 2],
                    help="class to explain (default: predicted class)")
    sp = sub.add_parser("report", help="merge report.json files into one comparison table")
    sp.add_argument("runs", nargs="+", help="run directories or report.json paths")
    sp.add_argument("--out", default="runs/report")
    sp.add_argument("--target", help="row compared against the baseline (default: first row)")
    sp.add_argument("--baseline", help="baseline row (default: last row)")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            cmd_report(args, argv)
            return 0
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seeds=(args.seed,), hyperparams=replace(cfg.hyperparams, seed=args.seed))
        if args.out:
            cfg = replace(cfg, out=args.out)
        run = Run(cfg, args.command, argv)
        COMMANDS[args.command](cfg, run, args)
        run.finish()
        return 0
    except SignPriorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
