"""Knowledge vs. scratch ablation over several seeds.

One seed runs the whole workflow: sign pre-training on both branches,
knowledge-initialized diagnosis training, the scratch baseline at the same
budget, test-split evaluation and Grad-CAM localization on correctly
classified test groups.
"""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from .data.schema import Modality
from .data.store import ImageStore
from .explain import gradcam, localization_score, original_size
from .metrics import STAGE2_METRICS, build_report
from .model import TrunkConfig
from .train import (
    Hyperparams,
    evaluate_diagnosis,
    finetune_diagnosis,
    pretrain_signs,
    train_scratch_baseline,
)
from .data.schema import DiseaseLabel

log = logging.getLogger(__name__)

ARMS = ("with-knowledge", "w/o-knowledge")


def localization_scores(model, store: ImageStore, split: str = "test") -> list[float]:
    """Heat-mass fractions for every (correct group, branch with boxes) pair."""
    batch = evaluate_diagnosis(model, store, split)
    pred = np.argmax(batch.scores, axis=1)
    out = []
    for gid, p, t in zip(batch.ids, pred, batch.truth):
        if p != t:
            continue
        g = store.manifest[gid]
        heat_f, heat_o = gradcam(model, g, int(t), store=store)
        shape = original_size(g, store.manifest)
        for heat, m in ((heat_f, Modality.FUNDUS), (heat_o, Modality.OCT)):
            boxes = g.boxes(m)
            if boxes:
                out.append(localization_score(heat, boxes, shape))
    return out


def run_seed(store: ImageStore, h: Hyperparams, trunk: TrunkConfig = None, config_hash: str = "",
             log_dir=None, checkpoints: dict = None) -> dict:
    """Train and evaluate both arms for ``h.seed``; returns a JSON-able summary.

    ``checkpoints`` receives the five checkpoints keyed by role when given.
    """
    trunk = trunk or TrunkConfig()
    lp = (lambda name: None) if log_dir is None else (lambda name: log_dir / f"seed{h.seed}-{name}.jsonl")
    ck_f = pretrain_signs("F", store, h, trunk, lp("signs-F"), config_hash)
    ck_o = pretrain_signs("O", store, h, trunk, lp("signs-O"), config_hash)
    ck_k = finetune_diagnosis(ck_f, ck_o, store, h, lp("diagnosis-knowledge"), config_hash)
    ck_s = train_scratch_baseline(store, h, trunk, lp("diagnosis-scratch"), config_hash)
    if checkpoints is not None:
        checkpoints.update({"signs-F": ck_f, "signs-O": ck_o, "with-knowledge": ck_k, "w/o-knowledge": ck_s})

    names = [d.name for d in DiseaseLabel]
    summary = {
        "seed": h.seed,
        "stage1_val_auroc": {"F": ck_f.metrics["val_auroc"], "O": ck_o.metrics["val_auroc"]},
        "steps": {"with-knowledge": ck_k.metrics["steps"], "w/o-knowledge": ck_s.metrics["steps"]},
        "test": {},
        "localization": {},
    }
    for arm, ck in (("with-knowledge", ck_k), ("w/o-knowledge", ck_s)):
        model = ck.build_model()
        rep = build_report(2, evaluate_diagnosis(model, store, "test"), names, config_hash, h.seed)
        summary["test"][arm] = rep.metrics
        loc = localization_scores(model, store, "test")
        summary["localization"][arm] = {"median": float(np.median(loc)) if loc else 0.0, "n": len(loc)}
        log.info("seed %s %s: %s, localization %.3f", h.seed, arm, rep.metrics,
                 summary["localization"][arm]["median"])
    return summary


def summarize(per_seed: list[dict]) -> dict:
    """Medians over seeds of every test metric and of the localization medians."""
    out = {"test": {}, "localization": {}, "stage1_val_auroc": {}}
    for arm in ARMS:
        out["test"][arm] = {m: float(np.median([s["test"][arm][m] for s in per_seed])) for m in STAGE2_METRICS}
        out["localization"][arm] = float(np.median([s["localization"][arm]["median"] for s in per_seed]))
    for b in ("F", "O"):
        out["stage1_val_auroc"][b] = float(np.median([s["stage1_val_auroc"][b] for s in per_seed]))
    out["auroc_gain"] = out["test"]["with-knowledge"]["AUROC"] - out["test"]["w/o-knowledge"]["AUROC"]
    return out


def run_ablation(store: ImageStore, h: Hyperparams, seeds, trunk: TrunkConfig = None, config_hash: str = "",
                 log_dir=None) -> dict:
    per_seed = [run_seed(store, replace(h, seed=int(s)), trunk, config_hash, log_dir) for s in seeds]
    return {"seeds": [int(s) for s in seeds], "per_seed": per_seed, "median": summarize(per_seed)}
