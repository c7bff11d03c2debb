"""Evaluation metrics for sign recognition and diagnosis, plus report rendering.

Conventions: AUROC counts ties as one half; 0/0 precision, recall or F1 is 0
and the label is listed under ``zero_division``; macro averages are
unweighted means over labels.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, UndefinedMetricError

STAGE1_METRICS = ("AUROC", "Precision", "Recall", "F1", "Acc")
STAGE2_METRICS = ("AUROC", "Precision", "Recall", "F1", "Kappa")


def auroc_binary(scores, labels) -> float:
    """Mann-Whitney estimate of P(score of a positive > score of a negative)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ContractError(f"scores and labels differ in length ({s.size} vs {y.size})")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks -> ties count 1/2
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n), dtype=bool)
    out[np.arange(labels.size), labels] = True
    return out


def _as_label_matrix(truth, n_labels: int) -> np.ndarray:
    t = np.asarray(truth)
    if t.ndim == 1:
        return _one_hot(t, n_labels)
    return t.astype(bool)


def auroc_per_label(scores, truth) -> list:
    """One-vs-rest AUROC per column; ``None`` where undefined."""
    s = np.asarray(scores, dtype=np.float64)
    y = _as_label_matrix(truth, s.shape[1])
    out = []
    for k in range(s.shape[1]):
        try:
            out.append(auroc_binary(s[:, k], y[:, k]))
        except UndefinedMetricError:
            out.append(None)
    return out


def auroc_macro(scores, truth) -> float:
    """Unweighted mean of defined per-label AUROCs.

    ``truth`` is either an (n, L) binary matrix (multi-label) or an (n,) vector
    of class indices (multi-class, one-vs-rest).
    """
    per = auroc_per_label(scores, truth)
    defined = [v for v in per if v is not None]
    if not defined:
        raise UndefinedMetricError("AUROC undefined for every label")
    return float(np.mean(defined))


def confusion_counts(pred, truth, n_labels: Optional[int] = None):
    """Per-label TP, FP, FN for binary matrices or class-index vectors."""
    p, t = np.asarray(pred), np.asarray(truth)
    if p.ndim == 1:
        n = n_labels if n_labels is not None else int(max(p.max(initial=0), t.max(initial=0))) + 1
        p, t = _one_hot(p, n), _one_hot(t, n)
    p, t = p.astype(bool), t.astype(bool)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != truth shape {t.shape}")
    tp = (p & t).sum(0)
    fp = (p & ~t).sum(0)
    fn = (~p & t).sum(0)
    return tp, fp, fn


def _safe_div(a, b):
    return a / b if b else 0.0


def per_label_prf(pred, truth, n_labels: Optional[int] = None):
    tp, fp, fn = confusion_counts(pred, truth, n_labels)
    prec = [_safe_div(a, a + b) for a, b in zip(tp, fp)]
    rec = [_safe_div(a, a + b) for a, b in zip(tp, fn)]
    f1 = [_safe_div(2 * a, 2 * a + b + c) for a, b, c in zip(tp, fp, fn)]
    zero_div = sorted({i for i, (a, b, c) in enumerate(zip(tp, fp, fn)) if a + b == 0 or a + c == 0})
    return prec, rec, f1, zero_div


def precision_recall_f1(pred, truth, n_labels: Optional[int] = None):
    """Macro-averaged (precision, recall, F1)."""
    if np.asarray(truth).shape[0] == 0:
        raise ContractError("empty batch")
    prec, rec, f1, _ = per_label_prf(pred, truth, n_labels)
    return float(np.mean(prec)), float(np.mean(rec)), float(np.mean(f1))


def subset_accuracy(pred, truth) -> float:
    """Fraction of rows whose predicted flag set equals the truth set exactly."""
    p, t = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    if p.shape != t.shape or p.shape[0] == 0:
        raise ContractError(f"need equal non-empty shapes, got {p.shape} and {t.shape}")
    return float(np.all(p == t, axis=1).mean())


def per_flag_accuracy(pred, truth) -> list:
    p, t = np.asarray(pred).astype(bool), np.asarray(truth).astype(bool)
    return [float(v) for v in (p == t).mean(0)]


def cohens_kappa(pred, truth) -> float:
    """Chance-corrected agreement; perfect agreement is 1 even when p_e = 1."""
    p, t = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if p.size == 0 or p.size != t.size:
        raise ContractError("kappa needs two non-empty labelings of equal length")
    labels = np.union1d(p, t)
    p_o = float(np.mean(p == t))
    if p_o == 1.0:
        return 1.0
    p_e = float(sum(np.mean(p == c) * np.mean(t == c) for c in labels))
    return (p_o - p_e) / (1.0 - p_e)


def softmax(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ------------------------------------------------------------------ reports


@dataclass
class EvalBatch:
    """Aligned scores and ground truth.

    Stage 1: ``scores`` are (n, 5) sign probabilities, ``truth`` (n, 5) flags.
    Stage 2: ``scores`` are (n, 3) raw class scores, ``truth`` (n,) class ids.
    """

    ids: Sequence[str]
    scores: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.truth = np.asarray(self.truth)
        self.ids = list(self.ids)
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("duplicate sample ids in batch")
        if not (len(self.ids) == self.scores.shape[0] == self.truth.shape[0]):
            raise ContractError("ids, scores and truth are not aligned")


@dataclass
class MetricReport:
    stage: int
    metrics: dict  # headline metrics, exactly STAGE1_METRICS or STAGE2_METRICS
    per_label: dict = field(default_factory=dict)
    n: int = 0
    undefined: list = field(default_factory=list)
    zero_division: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    config_hash: str = ""
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "metrics": self.metrics,
            "per_label": self.per_label,
            "n": self.n,
            "undefined": self.undefined,
            "zero_division": self.zero_division,
            "extra": self.extra,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.to_dict()), sort_keys=True, indent=2) + "\n"

    def to_text(self, label: str = "model") -> str:
        names = STAGE1_METRICS if self.stage == 1 else STAGE2_METRICS
        return format_table([(label, self.metrics)], names)


def _round_floats(obj, nd=12):
    if isinstance(obj, float):
        return None if math.isnan(obj) else round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round_floats(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v, nd) for v in obj]
    return obj


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def format_table(rows, columns=STAGE2_METRICS, title_col="Model") -> str:
    """Aligned text table; ``rows`` is a list of (label, {metric: value})."""
    header = [title_col] + list(columns)
    body = [[label] + [_fmt(m.get(c)) for c in columns] for label, m in rows]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("-" * len(lines[0]))
    for r in body:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def build_report(stage: int, batch: EvalBatch, label_names=None, config_hash="", seed=None) -> MetricReport:
    if len(batch.ids) == 0:
        raise ContractError("empty batch: no report emitted")
    n_labels = batch.scores.shape[1]
    names = list(label_names) if label_names is not None else [str(i) for i in range(n_labels)]
    if stage == 1:
        probs = batch.scores
        pred = probs > 0.5
        truth = batch.truth.astype(bool)
    elif stage == 2:
        probs = softmax(batch.scores)
        pred = np.argmax(batch.scores, axis=1)
        truth = batch.truth.astype(np.int64)
    else:
        raise ContractError(f"stage must be 1 or 2, got {stage!r}")

    per_auc = auroc_per_label(probs, truth)
    undefined = [names[i] for i, v in enumerate(per_auc) if v is None]
    try:
        auc = auroc_macro(probs, truth)
    except UndefinedMetricError:
        auc = None
    prec, rec, f1, zero_div = per_label_prf(pred, truth, n_labels)
    metrics = {"AUROC": auc, "Precision": float(np.mean(prec)), "Recall": float(np.mean(rec)),
               "F1": float(np.mean(f1))}
    extra = {}
    if stage == 1:
        metrics["Acc"] = subset_accuracy(pred, truth)
        extra["per_flag_accuracy"] = dict(zip(names, per_flag_accuracy(pred, truth)))
    else:
        metrics["Kappa"] = cohens_kappa(pred, truth)
        extra["accuracy"] = float(np.mean(pred == truth))
    per_label = {
        nm: {"AUROC": per_auc[i], "Precision": prec[i], "Recall": rec[i], "F1": f1[i]}
        for i, nm in enumerate(names)
    }
    return MetricReport(stage, metrics, per_label, len(batch.ids), undefined,
                        [names[i] for i in zero_div], extra, config_hash, seed)
