"""Stage-1 sign pre-training and stage-2 diagnosis training.

Randomness is fully derived from ``Hyperparams.seed``:

* batch order of epoch ``e``: permutation from ``("order", seed, e)``
* augmentation of image ``r`` in epoch ``e``: generator from ``("augment", seed, e, r)``
* encoder init: ``("encoder", seed, branch)``; head init per head type

Both stage-2 arms therefore see identical batches, augmentations, schedules and
diagnosis-head initialization; they differ only in where the encoders start.
"""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..data.schema import Modality
from ..data.store import ImageStore
from ..data.transforms import augment
from ..errors import CheckpointError, ConfigError
from ..metrics import EvalBatch, auroc_macro, softmax
from ..model import N_CLASSES, DiagnosisModel, SignModel, TrunkConfig, init_parameters
from ..seeding import rng_for
from .checkpoint import Checkpoint, state_checksum
from .optim import Hyperparams, MomentumSGD

log = logging.getLogger(__name__)

MODALITY = {"F": Modality.FUNDUS, "O": Modality.OCT}
EVAL_BATCH = 50


def _nchw(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def _batch_images(store: ImageStore, modality, ids, epoch, h: Hyperparams, train: bool):
    imgs = store.images(modality, ids)
    if train and h.augment:
        out = np.empty_like(imgs)
        for i, gid in enumerate(ids):
            rid = store.manifest[gid].image(modality).id
            out[i] = augment(imgs[i], rng_for("augment", h.seed, epoch, rid))
        imgs = out
    return _nchw(imgs)


def _epoch_batches(ids, epoch, h: Hyperparams):
    order = rng_for("order", h.seed, epoch).permutation(len(ids))
    ids = [ids[i] for i in order]
    return [ids[i:i + h.batch_size] for i in range(0, len(ids), h.batch_size)]


class _Logger:
    def __init__(self, path, config_hash):
        self.path = Path(path) if path else None
        self.config_hash = config_hash

    def __call__(self, record: dict):
        record = dict(record, config_hash=self.config_hash)
        log.info("%s", record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _score(v):
    return -np.inf if v is None else v


# ------------------------------------------------------------------ evaluation


@torch.no_grad()
def evaluate_signs(model: SignModel, store: ImageStore, branch: str, split: str = "valid") -> EvalBatch:
    m = MODALITY[branch]
    ids = store.manifest.splits[split]
    model.eval()
    probs = []
    for i in range(0, len(ids), EVAL_BATCH):
        chunk = ids[i:i + EVAL_BATCH]
        probs.append(torch.sigmoid(model(_nchw(store.images(m, chunk)))).numpy())
    return EvalBatch(ids, np.concatenate(probs), store.sign_targets(m, ids))


@torch.no_grad()
def evaluate_diagnosis(model: DiagnosisModel, store: ImageStore, split: str = "valid") -> EvalBatch:
    ids = store.manifest.splits[split]
    model.eval()
    scores = []
    for i in range(0, len(ids), EVAL_BATCH):
        chunk = ids[i:i + EVAL_BATCH]
        xf = _nchw(store.images(Modality.FUNDUS, chunk))
        xo = _nchw(store.images(Modality.OCT, chunk))
        scores.append(model(xf, xo).numpy())
    return EvalBatch(ids, np.concatenate(scores), store.disease_targets(ids))


def _safe_auroc(scores, truth):
    try:
        return auroc_macro(scores, truth)
    except Exception:  # undefined on degenerate validation splits
        return None


# ------------------------------------------------------------------ stage 1


def pretrain_signs(branch: str, store: ImageStore, h: Hyperparams, trunk: TrunkConfig = None,
                   log_path=None, config_hash: str = "", bias: bool = True) -> Checkpoint:
    """Multi-label BCE training of one branch; returns the best-validation checkpoint."""
    if branch not in MODALITY:
        raise ConfigError(f"branch must be 'F' or 'O', got {branch!r}")
    trunk = trunk or TrunkConfig()
    train_ids = list(store.manifest.splits["train"])
    if not train_ids:
        raise ConfigError("empty training split")
    m = MODALITY[branch]
    emit = _Logger(log_path, config_hash)

    model = SignModel(branch, trunk, bias=bias)
    init_parameters(model.encoder, h.seed, "encoder", branch)
    init_parameters(model.head, h.seed, "sign-head", branch)
    opt = MomentumSGD(model.named_parameters(), h)

    best = (-np.inf, -1, None, None)
    history = []
    for epoch in range(h.epochs_stage1):
        opt.set_epoch(epoch)
        model.train()
        losses = []
        for ids in _epoch_batches(train_ids, epoch, h):
            x = _batch_images(store, m, ids, epoch, h, train=True)
            y = torch.from_numpy(store.sign_targets(m, ids))
            loss = F.binary_cross_entropy_with_logits(model(x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate_signs(model, store, branch, "valid")
        auc = _safe_auroc(val.scores, val.truth)
        rec = {"stage": f"signs-{branch}", "epoch": epoch, "lr": opt.lr, "train_loss": float(np.mean(losses)),
               "val_auroc": auc, "steps": opt.steps}
        history.append(rec)
        emit(rec)
        if _score(auc) > best[0]:
            best = (_score(auc), epoch, copy.deepcopy(model.state_dict()), auc)

    model.load_state_dict(best[2])
    metrics = {"val_auroc": best[3], "best_epoch": best[1], "steps": opt.steps, "history": history}
    return Checkpoint.from_model(f"signs-{branch}", model, trunk, best[1], h.to_dict(), h.seed, metrics,
                                 config_hash, {"bias": bias})


# ------------------------------------------------------------------ stage 2


def _class_weights(store: ImageStore, ids) -> torch.Tensor:
    counts = np.bincount(store.disease_targets(ids), minlength=N_CLASSES).astype(np.float64)
    w = np.where(counts > 0, counts.sum() / (N_CLASSES * np.maximum(counts, 1)), 0.0)
    return torch.tensor(w, dtype=torch.float32)


def _train_diagnosis(model: DiagnosisModel, store: ImageStore, h: Hyperparams, trunk: TrunkConfig,
                     arm: str, log_path, config_hash, extra) -> Checkpoint:
    train_ids = list(store.manifest.splits["train"])
    if not train_ids:
        raise ConfigError("empty training split")
    emit = _Logger(log_path, config_hash)
    init_parameters(model.head, h.seed, "diagnosis-head")

    for p in list(model.enc_f.parameters()) + list(model.enc_o.parameters()):
        p.requires_grad_(not h.freeze_encoders)
    named = [(n, p) for n, p in model.named_parameters() if not n.startswith("sign_")]
    opt = MomentumSGD(named, h)
    weights = _class_weights(store, train_ids) if h.class_weights else None

    best = (-np.inf, -1, None, None)
    history = []
    for epoch in range(h.epochs_stage2):
        opt.set_epoch(epoch)
        model.train()
        if h.freeze_encoders:
            model.enc_f.eval()
            model.enc_o.eval()
        losses = []
        for ids in _epoch_batches(train_ids, epoch, h):
            xf = _batch_images(store, Modality.FUNDUS, ids, epoch, h, train=True)
            xo = _batch_images(store, Modality.OCT, ids, epoch, h, train=True)
            y = torch.from_numpy(store.disease_targets(ids))
            loss = F.cross_entropy(model(xf, xo), y, weight=weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val = evaluate_diagnosis(model, store, "valid")
        auc = _safe_auroc(softmax(val.scores), val.truth)
        rec = {"stage": "diagnosis", "arm": arm, "epoch": epoch, "lr": opt.lr,
               "train_loss": float(np.mean(losses)), "val_auroc": auc, "steps": opt.steps}
        history.append(rec)
        emit(rec)
        if _score(auc) > best[0]:
            best = (_score(auc), epoch, copy.deepcopy(model.state_dict()), auc)

    model.load_state_dict(best[2])
    metrics = {"val_auroc": best[3], "best_epoch": best[1], "steps": opt.steps, "history": history}
    extra = dict(extra, arm=arm, sign_heads=model.sign_f is not None)
    return Checkpoint.from_model("diagnosis", model, trunk, best[1], h.to_dict(), h.seed, metrics,
                                 config_hash, extra)


def finetune_diagnosis(ckpt_f: Checkpoint, ckpt_o: Checkpoint, store: ImageStore, h: Hyperparams,
                       log_path=None, config_hash: str = "") -> Checkpoint:
    """Knowledge arm: encoders start from the stage-1 checkpoints."""
    if ckpt_f.stage != "signs-F" or ckpt_o.stage != "signs-O":
        raise ConfigError(f"expected signs-F and signs-O checkpoints, got {ckpt_f.stage} and {ckpt_o.stage}")
    if ckpt_f.trunk != ckpt_o.trunk:
        raise ConfigError(f"trunk mismatch between stage-1 checkpoints: {ckpt_f.trunk} vs {ckpt_o.trunk}")
    bias = ckpt_f.extra.get("bias", True)
    trunk = TrunkConfig.from_dict(ckpt_f.trunk)
    model = DiagnosisModel(trunk, bias=bias, sign_heads=True)
    sources = {"F": ckpt_f, "O": ckpt_o}
    checks = {}
    for b, ck in sources.items():
        enc_state = ck.encoder_state("encoder.")
        model.encoder(b).load_state_dict({k: torch.from_numpy(v.copy()) for k, v in enc_state.items()})
        head = model.sign_f if b == "F" else model.sign_o
        head.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ck.encoder_state("head.").items()})
        head.requires_grad_(False)
        loaded = {k: v.detach().numpy() for k, v in model.encoder(b).state_dict().items()}
        if state_checksum(loaded) != state_checksum(enc_state):
            raise CheckpointError(f"encoder {b} does not match its stage-1 checkpoint after loading")
        checks[b] = state_checksum(enc_state)
    extra = {"bias": bias, "init_checksums": checks}
    return _train_diagnosis(model, store, h, trunk, "knowledge", log_path, config_hash, extra)


def train_scratch_baseline(store: ImageStore, h: Hyperparams, trunk: TrunkConfig = None, log_path=None,
                           config_hash: str = "", bias: bool = True) -> Checkpoint:
    """Ablation arm: same schedule, encoders from the seeded random init."""
    trunk = trunk or TrunkConfig()
    model = DiagnosisModel(trunk, bias=bias, sign_heads=False)
    for b in ("F", "O"):
        init_parameters(model.encoder(b), h.seed, "encoder", b)
    checks = {b: state_checksum({k: v.detach().numpy() for k, v in model.encoder(b).state_dict().items()})
              for b in ("F", "O")}
    return _train_diagnosis(model, store, h, trunk, "scratch", log_path, config_hash,
                            {"bias": bias, "init_checksums": checks})
