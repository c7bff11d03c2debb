"""Dual-branch encoders, sign heads, feature fusion and the diagnosis head.

Heads store their weight as ``(in_features, out_features)`` so the shapes read
the same as the math: a sign head is 1000x5, the diagnosis head 2000x3.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigError, ContractError, NumericError
from .seeding import torch_generator

FEATURE_DIM = 1000
FUSED_DIM = 2 * FEATURE_DIM
N_SIGNS = 5
N_CLASSES = 3
SIGN_THRESHOLD = 0.5

BRANCHES = ("F", "O")
POOLS = {"max": nn.AdaptiveMaxPool2d, "avg": nn.AdaptiveAvgPool2d}


@dataclass
class TrunkConfig:
    name: str = "small_cnn"
    widths: tuple = (16, 32, 32, 32)
    batch_norm: bool = True
    pool: str = "max"  # global pooling before the projection: "max" or "avg"
    pooled_blocks: int = 3  # leading blocks followed by a 2x max-pool

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.name not in TRUNKS:
            raise ConfigError(f"unknown trunk {self.name!r}; registered: {sorted(TRUNKS)}")
        if self.pool not in POOLS:
            raise ConfigError(f"pool must be one of {sorted(POOLS)}, got {self.pool!r}")
        if not 0 <= self.pooled_blocks <= len(self.widths):
            raise ConfigError(f"pooled_blocks must be in [0, {len(self.widths)}], got {self.pooled_blocks}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrunkConfig":
        extra = set(d) - {"name", "widths", "batch_norm", "pool", "pooled_blocks"}
        if extra:
            raise ConfigError(f"unknown trunk keys: {sorted(extra)}")
        return cls(**d)


# ------------------------------------------------------------------ trunks


def _small_cnn(cfg: TrunkConfig):
    """Conv-BN-ReLU blocks. The first conv has stride 2 and each of the first
    ``pooled_blocks`` blocks ends in a 2x max-pool.

    With the defaults a 224x224 input gives 14x14 maps from the last block.
    """
    if not cfg.widths:
        raise ConfigError("small_cnn needs at least one width")
    blocks = nn.Sequential()
    cin = 3
    for i, w in enumerate(cfg.widths):
        layers = [nn.Conv2d(cin, w, 3, stride=2 if i == 0 else 1, padding=1, bias=not cfg.batch_norm)]
        if cfg.batch_norm:
            layers.append(nn.BatchNorm2d(w))
        layers.append(nn.ReLU())
        if i < cfg.pooled_blocks:
            layers.append(nn.MaxPool2d(2))
        blocks.add_module(f"block{i + 1}", nn.Sequential(*layers))
        cin = w
    return blocks, cin, f"block{len(cfg.widths)}"


def _resnet18(cfg: TrunkConfig):
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    blocks = nn.Sequential()
    blocks.add_module("stem", nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool))
    for name in ("layer1", "layer2", "layer3", "layer4"):
        blocks.add_module(name, getattr(net, name))
    return blocks, 512, "layer4"


TRUNKS = {"small_cnn": _small_cnn, "resnet18": _resnet18}


class Encoder(nn.Module):
    """Convolutional trunk, global pool, linear projection to 1000-d.

    ``cam_layer`` names the last convolutional block inside ``trunk``; its
    output is what Grad-CAM hooks.
    """

    def __init__(self, branch: str, trunk: TrunkConfig):
        super().__init__()
        if branch not in BRANCHES:
            raise ConfigError(f"branch must be one of {BRANCHES}, got {branch!r}")
        if trunk.name not in TRUNKS:
            raise ConfigError(f"unknown trunk {trunk.name!r}; registered: {sorted(TRUNKS)}")
        self.branch = branch
        self.trunk_config = trunk
        self.trunk, channels, self.cam_layer = TRUNKS[trunk.name](trunk)
        self.pool = POOLS[trunk.pool](1)
        self.proj = nn.Linear(channels, FEATURE_DIM)

    def features(self, x):
        return self.trunk(x)

    def forward(self, x):
        return self.proj(torch.flatten(self.pool(self.trunk(x)), 1))

    def cam_module(self) -> nn.Module:
        return getattr(self.trunk, self.cam_layer)


def init_parameters(module: nn.Module, *seed_parts):
    """Seeded init: He fan-in normal for conv/linear, LeCun normal for heads,
    zero biases, unit batch-norm scale."""
    g = torch_generator("init", *seed_parts)
    with torch.no_grad():
        for _, mod in sorted(module.named_modules(), key=lambda kv: kv[0]):
            if isinstance(mod, _AffineHead):
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=g) / np.sqrt(mod.weight.shape[0]))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=g) * np.sqrt(2.0 / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, nn.BatchNorm2d):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    return module


def build_encoder(config=None, branch: str = "F", seed: int = 0) -> Encoder:
    cfg = config if isinstance(config, TrunkConfig) else TrunkConfig.from_dict(config or {})
    enc = Encoder(branch, cfg)
    return init_parameters(enc, seed, "encoder", branch)


def encode(enc: Encoder, batch) -> torch.Tensor:
    """Inference-mode features with a finiteness check after every block."""
    x = torch.as_tensor(batch, dtype=next(enc.parameters()).dtype)
    if x.ndim != 4 or x.shape[0] == 0:
        raise ContractError(f"encode expects a non-empty NCHW batch, got shape {tuple(x.shape)}")
    was_training = enc.training
    enc.eval()
    try:
        with torch.no_grad():
            for name, block in enc.trunk.named_children():
                x = block(x)
                if not torch.isfinite(x).all():
                    raise NumericError(f"non-finite activations after layer trunk.{name}")
            x = enc.proj(torch.flatten(enc.pool(x), 1))
            if not torch.isfinite(x).all():
                raise NumericError("non-finite activations after layer proj")
    finally:
        enc.train(was_training)
    return x


# ------------------------------------------------------------------ heads


class _AffineHead(nn.Module):
    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(in_features, out_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None

    def forward(self, f):
        if f.shape[-1] != self.weight.shape[0]:
            raise ContractError(f"{type(self).__name__}: feature length {f.shape[-1]} != {self.weight.shape[0]}")
        out = f @ self.weight
        return out + self.bias if self.bias is not None else out


class SignHead(_AffineHead):
    def __init__(self, in_features=FEATURE_DIM, n_signs=N_SIGNS, bias=True):
        super().__init__(in_features, n_signs, bias)


class DiagnosisHead(_AffineHead):
    def __init__(self, in_features=FUSED_DIM, n_classes=N_CLASSES, bias=True):
        super().__init__(in_features, n_classes, bias)


def sign_scores(head: SignHead, f) -> torch.Tensor:
    """Per-sign probabilities ``sigmoid(f @ W + b)``."""
    return torch.sigmoid(head(torch.as_tensor(f, dtype=head.weight.dtype)))


def predict_signs(probs) -> list:
    """Indices with probability strictly above 0.5 (one list per row for 2-d input)."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        return [int(i) for i in np.flatnonzero(p > SIGN_THRESHOLD)]
    return [[int(i) for i in np.flatnonzero(row > SIGN_THRESHOLD)] for row in p]


def fuse(f_f, f_o) -> torch.Tensor:
    f_f, f_o = torch.as_tensor(f_f), torch.as_tensor(f_o)
    if f_f.shape[-1] != FEATURE_DIM or f_o.shape[-1] != FEATURE_DIM:
        raise ContractError(f"fuse expects two {FEATURE_DIM}-d vectors, got {f_f.shape[-1]} and {f_o.shape[-1]}")
    return torch.cat([f_f, f_o], dim=-1)


def diagnosis_scores(head: DiagnosisHead, f) -> torch.Tensor:
    """Raw affine class scores; softmax lives in the loss only."""
    return head(torch.as_tensor(f, dtype=head.weight.dtype))


def predict_diagnosis(scores):
    """Argmax over class scores; ties go to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise NumericError("non-finite diagnosis score")
    from .data.schema import DiseaseLabel

    if s.ndim == 1:
        return DiseaseLabel(int(np.argmax(s)))
    return [DiseaseLabel(int(i)) for i in np.argmax(s, axis=1)]


# ------------------------------------------------------------------ assembled models


class SignModel(nn.Module):
    """One stage-1 pipeline: encoder + sign head."""

    def __init__(self, branch, trunk: TrunkConfig, bias=True):
        super().__init__()
        self.encoder = Encoder(branch, trunk)
        self.head = SignHead(bias=bias)

    def forward(self, x):
        return self.head(self.encoder(x))  # logits


class DiagnosisModel(nn.Module):
    """Both encoders, the fused diagnosis head and, optionally, stage-1 sign heads."""

    def __init__(self, trunk: TrunkConfig, bias=True, sign_heads=False):
        super().__init__()
        self.enc_f = Encoder("F", trunk)
        self.enc_o = Encoder("O", trunk)
        self.head = DiagnosisHead(bias=bias)
        self.sign_f = SignHead(bias=bias) if sign_heads else None
        self.sign_o = SignHead(bias=bias) if sign_heads else None

    def encoder(self, branch) -> Encoder:
        return self.enc_f if branch == "F" else self.enc_o

    def forward(self, x_f, x_o):
        return self.head(fuse(self.enc_f(x_f), self.enc_o(x_o)))

    @torch.no_grad()
    def predict(self, x_f, x_o) -> dict:
        """Diagnosis plus per-modality sign sets when sign heads are attached."""
        was = self.training
        self.eval()
        try:
            ff, fo = self.enc_f(x_f), self.enc_o(x_o)
            scores = self.head(fuse(ff, fo))
            out = {"scores": scores, "diagnosis": predict_diagnosis(scores.numpy())}
            if self.sign_f is not None:
                pf, po = sign_scores(self.sign_f, ff), sign_scores(self.sign_o, fo)
                out.update(fundus_probs=pf, oct_probs=po,
                           fundus_signs=predict_signs(pf.numpy()), oct_signs=predict_signs(po.numpy()))
        finally:
            self.train(was)
        return out


def parameter_checksum(module: nn.Module) -> str:
    """sha256 over parameter and buffer bytes in name order."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
