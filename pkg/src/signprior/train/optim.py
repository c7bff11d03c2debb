"""Step-decay learning rate and SGD with momentum and coupled L2 weight decay."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

from ..errors import ConfigError, NumericError


@dataclass
class Hyperparams:
    base_lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    batch_size: int = 8
    epochs_stage1: int = 500
    epochs_stage2: int = 100
    lr_decay_period: int = 20
    lr_decay_factor: float = 0.1
    seed: int = 0
    freeze_encoders: bool = False
    class_weights: bool = False
    augment: bool = True

    def __post_init__(self):
        for name in ("base_lr", "momentum", "weight_decay", "batch_size", "epochs_stage1",
                     "epochs_stage2", "lr_decay_period"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"hyperparams.{name} must be positive, got {getattr(self, name)!r}")
        if not self.momentum < 1.0:
            raise ConfigError(f"hyperparams.momentum must be below 1, got {self.momentum!r}")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ConfigError(f"hyperparams.lr_decay_factor must be in (0, 1), got {self.lr_decay_factor!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown hyperparams keys: {sorted(extra)}")
        return cls(**d)


def lr_at(epoch: int, h: Hyperparams) -> float:
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return h.base_lr * h.lr_decay_factor ** (epoch // h.lr_decay_period)


def sgd_update(params, grads, velocity, lr, momentum=0.9, weight_decay=0.001, names=None):
    """One in-place SGD step over matching lists of tensors.

    ``v <- momentum * v + (g + weight_decay * p)`` then ``p <- p - lr * v``.
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ConfigError("params, grads and velocity must have equal length")
    names = names or [f"param{i}" for i in range(len(params))]
    with torch.no_grad():
        for name, p, g, v in zip(names, params, grads, velocity):
            if p.shape != g.shape or p.shape != v.shape:
                raise ConfigError(f"{name}: shape mismatch {tuple(p.shape)} / {tuple(g.shape)} / {tuple(v.shape)}")
            if not torch.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
            v.mul_(momentum).add_(g).add_(p, alpha=weight_decay)
            p.sub_(v, alpha=lr)
    return params


class MomentumSGD:
    """Minimal optimizer over named parameters driving :func:`sgd_update`."""

    def __init__(self, named_params, h: Hyperparams):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.velocity = [torch.zeros_like(p) for _, p in self.named]
        self.h = h
        self.lr = h.base_lr
        self.steps = 0

    def set_epoch(self, epoch: int):
        self.lr = lr_at(epoch, self.h)

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self):
        params, grads = [], []
        for n, p in self.named:
            params.append(p)
            grads.append(p.grad if p.grad is not None else torch.zeros_like(p))
        sgd_update(params, grads, self.velocity, self.lr, self.h.momentum, self.h.weight_decay,
                   names=[n for n, _ in self.named])
        self.steps += 1
