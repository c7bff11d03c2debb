"""Versioned checkpoint container.

Layout::

    8 bytes   magic b"SGNPRIOR"
    4 bytes   format version, little-endian uint32
    8 bytes   header length N, little-endian uint64
    N bytes   UTF-8 JSON header
    ...       raw little-endian tensor bytes, concatenated in header order

The header carries stage, trunk config, hyperparams, seed, epoch, metrics,
config hash, a tensor index (name, dtype, shape, offset, nbytes) and the
sha256 of the tensor payload, so truncation or bit rot fails loudly.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import CheckpointError, MissingArtifactError
from ..model import DiagnosisModel, SignModel, TrunkConfig

MAGIC = b"SGNPRIOR"
FORMAT_VERSION = 1
STAGES = ("signs-F", "signs-O", "diagnosis")


@dataclass(eq=False)
class Checkpoint:
    stage: str
    trunk: dict
    state: dict  # name -> np.ndarray
    epoch: int
    hyperparams: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)  # arm, bias flag, sign heads, checksums
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown checkpoint stage {self.stage!r}")

    @property
    def branch(self) -> str:
        return self.stage[-1] if self.stage.startswith("signs-") else ""

    @classmethod
    def from_model(cls, stage, model, trunk: TrunkConfig, epoch, hyperparams, seed,
                   metrics=None, config_hash="", extra=None) -> "Checkpoint":
        state = {k: v.detach().cpu().clone().numpy() for k, v in model.state_dict().items()}
        return cls(stage, trunk.to_dict(), state, int(epoch), dict(hyperparams), int(seed),
                   dict(metrics or {}), config_hash, dict(extra or {}))

    def build_model(self):
        trunk = TrunkConfig.from_dict(self.trunk)
        bias = self.extra.get("bias", True)
        if self.stage == "diagnosis":
            model = DiagnosisModel(trunk, bias=bias, sign_heads=bool(self.extra.get("sign_heads", False)))
        else:
            model = SignModel(self.branch, trunk, bias=bias)
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.state.items()})
        model.eval()
        return model

    def encoder_state(self, prefix="encoder.") -> dict:
        return {k[len(prefix):]: v for k, v in self.state.items() if k.startswith(prefix)}


def state_checksum(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name]).tobytes())
    return h.hexdigest()


def save_checkpoint(c: Checkpoint, path) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name in sorted(c.state):
        arr = np.ascontiguousarray(c.state[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "stage": c.stage,
        "trunk": c.trunk,
        "epoch": c.epoch,
        "hyperparams": c.hyperparams,
        "seed": c.seed,
        "metrics": c.metrics,
        "config_hash": c.config_hash,
        "extra": c.extra,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_stage=None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    if 20 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch (truncated or corrupt)")
    state = {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        state[t["name"]] = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    c = Checkpoint(header["stage"], header["trunk"], state, header["epoch"], header["hyperparams"],
                   header["seed"], header["metrics"], header["config_hash"], header["extra"], version)
    if expect_stage is not None and c.stage not in ((expect_stage,) if isinstance(expect_stage, str) else expect_stage):
        raise CheckpointError(f"{path}: stage mismatch, expected {expect_stage!r}, found {c.stage!r}")
    return c


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
