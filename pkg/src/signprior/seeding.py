"""Stable seed derivation.

Python's ``hash`` is salted per process, so derived seeds go through blake2b
instead. Every random stream in the package is built from ``derive_seed``.
"""
import hashlib

import numpy as np
import torch


def derive_seed(*parts) -> int:
    key = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


def rng_for(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def torch_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts) & 0x7FFF_FFFF_FFFF_FFFF)
    return g
