"""Stratified, seed-deterministic train/valid/test assignment."""
from __future__ import annotations

import math
from collections import defaultdict

from ..errors import ConfigError
from ..seeding import derive_seed
from .schema import SPLITS, DatasetManifest


def split_sizes(n: int, ratios) -> list[int]:
    """Largest-remainder apportionment of ``n`` items, at least one per split."""
    raw = [n * r for r in ratios]
    sizes = [math.floor(v) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i in range(len(sizes)):
        while sizes[i] == 0:
            j = max(range(len(sizes)), key=lambda k: sizes[k])
            sizes[j] -= 1
            sizes[i] += 1
    return sizes


def split_dataset(manifest: DatasetManifest, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Reassign splits, stratified by disease label.

    Within each class, groups are ordered by a hash of ``(seed, group id)`` and
    given evenly spaced positions in [0, 1). All groups are then sorted by
    position and cut into consecutive runs of the requested sizes, so every
    split sees roughly the global class mix and the totals are exact.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ConfigError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    n = len(manifest.records)
    if n < 3:
        raise ConfigError(f"need at least 3 groups to split, got {n}")

    by_class = defaultdict(list)
    for g in manifest.records:
        by_class[int(g.disease)].append(g.id)
    keyed = []
    for label, ids in by_class.items():
        ids = sorted(ids, key=lambda i: (derive_seed("split", seed, i), i))
        for rank, gid in enumerate(ids):
            keyed.append(((rank + 0.5) / len(ids), derive_seed("split-tie", seed, gid), gid))
    keyed.sort()
    order = [k[2] for k in keyed]

    sizes = split_sizes(n, ratios)
    splits, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        splits[name] = sorted(order[start:start + size])
        start += size
    return manifest.with_splits(splits)
