"""In-memory cache of preprocessed images for one manifest."""
from __future__ import annotations

import numpy as np

from .schema import DatasetManifest, Modality
from .transforms import INPUT_SIZE, preprocess


class ImageStore:
    """Preprocesses every image of a manifest once and serves stacked arrays.

    Images are stored HxWx3 float32. ``images(modality, ids)`` returns a
    read-only view-backed copy, ``labels`` the matching sign or disease targets.
    """

    def __init__(self, manifest: DatasetManifest, root=None):
        self.manifest = manifest
        self.root = root if root is not None else manifest.root
        self._index: dict = {}
        self._arrays: dict = {}
        for m in Modality:
            recs = {}
            for g in manifest.records:
                rec = g.image(m)
                recs.setdefault(rec.id, rec)
            arr = np.empty((len(recs), INPUT_SIZE, INPUT_SIZE, 3), dtype=np.float32)
            index = {}
            for i, (rid, rec) in enumerate(recs.items()):
                arr[i] = preprocess(rec, self.root)
                index[rid] = i
            arr.flags.writeable = False
            self._arrays[m] = arr
            self._index[m] = index

    def image(self, modality, record_id) -> np.ndarray:
        m = Modality(modality)
        return self._arrays[m][self._index[m][record_id]]

    def images(self, modality, group_ids) -> np.ndarray:
        m = Modality(modality)
        rows = [self._index[m][self.manifest[g].image(m).id] for g in group_ids]
        return self._arrays[m][rows]

    def sign_targets(self, modality, group_ids) -> np.ndarray:
        return np.stack([self.manifest[g].signs(modality).as_array() for g in group_ids])

    def disease_targets(self, group_ids) -> np.ndarray:
        return np.asarray([int(self.manifest[g].disease) for g in group_ids], dtype=np.int64)
