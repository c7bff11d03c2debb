"""Dataset records, the lesion-sign vocabulary and the manifest format.

``manifest.json`` layout (UTF-8, keys sorted)::

    {
      "format_version": 1,
      "vocabulary": {"Fundus": [5 sign names], "OCT": [5 sign names]},
      "diseases": ["NeovascularAMD", "PCV", "Other"],
      "records": [ {id, eye_id, fundus: {...}, oct: {...},
                    fundus_signs: [0/1 x5], oct_signs: [0/1 x5],
                    disease: int, lesion_boxes: [{modality, sign, box}]} ],
      "splits": {"train": [ids], "valid": [ids], "test": [ids]},
      "generator": {"seed": int, "spec": {...}, "spec_hash": str} | null
    }

Image records inside a group are ``{id, modality, eye_id, path}`` with ``path``
relative to the dataset directory. Boxes are ``[x0, y0, x1, y1]`` half-open
pixel coordinates of the original (pre-resize) image. The sign index order in
``vocabulary`` is frozen: index ``i`` of a sign vector always means
``vocabulary[modality][i]``.
"""
from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..errors import ConfigError, InputError

FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")


class Modality(str, enum.Enum):
    FUNDUS = "Fundus"
    OCT = "OCT"


class DiseaseLabel(enum.IntEnum):
    NeovascularAMD = 0
    PCV = 1
    Other = 2


FUNDUS_SIGNS = (
    "macular retinal hemorrhage",
    "macular retinal exudation",
    "drusen in macular area",
    "orange-red lesions under the retina",
    "subretinal hemorrhage",
)
OCT_SIGNS = (
    "intraretinal fluid",
    "subretinal fluid",
    "pigment epithelial detachment",
    "hyperreflective lesions under RPE",
    "hyperreflective lesions in/under the retina",
)
VOCABULARY = {Modality.FUNDUS: FUNDUS_SIGNS, Modality.OCT: OCT_SIGNS}
N_SIGNS = 5

# indices used by the sign -> disease rule table
F_ORANGE_RED, F_SUBRETINAL_HEM = 3, 4
O_IRF, O_SRF, O_UNDER_RPE = 0, 1, 3


def disease_from_signs(fundus_flags, oct_flags) -> DiseaseLabel:
    """Frozen rule table used by the synthetic generator.

    PCV if orange-red lesions or hyperreflective lesions under the RPE;
    otherwise neovascular AMD if intraretinal fluid, subretinal fluid or
    subretinal hemorrhage; otherwise Other.
    """
    f = [bool(v) for v in fundus_flags]
    o = [bool(v) for v in oct_flags]
    if f[F_ORANGE_RED] or o[O_UNDER_RPE]:
        return DiseaseLabel.PCV
    if o[O_IRF] or o[O_SRF] or f[F_SUBRETINAL_HEM]:
        return DiseaseLabel.NeovascularAMD
    return DiseaseLabel.Other


PixelSource = Union[str, np.ndarray]


@dataclass(eq=False)
class ImageRecord:
    id: str
    modality: Modality
    eye_id: str
    source: PixelSource  # path relative to the dataset root, or an in-memory HxW[xC] buffer

    def __post_init__(self):
        self.modality = Modality(self.modality)
        if not self.eye_id:
            raise ConfigError(f"image record {self.id!r}: empty eye_id")

    @property
    def in_memory(self) -> bool:
        return isinstance(self.source, np.ndarray)

    def to_dict(self) -> dict:
        if self.in_memory:
            raise InputError(f"image record {self.id!r} has no path; write the dataset first")
        return {"id": self.id, "modality": self.modality.value, "eye_id": self.eye_id,
                "path": str(self.source)}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageRecord":
        return cls(id=d["id"], modality=Modality(d["modality"]), eye_id=d["eye_id"], source=d["path"])


@dataclass(frozen=True)
class SignLabelVector:
    modality: Modality
    flags: tuple

    def __post_init__(self):
        object.__setattr__(self, "modality", Modality(self.modality))
        flags = tuple(bool(v) for v in self.flags)
        if len(flags) != N_SIGNS:
            raise ConfigError(f"sign vector needs exactly {N_SIGNS} flags, got {len(flags)}")
        object.__setattr__(self, "flags", flags)

    @property
    def names(self) -> list[str]:
        return [n for n, v in zip(VOCABULARY[self.modality], self.flags) if v]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.flags, dtype=np.float32)


@dataclass(frozen=True)
class LesionBox:
    modality: Modality
    sign: int
    box: tuple  # (x0, y0, x1, y1), half-open

    def to_dict(self) -> dict:
        return {"modality": Modality(self.modality).value, "sign": int(self.sign),
                "box": [int(v) for v in self.box]}

    @classmethod
    def from_dict(cls, d: dict) -> "LesionBox":
        return cls(Modality(d["modality"]), int(d["sign"]), tuple(int(v) for v in d["box"]))


@dataclass(eq=False)
class BiModalGroup:
    id: str
    fundus: ImageRecord
    oct: ImageRecord
    fundus_signs: SignLabelVector
    oct_signs: SignLabelVector
    disease: DiseaseLabel
    lesion_boxes: list = field(default_factory=list)

    def __post_init__(self):
        self.disease = DiseaseLabel(self.disease)
        if self.fundus.eye_id != self.oct.eye_id:
            raise ConfigError(f"group {self.id!r}: fundus and OCT come from different eyes")
        if self.fundus.modality != Modality.FUNDUS or self.oct.modality != Modality.OCT:
            raise ConfigError(f"group {self.id!r}: image modalities swapped")
        if self.fundus_signs.modality != Modality.FUNDUS or self.oct_signs.modality != Modality.OCT:
            raise ConfigError(f"group {self.id!r}: sign vector modalities swapped")

    @property
    def eye_id(self) -> str:
        return self.fundus.eye_id

    def image(self, modality) -> ImageRecord:
        return self.fundus if Modality(modality) == Modality.FUNDUS else self.oct

    def signs(self, modality) -> SignLabelVector:
        return self.fundus_signs if Modality(modality) == Modality.FUNDUS else self.oct_signs

    def boxes(self, modality) -> list[tuple]:
        m = Modality(modality)
        return [b.box for b in self.lesion_boxes if b.modality == m]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "eye_id": self.eye_id,
            "fundus": self.fundus.to_dict(),
            "oct": self.oct.to_dict(),
            "fundus_signs": [int(v) for v in self.fundus_signs.flags],
            "oct_signs": [int(v) for v in self.oct_signs.flags],
            "disease": int(self.disease),
            "lesion_boxes": [b.to_dict() for b in self.lesion_boxes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiModalGroup":
        return cls(
            id=d["id"],
            fundus=ImageRecord.from_dict(d["fundus"]),
            oct=ImageRecord.from_dict(d["oct"]),
            fundus_signs=SignLabelVector(Modality.FUNDUS, d["fundus_signs"]),
            oct_signs=SignLabelVector(Modality.OCT, d["oct_signs"]),
            disease=DiseaseLabel(d["disease"]),
            lesion_boxes=[LesionBox.from_dict(b) for b in d.get("lesion_boxes", [])],
        )


@dataclass(eq=False)
class DatasetManifest:
    records: list
    splits: dict
    generator: Optional[dict] = None
    root: Optional[Path] = None  # directory that relative image paths resolve against

    def __post_init__(self):
        self.validate()
        self._by_id = {g.id: g for g in self.records}

    def validate(self):
        ids = [g.id for g in self.records]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate group ids in manifest")
        if set(self.splits) != set(SPLITS):
            raise ConfigError(f"splits must be exactly {SPLITS}, got {sorted(self.splits)}")
        seen: set = set()
        for name in SPLITS:
            part = set(self.splits[name])
            if seen & part:
                raise ConfigError(f"split {name!r} overlaps another split")
            seen |= part
        if seen != set(ids):
            raise ConfigError("splits do not cover exactly the manifest's groups")
        # many groups may share a fundus record, but a shared id must mean a shared eye
        eyes: dict = {}
        for g in self.records:
            for rec in (g.fundus, g.oct):
                if eyes.setdefault(rec.id, rec.eye_id) != rec.eye_id:
                    raise ConfigError(f"image record {rec.id!r} reused across different eyes")

    def __getitem__(self, group_id: str) -> BiModalGroup:
        return self._by_id[group_id]

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[BiModalGroup]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [self._by_id[i] for i in self.splits[name]]

    def with_splits(self, splits: dict) -> "DatasetManifest":
        return DatasetManifest(self.records, splits, self.generator, self.root)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "vocabulary": {m.value: list(v) for m, v in VOCABULARY.items()},
            "diseases": [d.name for d in DiseaseLabel],
            "records": [g.to_dict() for g in self.records],
            "splits": {k: list(self.splits[k]) for k in SPLITS},
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported manifest format_version {d.get('format_version')!r}")
        vocab = d.get("vocabulary", {})
        for m, names in VOCABULARY.items():
            if tuple(vocab.get(m.value, ())) != names:
                raise ConfigError(f"manifest vocabulary for {m.value} differs from the frozen order")
        return cls(
            records=[BiModalGroup.from_dict(g) for g in d["records"]],
            splits={k: list(v) for k, v in d["splits"].items()},
            generator=d.get("generator"),
            root=Path(root) if root is not None else None,
        )


def dumps_manifest(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.to_dict(), sort_keys=True, indent=1, ensure_ascii=False) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_manifest(manifest), encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        from ..errors import MissingArtifactError

        raise MissingArtifactError(f"manifest not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_dict(d, root=path.parent)
