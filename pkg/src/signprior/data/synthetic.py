"""Deterministic synthetic bi-modal (fundus + OCT) dataset.

Every image is drawn from its own generator seeded by ``(seed, group index,
modality)``, so a group renders identically regardless of how many groups
precede it. Each lesion sign has one motif; a group's sign flags are exactly
the motifs planted into its images and its disease label follows
:func:`~signprior.data.schema.disease_from_signs`.

Several motifs are deliberately close in appearance (small dark-red dots vs a
larger dark-red patch vs orange-red nodules on the fundus; bright foci above vs
below the RPE band on OCT). Telling them apart is what makes the diagnosis
fine-grained.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError
from ..seeding import derive_seed
from .schema import (
    SPLITS,
    BiModalGroup,
    DatasetManifest,
    ImageRecord,
    LesionBox,
    Modality,
    SignLabelVector,
    disease_from_signs,
    write_manifest,
)

MOTIFS = {
    Modality.FUNDUS: (
        "cluster of small dark-red dots",
        "cluster of tiny bright-yellow specks",
        "soft pale-yellow round spots",
        "orange nodules with a dark-red rim",
        "single large dark-red irregular patch",
    ),
    Modality.OCT: (
        "dark round cysts inside the retinal band",
        "dark lens-shaped pocket on top of the RPE",
        "dome-shaped elevation of the RPE line",
        "bright blob directly below the RPE",
        "bright dots inside the retinal band",
    ),
}

# decisive signs are rarer than the distractors, so most groups carry several
# lesions but only a few carry the ones that set the label
DEFAULT_PREVALENCE = {
    Modality.FUNDUS.value: [0.35, 0.35, 0.35, 0.2, 0.15],
    Modality.OCT.value: [0.15, 0.15, 0.35, 0.2, 0.35],
}


@dataclass
class SyntheticSpec:
    counts: dict = field(default_factory=lambda: {"train": 600, "valid": 100, "test": 100})
    image_size: int = 256
    prevalence: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_PREVALENCE.items()})
    noise: float = 0.04
    lesion_scale: float = 2.5
    seed: int = 0

    def validate(self):
        if set(self.counts) != set(SPLITS):
            raise ConfigError(f"counts must name exactly {SPLITS}")
        for k, n in self.counts.items():
            if int(n) != n or n <= 0:
                raise ConfigError(f"counts.{k}: group count must be a positive integer, got {n!r}")
        if self.image_size < 96:
            raise ConfigError(f"image_size must be >= 96, got {self.image_size}")
        if set(self.prevalence) != {m.value for m in Modality}:
            raise ConfigError("prevalence needs one list per modality (Fundus, OCT)")
        for m, p in self.prevalence.items():
            if len(p) != 5:
                raise ConfigError(f"prevalence.{m}: need 5 values, got {len(p)}")
            for i, v in enumerate(p):
                if not (0.0 <= float(v) <= 1.0):
                    raise ConfigError(f"prevalence.{m}[{i}] = {v!r} outside [0, 1]")
        if not (0.25 <= self.lesion_scale <= 4.0):
            raise ConfigError(f"lesion_scale must be in [0.25, 4], got {self.lesion_scale}")
        if not (0.0 <= self.noise <= 0.5):
            raise ConfigError(f"noise must be in [0, 0.5], got {self.noise}")
        if len(set(MOTIFS[Modality.FUNDUS] + MOTIFS[Modality.OCT])) != 10:
            raise ConfigError("marker motifs must be distinct")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = {k: int(self.counts[k]) for k in SPLITS}
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- drawing


def _grid(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    return yy, xx


def _smooth_noise(rng, size, cells, amp):
    coarse = rng.normal(0.0, 1.0, (cells + 1, cells + 1)).astype(np.float32)
    # bilinear upsample of a coarse lattice
    t = np.linspace(0, cells, size, dtype=np.float32)
    i0 = np.minimum(t.astype(int), cells - 1)
    f = t - i0
    rows = coarse[i0] * (1 - f)[:, None] + coarse[i0 + 1] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return amp * out


def _stamp(img, cy, cx, ry, rx, color, alpha=1.0, angle=0.0, soft=1.0):
    """Alpha-blend a filled ellipse into ``img`` (HxWx3); returns its box."""
    h, w = img.shape[:2]
    r = max(ry, rx) + 2 * soft + 1
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 1, h)
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return None
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float32)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    edge = soft / max(min(rx, ry), 1.0)
    m = np.clip((1.0 - d) / edge + 0.5, 0.0, 1.0) * alpha
    patch = img[y0:y1, x0:x1]
    patch[:] = patch * (1 - m[..., None]) + np.asarray(color, np.float32) * m[..., None]
    nz = np.argwhere(m > 0.05)
    if nz.size == 0:
        return None
    (ay, ax), (by, bx) = nz.min(0), nz.max(0)
    return (x0 + int(ax), y0 + int(ay), x0 + int(bx) + 1, y0 + int(by) + 1)


def _union(boxes):
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    a = np.asarray(boxes)
    return (int(a[:, 0].min()), int(a[:, 1].min()), int(a[:, 2].max()), int(a[:, 3].max()))


def _overlaps(box, others, margin):
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in others:
        if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
            return True
    return False


def _jitter(rng, base, amount):
    return np.clip(np.asarray(base, np.float32) + rng.uniform(-amount, amount, 3), 0, 1)


# ---------------------------------------------------------------- fundus


def _fundus_background(rng, size):
    yy, xx = _grid(size)
    c = size / 2.0
    rad = np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / (0.47 * size)
    base = _jitter(rng, (0.78, 0.36, 0.17), 0.04)
    shade = 1.0 - 0.35 * rad**2 + _smooth_noise(rng, size, 6, 0.05)
    img = base[None, None, :] * shade[..., None]
    # macula: darker center
    mac = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * (0.09 * size) ** 2))
    img *= 1.0 - 0.25 * mac[..., None]
    side = rng.choice([-1.0, 1.0])
    dcx, dcy = c + side * 0.28 * size, c + rng.uniform(-0.04, 0.04) * size
    _stamp(img, dcy, dcx, 0.075 * size, 0.065 * size, (0.98, 0.86, 0.62), soft=3.0)
    # vessels: smooth arcs from the disc, stamped as overlapping small discs
    for _ in range(rng.integers(4, 7)):
        ang = rng.uniform(0, 2 * np.pi)
        curv = rng.uniform(-0.012, 0.012)
        width = rng.uniform(1.2, 2.4) * size / 256
        y, x = dcy, dcx
        for step in range(int(0.55 * size)):
            ang += curv
            y += np.sin(ang)
            x += np.cos(ang)
            if not (0 <= y < size and 0 <= x < size):
                break
            if step % 2 == 0:
                _stamp(img, y, x, width, width, (0.55, 0.12, 0.08), alpha=0.8, soft=0.8)
    mask = np.clip((1.0 - rad) * 40.0, 0, 1)
    r = 0.085 * size
    disc_box = (dcx - r, dcy - r, dcx + r, dcy + r)
    return img * mask[..., None], mask, disc_box


def _fundus_site(rng, size, mask, avoid, extent):
    for _ in range(60):
        cy, cx = rng.uniform(0.2, 0.8, 2) * size
        box = (cx - extent, cy - extent, cx + extent, cy + extent)
        if mask[int(cy), int(cx)] >= 1 and not _overlaps(box, avoid, 4):
            return cy, cx
    return None


def _draw_fundus_sign(img, rng, k, cy, cx, s):
    boxes = []
    if k == 0:  # small dark-red dots
        for _ in range(rng.integers(3, 6)):
            r = rng.uniform(2.0, 3.5) * s
            boxes.append(_stamp(img, cy + rng.uniform(-9, 9) * s, cx + rng.uniform(-9, 9) * s,
                                r, r, _jitter(rng, (0.42, 0.05, 0.04), 0.03)))
    elif k == 1:  # tiny yellow specks
        for _ in range(rng.integers(5, 9)):
            r = rng.uniform(1.2, 2.2) * s
            boxes.append(_stamp(img, cy + rng.uniform(-10, 10) * s, cx + rng.uniform(-10, 10) * s,
                                r, r, _jitter(rng, (0.96, 0.86, 0.36), 0.03), soft=0.6))
    elif k == 2:  # soft pale drusen
        for _ in range(rng.integers(3, 6)):
            r = rng.uniform(3.0, 4.5) * s
            boxes.append(_stamp(img, cy + rng.uniform(-10, 10) * s, cx + rng.uniform(-10, 10) * s,
                                r, r, _jitter(rng, (0.88, 0.72, 0.45), 0.03), alpha=0.75, soft=2.0))
    elif k == 3:  # orange nodules with a dark-red rim
        for _ in range(rng.integers(2, 4)):
            r = rng.uniform(4.0, 5.5) * s
            y, x = cy + rng.uniform(-8, 8) * s, cx + rng.uniform(-8, 8) * s
            boxes.append(_stamp(img, y, x, r, r, _jitter(rng, (0.45, 0.06, 0.05), 0.03)))
            _stamp(img, y, x, 0.6 * r, 0.6 * r, _jitter(rng, (1.0, 0.55, 0.18), 0.03))
    else:  # one large dark-red irregular patch
        ry, rx = rng.uniform(7, 11) * s, rng.uniform(11, 16) * s
        ang = rng.uniform(0, np.pi)
        boxes.append(_stamp(img, cy, cx, ry, rx, _jitter(rng, (0.40, 0.05, 0.04), 0.03), angle=ang))
        for _ in range(3):
            boxes.append(_stamp(img, cy + rng.uniform(-0.6, 0.6) * ry, cx + rng.uniform(-0.6, 0.6) * rx,
                                0.6 * ry, 0.5 * rx, _jitter(rng, (0.40, 0.05, 0.04), 0.03), angle=ang + 1.0))
    return _union(boxes)


def render_fundus(rng, size, flags, noise, lesion_scale=1.0):
    s = size / 256.0 * lesion_scale
    img, mask, disc_box = _fundus_background(rng, size)
    taken: list = [disc_box]
    boxes: dict = {}
    for k in np.flatnonzero(flags):
        site = _fundus_site(rng, size, mask, taken, 16 * s)
        if site is None:
            continue
        box = _draw_fundus_sign(img, rng, int(k), site[0], site[1], s)
        if box is not None:
            taken.append(box)
            boxes[int(k)] = box
    img = img + rng.normal(0.0, noise, img.shape).astype(np.float32)
    img *= mask[..., None]
    return np.clip(img, 0, 1), boxes


# ---------------------------------------------------------------- OCT


def render_oct(rng, size, flags, noise, lesion_scale=1.0):
    s = size / 256.0
    ls = s * lesion_scale
    yy, xx = _grid(size)
    x = np.arange(size, dtype=np.float32)
    c = size / 2.0
    top = (0.30 + rng.uniform(-0.03, 0.03)) * size + 4 * s * np.sin(x / size * 2 * np.pi * rng.uniform(0.5, 1.2)
                                                                   + rng.uniform(0, 2 * np.pi))
    top += 12 * s * np.exp(-((x - c - rng.uniform(-12, 12) * s) ** 2) / (2 * (16 * s) ** 2))  # foveal pit
    thick = (0.20 + rng.uniform(-0.02, 0.02)) * size
    rpe = top + thick - 10 * s * np.exp(-((x - c) ** 2) / (2 * (16 * s) ** 2))

    # pocket under the retina / dome under the RPE, carved before painting layers
    xs_taken: list = []

    def pick_x(width):
        for _ in range(60):
            x0 = rng.uniform(0.12 * size, 0.88 * size - width)
            if not any(x0 < b + 6 * s and a < x0 + width + 6 * s for a, b in xs_taken):
                xs_taken.append((x0, x0 + width))
                return x0
        x0 = rng.uniform(0.12 * size, 0.88 * size - width)
        xs_taken.append((x0, x0 + width))
        return x0

    boxes: dict = {}
    lift = np.zeros(size, np.float32)  # SRF: retina lifted off the RPE
    dome = np.zeros(size, np.float32)  # PED: RPE raised
    if flags[1]:
        w = rng.uniform(34, 50) * ls
        x0 = pick_x(w)
        hgt = rng.uniform(8, 13) * ls
        prof = np.clip(1 - ((x - x0 - w / 2) / (w / 2)) ** 2, 0, None)
        lift = hgt * prof
        boxes[1] = (int(x0), int((rpe - lift)[int(x0 + w / 2)] - 1), int(np.ceil(x0 + w)),
                    int(rpe[int(x0 + w / 2)] + 2))
    if flags[2]:
        w = rng.uniform(30, 46) * ls
        x0 = pick_x(w)
        hgt = rng.uniform(10, 16) * ls
        prof = np.sqrt(np.clip(1 - ((x - x0 - w / 2) / (w / 2)) ** 2, 0, None))
        dome = hgt * prof
        mid = int(x0 + w / 2)
        boxes[2] = (int(x0), int(rpe[mid] - dome[mid] - 3 * s), int(np.ceil(x0 + w)), int(rpe[mid] + 4 * s))

    rpe_line = rpe - dome
    top_line = top - dome
    depth = (yy - top_line[None, :]) / (rpe_line - lift - top_line)[None, :]
    img = np.full((size, size), 0.05, np.float32)
    retina = (depth >= 0) & (depth < 1)
    layers = 0.38 + 0.12 * np.cos(depth * np.pi * rng.uniform(3.5, 4.5)) + 0.10 * (depth < 0.12)
    img = np.where(retina, layers, img)
    # dark gap between lifted retina and RPE
    gap = (yy >= (rpe_line - lift)[None, :]) & (yy < rpe_line[None, :] - 1)
    img = np.where(gap, 0.07, img)
    # RPE band and choroid
    rpe_band = np.abs(yy - rpe_line[None, :]) < 2.5 * s
    below = yy >= rpe_line[None, :] + 2.5 * s
    chor = 0.30 * np.exp(-(yy - rpe[None, :]) / (0.25 * size)) + _smooth_noise(rng, size, 10, 0.04)
    img = np.where(below, chor, img)
    sub_dome = (yy > rpe_line[None, :] + 2.5 * s) & (yy < rpe[None, :]) & (dome[None, :] > 0)
    img = np.where(sub_dome, 0.15, img)
    img = np.where(rpe_band, 0.85, img)
    img = img[..., None].repeat(3, axis=2)

    if flags[0]:  # dark cysts inside the retina
        bs = []
        x0 = pick_x(36 * ls)
        for _ in range(rng.integers(1, 4)):
            cx = x0 + rng.uniform(6, 30) * ls
            i = int(np.clip(cx, 0, size - 1))
            cy = top_line[i] + rng.uniform(0.35, 0.65) * (rpe_line[i] - top_line[i])
            r = rng.uniform(3.5, 6.5) * ls
            bs.append(_stamp(img, cy, cx, r, r * rng.uniform(1.0, 1.5), (0.06, 0.06, 0.06), soft=1.2))
        boxes[0] = _union(bs)
    if flags[3]:  # bright blob below the RPE
        x0 = pick_x(22 * ls)
        cx = x0 + 11 * ls
        i = int(np.clip(cx, 0, size - 1))
        cy = rpe[i] + rng.uniform(7, 11) * ls
        r = rng.uniform(4.5, 6.5) * ls
        boxes[3] = _stamp(img, cy, cx, r * 0.8, r * 1.3, (0.92, 0.92, 0.92), soft=1.2)
    if flags[4]:  # bright dots in the retina
        bs = []
        x0 = pick_x(34 * ls)
        for _ in range(rng.integers(2, 5)):
            cx = x0 + rng.uniform(4, 30) * ls
            i = int(np.clip(cx, 0, size - 1))
            cy = top_line[i] + rng.uniform(0.3, 0.8) * (rpe_line[i] - top_line[i])
            r = rng.uniform(2.0, 3.5) * ls
            bs.append(_stamp(img, cy, cx, r, r, (0.92, 0.92, 0.92), soft=1.0))
        boxes[4] = _union(bs)
    speckle = rng.gamma(8.0, 1 / 8.0, (size, size)).astype(np.float32)
    img = img * speckle[..., None] + rng.normal(0.0, noise, (size, size, 1)).astype(np.float32)
    return np.clip(img, 0, 1), {k: v for k, v in boxes.items() if v is not None}


# ---------------------------------------------------------------- dataset


def _to_u8(img):
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def make_group(spec: SyntheticSpec, index: int) -> BiModalGroup:
    gid = f"g{index:05d}"
    eye = f"eye{index:05d}"
    flags = {}
    images = {}
    lesion_boxes = []
    for m in (Modality.FUNDUS, Modality.OCT):
        rng = np.random.default_rng(derive_seed("synthetic", spec.seed, index, m.value))
        prev = np.asarray(spec.prevalence[m.value], dtype=np.float64)
        f = rng.random(5) < prev
        render = render_fundus if m == Modality.FUNDUS else render_oct
        img, boxes = render(rng, spec.image_size, f, spec.noise, spec.lesion_scale)
        # a motif that could not be placed is not planted, so it is not flagged
        f = np.array([bool(f[k]) and k in boxes for k in range(5)])
        flags[m] = f
        images[m] = _to_u8(img)
        lesion_boxes += [LesionBox(m, k, boxes[k]) for k in sorted(boxes) if f[k]]
    tag = {Modality.FUNDUS: "f", Modality.OCT: "o"}
    recs = {m: ImageRecord(f"{gid}_{tag[m]}", m, eye, images[m]) for m in images}
    return BiModalGroup(
        id=gid,
        fundus=recs[Modality.FUNDUS],
        oct=recs[Modality.OCT],
        fundus_signs=SignLabelVector(Modality.FUNDUS, flags[Modality.FUNDUS]),
        oct_signs=SignLabelVector(Modality.OCT, flags[Modality.OCT]),
        disease=disease_from_signs(flags[Modality.FUNDUS], flags[Modality.OCT]),
        lesion_boxes=lesion_boxes,
    )


def generate_synthetic_dataset(spec: SyntheticSpec) -> DatasetManifest:
    """Render all groups in memory; splits follow ``spec.counts`` in index order."""
    spec.validate()
    groups, splits, i = [], {}, 0
    for name in SPLITS:
        ids = []
        for _ in range(int(spec.counts[name])):
            g = make_group(spec, i)
            groups.append(g)
            ids.append(g.id)
            i += 1
        splits[name] = ids
    gen = {"seed": int(spec.seed), "spec": spec.to_dict(), "spec_hash": spec.hash()}
    return DatasetManifest(groups, splits, generator=gen)


def write_dataset(manifest: DatasetManifest, root) -> DatasetManifest:
    """Write ``images/*.png`` and ``manifest.json``; return the path-backed manifest."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    written = {}
    for g in manifest.records:
        for rec in (g.fundus, g.oct):
            if rec.id in written:
                continue
            rel = f"images/{rec.id}.png"
            if rec.in_memory:
                Image.fromarray(np.asarray(rec.source, dtype=np.uint8)).save(root / rel, optimize=False)
            written[rec.id] = rel
    records = []
    for g in manifest.records:
        records.append(BiModalGroup(
            g.id,
            ImageRecord(g.fundus.id, g.fundus.modality, g.fundus.eye_id, written[g.fundus.id]),
            ImageRecord(g.oct.id, g.oct.modality, g.oct.eye_id, written[g.oct.id]),
            g.fundus_signs, g.oct_signs, g.disease, list(g.lesion_boxes),
        ))
    out = DatasetManifest(records, manifest.splits, manifest.generator, root)
    write_manifest(out, root / "manifest.json")
    return out


def spec_from_dict(d: dict) -> SyntheticSpec:
    known = {"counts", "image_size", "prevalence", "noise", "lesion_scale", "seed"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown synthetic spec keys: {sorted(extra)}")
    return SyntheticSpec(**d).validate()
