import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from signprior.data import (
    INPUT_SIZE,
    DatasetManifest,
    DiseaseLabel,
    ImageRecord,
    ImageStore,
    Modality,
    SyntheticSpec,
    augment,
    disease_from_signs,
    generate_synthetic_dataset,
    preprocess,
    read_manifest,
    split_dataset,
    write_dataset,
)
from signprior.data.schema import dumps_manifest
from signprior.data.splits import split_sizes
from signprior.data.synthetic import MOTIFS
from signprior.errors import ConfigError, InputError, MissingArtifactError
from signprior.seeding import rng_for

from conftest import fake_group, fake_manifest, tiny_spec

# ---------------------------------------------------------------- rule table


@pytest.mark.parametrize("f, o, expected", [
    ((0, 0, 0, 1, 0), (0, 0, 0, 0, 0), DiseaseLabel.PCV),  # orange-red lesions
    ((0, 0, 0, 0, 0), (0, 0, 0, 1, 0), DiseaseLabel.PCV),  # under the RPE
    ((0, 0, 0, 1, 1), (1, 1, 0, 0, 0), DiseaseLabel.PCV),  # PCV wins over nAMD signs
    ((0, 0, 0, 0, 0), (1, 0, 0, 0, 0), DiseaseLabel.NeovascularAMD),
    ((0, 0, 0, 0, 0), (0, 1, 0, 0, 0), DiseaseLabel.NeovascularAMD),
    ((0, 0, 0, 0, 1), (0, 0, 0, 0, 0), DiseaseLabel.NeovascularAMD),
    ((0, 0, 1, 0, 0), (0, 0, 0, 0, 0), DiseaseLabel.Other),  # drusen only
    ((1, 1, 1, 0, 0), (0, 0, 1, 0, 1), DiseaseLabel.Other),
])
def test_rule_table(f, o, expected):
    assert disease_from_signs(f, o) == expected


# ---------------------------------------------------------------- synthetic generator


def test_generated_labels_follow_rules_and_boxes(tiny_manifest):
    for g in tiny_manifest.records:
        assert g.disease == disease_from_signs(g.fundus_signs.flags, g.oct_signs.flags)
        for m in Modality:
            planted = {b.sign for b in g.lesion_boxes if b.modality == m}
            assert planted == {i for i, v in enumerate(g.signs(m).flags) if v}
        for b in g.lesion_boxes:
            x0, y0, x1, y1 = b.box
            assert 0 <= x0 < x1 <= 96 and 0 <= y0 < y1 <= 96


def test_forced_prevalence_gives_expected_labels():
    only_orange = {"Fundus": [0, 0, 0, 1, 0], "OCT": [0, 0, 0, 0, 0]}
    man = generate_synthetic_dataset(tiny_spec(prevalence=only_orange))
    assert {g.disease for g in man.records} == {DiseaseLabel.PCV}
    only_drusen = {"Fundus": [0, 0, 1, 0, 0], "OCT": [0, 0, 0, 0, 0]}
    man = generate_synthetic_dataset(tiny_spec(prevalence=only_drusen))
    assert {g.disease for g in man.records} == {DiseaseLabel.Other}
    assert all(g.fundus_signs.flags == (False, False, True, False, False) for g in man.records)


def test_generator_is_deterministic(tmp_path):
    a = generate_synthetic_dataset(tiny_spec(seed=3))
    b = generate_synthetic_dataset(tiny_spec(seed=3))
    for ga, gb in zip(a.records, b.records):
        assert np.array_equal(ga.fundus.source, gb.fundus.source)
        assert np.array_equal(ga.oct.source, gb.oct.source)
    wa = write_dataset(a, tmp_path / "a")
    wb = write_dataset(b, tmp_path / "b")
    assert dumps_manifest(wa) == dumps_manifest(wb)
    for g in wa.records:
        for m in Modality:
            p = g.image(m).source
            assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes()
    c = generate_synthetic_dataset(tiny_spec(seed=4))
    assert not np.array_equal(a.records[0].fundus.source, c.records[0].fundus.source)


def test_group_independent_of_counts():
    a = generate_synthetic_dataset(tiny_spec())
    b = generate_synthetic_dataset(tiny_spec(counts={"train": 2, "valid": 1, "test": 1}))
    assert np.array_equal(a.records[1].oct.source, b.records[1].oct.source)


def test_motifs_distinct():
    assert len(set(MOTIFS[Modality.FUNDUS] + MOTIFS[Modality.OCT])) == 10


@pytest.mark.parametrize("kw", [
    {"prevalence": {"Fundus": [1.2, 0, 0, 0, 0], "OCT": [0] * 5}},
    {"prevalence": {"Fundus": [-0.1, 0, 0, 0, 0], "OCT": [0] * 5}},
    {"counts": {"train": 0, "valid": 1, "test": 1}},
    {"counts": {"train": 5, "valid": 1}},
    {"image_size": 32},
    {"noise": 2.0},
])
def test_invalid_spec_rejected(kw):
    with pytest.raises(ConfigError):
        generate_synthetic_dataset(tiny_spec(**kw))


def test_spec_hash_tracks_fields():
    assert tiny_spec().hash() == tiny_spec().hash()
    assert tiny_spec().hash() != tiny_spec(seed=1).hash()


# ---------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path, tiny_manifest):
    written = write_dataset(tiny_manifest, tmp_path)
    back = read_manifest(tmp_path)
    assert back.to_dict() == written.to_dict()
    d = json.loads((tmp_path / "manifest.json").read_text())
    assert d["vocabulary"]["Fundus"][3] == "orange-red lesions under the retina"
    assert set(d["splits"]) == {"train", "valid", "test"}
    assert d["generator"]["spec_hash"] == tiny_spec().hash()
    # pixels survive the PNG round trip exactly
    g = tiny_manifest.records[0]
    np.testing.assert_array_equal(preprocess(g.fundus), preprocess(back[g.id].fundus, back.root))


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_manifest(tmp_path / "nowhere")
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ConfigError):
        read_manifest(tmp_path)


def test_manifest_invariants():
    groups = [fake_group(i) for i in range(4)]
    ids = [g.id for g in groups]
    with pytest.raises(ConfigError):  # overlap
        DatasetManifest(groups, {"train": ids[:3], "valid": ids[2:3], "test": ids[3:]})
    with pytest.raises(ConfigError):  # missing group
        DatasetManifest(groups, {"train": ids[:2], "valid": ids[2:3], "test": []})
    with pytest.raises(ConfigError):  # eye mismatch inside a group
        g = fake_group(9)
        g.oct.eye_id = "other"
        g.__post_init__()


def test_shared_fundus_record_allowed():
    px = np.zeros((8, 8, 3), np.uint8)
    a, b = fake_group(0, pixels=px), fake_group(1, pixels=px)
    b.fundus = ImageRecord(a.fundus.id, Modality.FUNDUS, a.eye_id, px)
    b.oct = ImageRecord(b.oct.id, Modality.OCT, a.eye_id, px)
    man = DatasetManifest([a, b, fake_group(2)], {"train": [a.id], "valid": [b.id], "test": ["g00002"]})
    store = ImageStore(man)
    assert store.images(Modality.FUNDUS, [a.id, b.id]).shape == (2, INPUT_SIZE, INPUT_SIZE, 3)


# ---------------------------------------------------------------- preprocess


def _rec(arr):
    return ImageRecord("r", Modality.FUNDUS, "e", arr)


def test_preprocess_resizes_rgb():
    arr = np.random.default_rng(0).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    out = preprocess(_rec(arr))
    assert out.shape == (224, 224, 3) and out.dtype == np.float32
    assert 0.0 <= out.min() and out.max() <= 1.0


def test_preprocess_constant_stays_constant():
    out = preprocess(_rec(np.full((300, 170, 3), 77, np.uint8)))
    assert np.allclose(out, 77 / 255, atol=1e-6)


def test_preprocess_identity_at_224():
    arr = np.random.default_rng(1).integers(0, 256, (224, 224, 3), dtype=np.uint8)
    out = preprocess(_rec(arr))
    assert np.max(np.abs(out - arr / 255.0)) <= 1e-6


def test_preprocess_grayscale_replicated(tmp_path):
    arr = np.random.default_rng(2).integers(0, 256, (50, 60), dtype=np.uint8)
    Image.fromarray(arr, mode="L").save(tmp_path / "g.png")
    out = preprocess(ImageRecord("gray", Modality.OCT, "e", "g.png"), tmp_path)
    assert out.shape == (224, 224, 3)
    assert np.array_equal(out[..., 0], out[..., 1]) and np.array_equal(out[..., 1], out[..., 2])


def test_preprocess_undecodable_names_record(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png at all")
    with pytest.raises(InputError, match="bad-record"):
        preprocess(ImageRecord("bad-record", Modality.FUNDUS, "e", "bad.png"), tmp_path)


def test_preprocess_single_pixel():
    out = preprocess(_rec(np.array([[[10, 20, 30]]], np.uint8)))
    assert out.shape == (224, 224, 3)
    assert np.allclose(out[100, 100], np.array([10, 20, 30]) / 255, atol=1e-6)


# ---------------------------------------------------------------- augment


class _ScriptedRng:
    def __init__(self, gates, angle=0.0, factor=1.0):
        self.gates, self.vals = gates, [angle, factor]

    def random(self, n):
        return np.asarray(self.gates[:n])

    def uniform(self, lo, hi):
        return self.vals.pop(0)


def _img(seed=0):
    return np.random.default_rng(seed).random((224, 224, 3)).astype(np.float32)


def test_augment_noop_and_flip():
    t = _img()
    assert np.array_equal(augment(t, _ScriptedRng([0.9, 0.9, 0.9])), t)
    flipped = augment(t, _ScriptedRng([0.9, 0.1, 0.9]))
    assert np.array_equal(flipped, t[:, ::-1, :])
    assert np.array_equal(augment(flipped, _ScriptedRng([0.9, 0.1, 0.9])), t)


def test_augment_contrast_about_mean():
    t = _img() * 0.5 + 0.25
    out = augment(t, _ScriptedRng([0.9, 0.9, 0.1], factor=1.2))
    assert np.allclose(out, np.clip(t.mean() + 1.2 * (t - t.mean()), 0, 1), atol=1e-6)


def test_augment_rotation_zero_angle_is_identity():
    t = _img()
    # float32 sampling-grid coordinates leave ~3e-5 of resampling error
    assert np.allclose(augment(t, _ScriptedRng([0.1, 0.9, 0.9], angle=0.0)), t, atol=1e-4)


def test_augment_rotation_moves_pixels():
    t = np.zeros((224, 224, 3), np.float32)
    t[100:124, 150:170] = 1.0
    out = augment(t, _ScriptedRng([0.1, 0.9, 0.9], angle=15.0))
    assert not np.allclose(out, t, atol=1e-3)
    assert abs(out.sum() - t.sum()) / t.sum() < 0.05  # mass roughly preserved


def test_augment_deterministic_stream():
    t = _img()
    a = augment(t, rng_for("augment", 0, 3, "g00001_f"))
    b = augment(t, rng_for("augment", 0, 3, "g00001_f"))
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_stays_in_unit_range(seed):
    out = augment(_img(seed % 7), np.random.default_rng(seed))
    assert out.shape == (224, 224, 3)
    assert np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- splits


def test_split_sizes_exact():
    assert split_sizes(100, (0.8, 0.1, 0.1)) == [80, 10, 10]
    assert sum(split_sizes(7, (0.5, 0.25, 0.25))) == 7
    assert min(split_sizes(3, (0.98, 0.01, 0.01))) == 1


def test_split_reproduces_table_proportions():
    n = 5261
    ratios = (4484 / n, 422 / n, 355 / n)
    man = split_dataset(fake_manifest(n), ratios, seed=0)
    sizes = [len(man.splits[k]) for k in ("train", "valid", "test")]
    assert all(abs(a - b) <= 1 for a, b in zip(sizes, (4484, 422, 355)))


def test_split_disjoint_cover_deterministic_and_stratified():
    base = fake_manifest(400, seed=1)
    a = split_dataset(base, (0.8, 0.1, 0.1), seed=5)
    b = split_dataset(base, (0.8, 0.1, 0.1), seed=5)
    c = split_dataset(base, (0.8, 0.1, 0.1), seed=6)
    assert a.splits == b.splits
    assert a.splits != c.splits
    all_ids = sorted(g.id for g in base.records)
    assert sorted(sum(a.splits.values(), [])) == all_ids
    overall = np.bincount([int(g.disease) for g in base.records], minlength=3) / 400
    test_mix = np.bincount([int(a[i].disease) for i in a.splits["train"]], minlength=3) / 320
    assert np.abs(overall - test_mix).max() < 0.02


@pytest.mark.parametrize("ratios", [(1.0, 0.0, 0.0), (0.5, 0.3, 0.3), (0.8, 0.2), (-0.1, 0.6, 0.5)])
def test_split_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        split_dataset(fake_manifest(10), ratios)


def test_split_too_few_groups():
    groups = [fake_group(0), fake_group(1)]
    man = DatasetManifest(groups, {"train": ["g00000"], "valid": ["g00001"], "test": []})
    with pytest.raises(ConfigError):
        split_dataset(man)


# ---------------------------------------------------------------- store


def test_store_shapes_and_targets(tiny_manifest):
    store = ImageStore(tiny_manifest)
    ids = tiny_manifest.splits["train"][:3]
    x = store.images(Modality.OCT, ids)
    assert x.shape == (3, 224, 224, 3) and x.dtype == np.float32
    assert 0.0 <= x.min() and x.max() <= 1.0
    y = store.sign_targets(Modality.FUNDUS, ids)
    assert y.shape == (3, 5)
    assert list(store.disease_targets(ids)) == [int(tiny_manifest[i].disease) for i in ids]
    with pytest.raises(ValueError):
        store.image(Modality.OCT, tiny_manifest[ids[0]].oct.id)[0, 0, 0] = 1.0  # cached arrays are read-only
