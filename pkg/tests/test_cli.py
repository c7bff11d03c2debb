import json
from pathlib import Path

import pytest
import yaml
from PIL import Image

from signprior.cli import load_config, main, merge_reports, parse_config
from signprior.errors import ConfigError

TINY = {
    "dataset": {"synthetic": {"counts": {"train": 6, "valid": 3, "test": 3}, "image_size": 96}},
    "trunk": {"widths": [4, 4, 4, 4]},
    "hyperparams": {"epochs_stage1": 1, "epochs_stage2": 1},
    "seeds": [0],
}


def write_cfg(path, **over):
    d = json.loads(json.dumps(TINY))
    d.update(over)
    path.write_text(yaml.safe_dump(d))
    return str(path)


def manifest_of(out):
    return json.loads((Path(out) / "run_manifest.json").read_text())


def assert_no_stray_files(out):
    man = manifest_of(out)
    listed = set(man["artifacts"]) | {"run_manifest.json"}
    on_disk = {str(p.relative_to(out)) for p in Path(out).rglob("*") if p.is_file()}
    assert on_disk == listed


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> pretrain F/O -> train, sharing one config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "run.yaml")
    assert main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    cfg_path = write_cfg(root / "path.yaml", dataset={"path": str(root / "data" / "dataset")})
    for b in ("F", "O"):
        assert main(["pretrain", "--config", cfg_path, "--branch", b, "--out", str(root / f"pre{b}")]) == 0
    assert main(["train", "--config", cfg_path, "--ckpt-f", str(root / "preF" / "signs-F.ckpt"),
                 "--ckpt-o", str(root / "preO" / "signs-O.ckpt"), "--out", str(root / "train")]) == 0
    return root, cfg_path


def test_gen_data_outputs(pipeline):
    root, _ = pipeline
    ds = root / "data" / "dataset"
    assert (ds / "manifest.json").exists()
    assert len(list((ds / "images").glob("*.png"))) == 24
    assert_no_stray_files(root / "data")


def test_stage_outputs_and_hash_consistency(pipeline):
    root, _ = pipeline
    man = manifest_of(root / "train")
    h = man["config_hash"]
    assert man["tool_version"] and man["seeds"] == [0]
    assert set(man["inputs"]) >= {str(root / "preF" / "signs-F.ckpt"), str(root / "preO" / "signs-O.ckpt")}
    assert "diagnosis-knowledge.ckpt" in man["artifacts"]
    for line in (root / "train" / "diagnosis-knowledge.jsonl").read_text().splitlines():
        assert json.loads(line)["config_hash"] == h
    assert manifest_of(root / "preF")["config_hash"] == h
    for d in ("preF", "preO", "train"):
        assert_no_stray_files(root / d)


def test_evaluate_is_byte_deterministic(pipeline):
    root, cfg = pipeline
    ck = str(root / "train" / "diagnosis-knowledge.ckpt")
    for name in ("ev1", "ev2"):
        assert main(["evaluate", "--config", cfg, "--ckpt", ck, "--out", str(root / name)]) == 0
    a = (root / "ev1" / "report.json").read_bytes()
    assert a == (root / "ev2" / "report.json").read_bytes()
    rep = json.loads(a)
    assert set(rep["metrics"]) == {"AUROC", "Precision", "Recall", "F1", "Kappa"}
    assert rep["config_hash"] == manifest_of(root / "ev1")["config_hash"] and rep["seed"] == 0
    assert rep["config_hash"] in (root / "ev1" / "report.txt").read_text()


def test_evaluate_stage1_checkpoint(pipeline):
    root, cfg = pipeline
    assert main(["evaluate", "--config", cfg, "--ckpt", str(root / "preO" / "signs-O.ckpt"),
                 "--split", "valid", "--out", str(root / "ev_o")]) == 0
    rep = json.loads((root / "ev_o" / "report.json").read_text())
    assert set(rep["metrics"]) == {"AUROC", "Precision", "Recall", "F1", "Acc"}


def test_explain_overlays(pipeline):
    root, cfg = pipeline
    out = root / "explain"
    ck = str(root / "train" / "diagnosis-knowledge.ckpt")
    assert main(["explain", "--config", cfg, "--ckpt", ck, "--ids", "g00009", "--class", "1",
                 "--out", str(out)]) == 0
    names = sorted(p.name for p in (out / "overlays").glob("*.png"))
    assert names == ["g00009_F_PCV.png", "g00009_O_PCV.png"]
    with Image.open(out / "overlays" / names[0]) as im:
        assert im.size == (96, 96)
        assert im.text["config_hash"] == manifest_of(out)["config_hash"]
    data = json.loads((out / "explanations.json").read_text())
    assert data["samples"]["g00009"]["class"] == "PCV"
    assert_no_stray_files(out)
    assert main(["explain", "--config", cfg, "--ckpt", ck, "--ids", "nope", "--out", str(root / "x")]) == 3


def test_ablate_and_report(tmp_path):
    cfg = write_cfg(tmp_path / "a.yaml")
    assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "abl")]) == 0
    rep = json.loads((tmp_path / "abl" / "report.json").read_text())
    assert rep["row_order"] == ["with-knowledge", "w/o-knowledge"] and set(rep["rows"]) == set(rep["row_order"])
    for row in rep["rows"].values():
        assert set(row) == {"AUROC", "Precision", "Recall", "F1", "Kappa"}
    text = (tmp_path / "abl" / "report.txt").read_text()
    assert "with-knowledge" in text and "Kappa" in text
    assert (tmp_path / "abl" / "seed0" / "diagnosis-knowledge.ckpt").exists()
    assert (tmp_path / "abl" / "seed0" / "diagnosis-scratch.ckpt").exists()
    assert_no_stray_files(tmp_path / "abl")

    assert main(["report", str(tmp_path / "abl"), "--out", str(tmp_path / "rep")]) == 0
    merged = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert merged["target"] == "with-knowledge" and merged["baseline"] == "w/o-knowledge"
    k, s = rep["rows"]["with-knowledge"], rep["rows"]["w/o-knowledge"]
    assert merged["Improve"]["Kappa"] == pytest.approx(k["Kappa"] - s["Kappa"])
    assert "Improve" in (tmp_path / "rep" / "report.txt").read_text()


def _run_with_rows(path, rows):
    path.mkdir()
    (path / "report.json").write_text(json.dumps({"rows": rows, "row_order": list(rows), "config_hash": "x"}))
    return str(path)


def test_report_improve_row_known_deltas(tmp_path):
    cols = ("AUROC", "Precision", "Recall", "F1", "Kappa")
    ours = _run_with_rows(tmp_path / "ours", {"two-stage": dict(zip(cols, (0.9971, 0.9373, 0.9233, 0.9247, 0.8507)))})
    base = _run_with_rows(tmp_path / "base", {
        "Ophthalmologists": dict(zip(cols, (0.9557, 0.9522, 0.9010, 0.9110, 0.7949))),
        "bi-modal DCNN": dict(zip(cols, (0.9355, 0.9244, 0.9147, 0.9166, 0.7492))),
        "w/o Knowledge": dict(zip(cols, (0.9302, 0.8637, 0.8438, 0.8402, 0.5932))),
    })
    out = tmp_path / "cmp"
    assert main(["report", ours, base, "--baseline", "bi-modal DCNN", "--out", str(out)]) == 0
    merged = json.loads((out / "report.json").read_text())
    expected = dict(zip(cols, (0.0616, 0.0129, 0.0086, 0.0081, 0.1015)))
    for c in cols:
        assert merged["Improve"][c] == pytest.approx(expected[c], abs=1e-9)
    # the delta against the w/o Knowledge row is also available
    assert merged["pairwise"]["two-stage - w/o Knowledge"]["AUROC"] == pytest.approx(0.0669, abs=1e-9)
    assert len(merged["pairwise"]) == 4 * 3


def test_merge_reports_prefixes_colliding_rows():
    r = {"rows": {"arm": {"AUROC": 0.8}}}
    s = {"rows": {"arm": {"AUROC": 0.6}}}
    merged = merge_reports([("run1", r), ("run2", s)])
    assert list(merged["rows"]) == ["run1/arm", "run2/arm"]
    assert merged["Improve"]["AUROC"] == pytest.approx(0.2)


# ---------------------------------------------------------------- config and exit codes


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="unknown keys"):
        parse_config({"lr": 0.1})
    with pytest.raises(ConfigError, match="hyperparams"):
        parse_config({"hyperparams": {"momentum": 1.5, "bogus": 1}})
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"seeds": "zero"})
    with pytest.raises(ConfigError, match="profile"):
        parse_config({"profile": "huge"})
    with pytest.raises(ConfigError, match="trunk"):
        parse_config({"trunk": {"name": "vgg99"}})


def test_profiles_and_hash():
    desk, full = parse_config({}), parse_config({"profile": "full"})
    assert (desk.hyperparams.epochs_stage1, desk.hyperparams.epochs_stage2) == (30, 20)
    assert (full.hyperparams.epochs_stage1, full.hyperparams.epochs_stage2) == (500, 100)
    assert desk.synthetic.counts == {"train": 600, "valid": 100, "test": 100}
    assert desk.hash != full.hash
    assert parse_config({"out": "a"}).hash == parse_config({"out": "b"}).hash


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("dataset: {synthetic: {counts: {train: 0, valid: 1, test: 1}}}\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "unk.yaml").write_text("colour: blue\n")
    assert main(["gen-data", "--config", str(tmp_path / "unk.yaml")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "absent.yaml")]) == 3
    cfg = write_cfg(tmp_path / "ok.yaml")
    assert main(["evaluate", "--config", cfg, "--ckpt", str(tmp_path / "none.ckpt"),
                 "--out", str(tmp_path / "e")]) == 3
    assert main(["report", str(tmp_path / "nothing"), "--out", str(tmp_path / "r")]) == 3
    assert load_config(None).seeds == (0,)
