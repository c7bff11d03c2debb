"""
Two-stage sign-prior training, end to end on a tiny synthetic set
=================================================================

Runs in a minute or two on a CPU. Writes into ``demo_out/`` next to the
current directory.
"""

# %%
# A synthetic bi-modal dataset: every group has a fundus image, an OCT image,
# five sign flags per modality and a disease label derived from the flags.
from pathlib import Path

import numpy as np
from PIL import Image

from signprior.data import ImageStore, Modality, SyntheticSpec, generate_synthetic_dataset
from signprior.data.schema import FUNDUS_SIGNS, OCT_SIGNS, DiseaseLabel

out = Path("demo_out")
out.mkdir(exist_ok=True)
spec = SyntheticSpec(counts={"train": 40, "valid": 12, "test": 12}, image_size=128)
manifest = generate_synthetic_dataset(spec)
g = manifest.records[0]
print(g.id, DiseaseLabel(g.disease).name)
print("fundus signs:", [n for n, f in zip(FUNDUS_SIGNS, g.fundus_signs.flags) if f])
print("oct signs:   ", [n for n, f in zip(OCT_SIGNS, g.oct_signs.flags) if f])

# %%
# The store preprocesses everything once: 224x224x3 floats in [0, 1].
store = ImageStore(manifest)
x = store.image(Modality.FUNDUS, g.fundus.id)
print(x.shape, x.dtype, float(x.min()), float(x.max()))

# %%
# Stage 1: one encoder per modality, trained on its five signs with BCE.
# A small trunk keeps this quick; the default trunk is wider.
from signprior.model import TrunkConfig
from signprior.train import Hyperparams, finetune_diagnosis, pretrain_signs, train_scratch_baseline

trunk = TrunkConfig(widths=(8, 16, 16, 16))
h = Hyperparams(epochs_stage1=4, epochs_stage2=3, seed=0)
ck_f = pretrain_signs("F", store, h, trunk)
ck_o = pretrain_signs("O", store, h, trunk)
print("stage-1 validation AUROC", ck_f.metrics["val_auroc"], ck_o.metrics["val_auroc"])

# %%
# Stage 2 starts from those encoders, concatenates the two 1000-d features
# and trains a 3-way head. The scratch arm gets the same number of steps.
ck_k = finetune_diagnosis(ck_f, ck_o, store, h)
ck_s = train_scratch_baseline(store, h, trunk)
print("steps", ck_k.metrics["steps"], ck_s.metrics["steps"])

# %%
from signprior.metrics import build_report, format_table
from signprior.train import evaluate_diagnosis

names = [d.name for d in DiseaseLabel]
rows = []
for arm, ck in (("with-knowledge", ck_k), ("w/o-knowledge", ck_s)):
    rep = build_report(2, evaluate_diagnosis(ck.build_model(), store, "test"), names)
    rows.append((arm, rep.metrics))
print(format_table(rows))

# %%
# Grad-CAM on the last conv layer of each branch, drawn over the input.
from signprior.explain import gradcam, localization_score, original_size, render_overlay

model = ck_k.build_model()
t = manifest[manifest.splits["test"][0]]
heat_f, heat_o = gradcam(model, t, int(t.disease), store=store)
for heat, rec, m in ((heat_f, t.fundus, Modality.FUNDUS), (heat_o, t.oct, Modality.OCT)):
    img = render_overlay(heat, store.image(m, rec.id), alpha=0.5)
    Image.fromarray((img * 255).round().astype(np.uint8)).save(out / f"{t.id}_{heat.branch}.png")
    boxes = t.boxes(m)
    if boxes:
        print(heat.branch, "heat mass in boxes", round(localization_score(heat, boxes, original_size(t)), 3))
